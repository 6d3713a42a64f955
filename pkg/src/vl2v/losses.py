"""Training objectives as differentiable scalars.

Teacher-derived inputs (image embeddings, text embeddings, teacher
distributions) are always wrapped as constants, so no gradient can reach
them.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .models import ZeroShotHead
from .numerics import Tensor


def _const(a) -> Tensor:
    return Tensor(a.data if isinstance(a, Tensor) else a)


def _rows(t: Tensor) -> Tensor:
    return t if t.ndim == 2 else Tensor._result(t.data[None, :], (t,), lambda g: (g[0],), "unsqueeze")


def clip_loss(img_embs, txt_embs, candidate_txts) -> Tensor:
    """Mean over pairs of -log softmax_c(cos(I_i, T_c)) evaluated at the paired text.

    The denominator runs over ``candidate_txts``, which must contain every
    paired text row exactly as given.
    """
    img = _rows(nx.as_tensor(img_embs))
    cand = _rows(nx.as_tensor(candidate_txts))
    pos_rows = np.atleast_2d(txt_embs.data if isinstance(txt_embs, Tensor) else np.asarray(txt_embs, dtype=float))
    if img.shape[0] != pos_rows.shape[0]:
        raise DimensionError(f"{img.shape[0]} images but {pos_rows.shape[0]} paired texts")
    if img.shape[1] != cand.shape[1] or pos_rows.shape[1] != cand.shape[1]:
        raise DimensionError("image, text and candidate embeddings differ in dimension")
    positives = np.empty(len(pos_rows), dtype=np.int64)
    for i, row in enumerate(pos_rows):
        hits = np.flatnonzero(np.all(cand.data == row, axis=1))
        if not hits.size:
            raise ConfigError(f"paired text {i} is not among the candidate texts")
        positives[i] = hits[0]
    rows = nx.l2_normalize(cand)
    logits = nx.matmul(nx.l2_normalize(img), nx.transpose(rows))
    return nx.mean(nx.cross_entropy(nx.softmax(logits, 1.0), positives))


def teacher_softmax(img_embs, head: ZeroShotHead, temperature: float = 1.0) -> np.ndarray:
    """softmax over cos(I_x, T_c) / temperature for every class c."""
    return nx.softmax(Tensor(head.scores(_const(img_embs).data)), temperature).data


def kd_loss(student_logits, labels, teacher_probs, lambda_kd: float = 1.0, temperature: float = 1.0) -> Tensor:
    """(1/n) sum_i CE(f_S(x_i), y_i) + lambda * KL(f_T(x_i) || f_S(x_i)).

    ``f_S`` is softmax(student_logits / temperature); ``teacher_probs`` are
    treated as constants.
    """
    if lambda_kd < 0:
        raise ConfigError(f"lambda_kd must be non-negative, got {lambda_kd}")
    logits = _rows(nx.as_tensor(student_logits))
    f_s = nx.softmax(logits, temperature)
    labels = np.atleast_1d(np.asarray(labels))
    per_sample = nx.cross_entropy(f_s, labels)
    if lambda_kd:
        f_t = np.atleast_2d(_const(teacher_probs).data)
        if f_t.shape != f_s.shape:
            raise DimensionError(f"teacher probs {f_t.shape} vs student probs {f_s.shape}")
        per_sample = per_sample + nx.kl_div(Tensor(f_t), f_s) * lambda_kd
    return nx.mean(per_sample)


def cross_entropy_loss(logits, labels, temperature: float = 1.0) -> Tensor:
    return nx.mean(nx.cross_entropy(nx.softmax(_rows(nx.as_tensor(logits)), temperature), np.atleast_1d(labels)))


def _paired_cosines(student: Tensor, teacher_img, text) -> tuple[Tensor, Tensor]:
    student = _rows(nx.as_tensor(student))
    t_img = np.atleast_2d(_const(teacher_img).data)
    t_txt = np.atleast_2d(_const(text).data)
    if not (student.shape == t_img.shape == t_txt.shape):
        raise DimensionError(f"shape mismatch: student {student.shape}, image {t_img.shape}, text {t_txt.shape}")
    return nx.cosine_sim(student, Tensor(t_txt)), nx.cosine_sim(student, Tensor(t_img))


def adip_loss_weighted(student_embs, teacher_img, text, lam: float) -> Tensor:
    """-(1/n) sum_i {(1 - lam) cos(PF_i, T_y) + lam cos(PF_i, I_i)}.

    At ``lam = 0.5`` this is exactly :func:`adip_loss`.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    cos_txt, cos_img = _paired_cosines(student_embs, teacher_img, text)
    n = cos_txt.shape[0]
    return nx.sum(cos_txt * (1.0 - lam) + cos_img * lam) * (-1.0 / n)


def adip_loss(student_embs, teacher_img, text) -> Tensor:
    """-(1/2n) sum_i {cos(PF_i, T_y) + cos(PF_i, I_i)}."""
    return adip_loss_weighted(student_embs, teacher_img, text, 0.5)


def sd_loss(student_embs, teacher_img, text) -> Tensor:
    """Self-distillation objective; same form as :func:`adip_loss` over image-encoder outputs."""
    return adip_loss_weighted(student_embs, teacher_img, text, 0.5)
