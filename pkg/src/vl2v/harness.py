"""Leave-one-domain-out protocol, embedding-robustness probes and run reports."""

from __future__ import annotations

import csv
import io
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DomainDataset, Split, SplitSpec, split_domainbed
from .errors import ConfigError, StateError
from .models import build_prompts, build_zero_shot_head
from .training import (
    FoldData,
    MethodResult,
    TrainConfig,
    init_student,
    model_parameters,
    needs_student,
    run_method,
    save_checkpoint,
)

PROBE_MODES = ("E1", "E2", "E3", "E4", "E5", "E6")


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldResult:
    test_domain: int
    ood_acc: float
    id_acc: float
    traces: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class RunReport:
    method: str
    folds: list[FoldResult]
    avg_ood: float
    avg_id: float
    seed: int | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> RunReport:
        folds = [FoldResult(**f) for f in doc["folds"]]
        return cls(doc["method"], folds, doc["avg_ood"], doc["avg_id"], doc.get("seed"), doc.get("config", {}))

    @classmethod
    def from_json(cls, text: str) -> RunReport:
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "seed", "fold", "test_domain", "ood_acc", "id_acc"])
        for i, f in enumerate(self.folds):
            w.writerow([self.method, self.seed, i, f.test_domain, repr(f.ood_acc), repr(f.id_acc)])
        w.writerow([self.method, self.seed, "avg", "", repr(self.avg_ood), repr(self.avg_id)])
        return buf.getvalue()


def aggregate_report(folds, method: str = "custom", seed: int | None = None, config: dict | None = None) -> RunReport:
    folds = list(folds)
    if not folds:
        raise ConfigError("cannot aggregate an empty list of folds")
    ood = float(np.mean([f.ood_acc for f in folds]))
    id_ = float(np.mean([f.id_acc for f in folds]))
    return RunReport(method, folds, ood, id_, seed, dict(config or {}))


# ---------------------------------------------------------------------------
# leave-one-domain-out

MethodFn = Callable[[FoldData, object, int, int], MethodResult]


def _run_fold(ds, teacher, cfg: TrainConfig, method, seed: int, fold: int, student, checkpoint_dir=None) -> FoldResult:
    split = split_domainbed(ds, SplitSpec(fold, cfg.val_fraction, seed))
    data = FoldData(ds, split)
    before = teacher.state_hash()
    if callable(method):
        result = method(data, teacher, seed, fold)
    else:
        result = run_method(method, None if student is None else student.copy(), teacher, data, cfg, seed, fold)
    if teacher.state_hash() != before:
        raise StateError("teacher state changed during training")
    ood = result.accuracy(ds.subset(split.test))
    id_ = result.accuracy(ds.subset(split.val))
    if checkpoint_dir is not None:
        meta = {"seed": seed, "fold": fold, "test_domain": fold, "method": str(method)}
        save_checkpoint(model_parameters(result), Path(checkpoint_dir) / f"fold_{fold}", meta)
    return FoldResult(fold, ood, id_, result.traces)


def _fold_job(args):
    collect, rest = args[0], args[1:]
    if not collect:
        return _run_fold(*rest)
    try:
        return _run_fold(*rest)
    except Exception as exc:  # reported per fold; the remaining folds still run
        return FoldFailure(rest[5], f"{type(exc).__name__}: {exc}")


@dataclass
class FoldFailure:
    fold: int
    error: str


def leave_one_domain_out(
    ds: DomainDataset,
    cfg: TrainConfig,
    teacher,
    seed: int = 0,
    method: str | MethodFn = "adip",
    jobs: int = 1,
    config_echo: dict | None = None,
    failures: list | None = None,
    checkpoint_dir=None,
) -> RunReport:
    """Train one model per held-out domain and average OOD (held-out) and ID (source-val) accuracy.

    With a ``failures`` list, a fold that raises is recorded there as a
    :class:`FoldFailure` and left out of the averages instead of aborting the run.
    """
    cfg.validate()
    student = None
    if isinstance(method, str) and needs_student(method):
        # backbone pre-fitting is fold-independent: do it once and copy
        student = init_student(ds, cfg, seed, teacher.dimension)
    collect = failures is not None
    args = [(collect, ds, teacher, cfg, method, seed, fold, student, checkpoint_dir) for fold in range(ds.num_domains)]
    if jobs > 1 and isinstance(method, str):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, args))
    else:
        folds = [_fold_job(a) for a in args]
    if collect:
        failures.extend(f for f in folds if isinstance(f, FoldFailure))
        folds = [f for f in folds if isinstance(f, FoldResult)]
    name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
    return aggregate_report(folds, name, seed, config_echo)


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    mode: str
    per_domain: list[float]
    average: float


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _class_mean_rows(emb: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    rows = np.full((num_classes, emb.shape[1]), np.nan)
    for c in range(num_classes):
        members = emb[labels == c]
        if len(members):
            rows[c] = _unit(members.mean(axis=0))
    return rows


def _argmax_scores(scores: np.ndarray) -> np.ndarray:
    # classes without any reference vector never win
    return np.argmax(np.where(np.isnan(scores), -np.inf, scores), axis=-1)


def _clamp_k(k: int, pool_labels: np.ndarray, num_classes: int, exclude_self: bool) -> None:
    smallest = min(int(np.sum(pool_labels == c)) for c in range(num_classes)) - int(exclude_self)
    if k > smallest:
        warnings.warn(f"k={k} exceeds the {smallest} images available for some class; using all of them", stacklevel=3)


def _knn_predictions(query: np.ndarray, pool: np.ndarray, pool_y: np.ndarray, num_classes: int, k: int, exclude_self: bool) -> np.ndarray:
    """Per query, score each class by the renormalised mean of its k nearest pool images."""
    pred = np.empty(len(query), dtype=np.int64)
    sims_all = _unit(query) @ _unit(pool).T
    for i in range(len(query)):
        scores = np.full(num_classes, np.nan)
        for c in range(num_classes):
            members = np.flatnonzero(pool_y == c)
            if exclude_self:
                members = members[members != i]
            if not len(members):
                continue
            order = np.argsort(-sims_all[i, members], kind="stable")[:k]
            centre = _unit(pool[members[order]].mean(axis=0))
            scores[c] = centre @ _unit(query[i])
        pred[i] = _argmax_scores(scores[None, :])[0]
    return pred


def probe_split(ds: DomainDataset, teacher, split: Split, mode: str, k: int = 10) -> float:
    """Accuracy on the held-out domain of one probe classifier."""
    if mode not in PROBE_MODES:
        raise ConfigError(f"unknown probe mode {mode!r}; expected one of {', '.join(PROBE_MODES)}")
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    C = ds.num_classes
    target = ds.subset(split.test)
    query = teacher.image_embed(target)
    if mode == "E1":
        rows = build_zero_shot_head(teacher, ds.classes).class_embeddings
        return float(np.mean(_argmax_scores(_unit(query) @ rows.T) == target.y))
    if mode == "E2":
        sources = [ds.domains[d] for d in range(ds.num_domains) if d != split.test_domain]
        rows = np.empty((C, teacher.dimension))
        for c, name in enumerate(ds.classes):
            embs = [teacher.text_embed(p) for p in build_prompts([name], sources, "domain")]
            rows[c] = _unit(np.mean(embs, axis=0))
        return float(np.mean(_argmax_scores(_unit(query) @ rows.T) == target.y))
    if mode == "E3":
        source = ds.subset(split.train)
        rows = _class_mean_rows(teacher.image_embed(source), source.y, C)
        return float(np.mean(_argmax_scores(_unit(query) @ rows.T) == target.y))
    if mode == "E4":
        # leave-one-out: the query image never contributes to its own class mean
        pred = np.empty(len(query), dtype=np.int64)
        for i in range(len(query)):
            keep = np.arange(len(query)) != i
            rows = _class_mean_rows(query[keep], target.y[keep], C)
            pred[i] = _argmax_scores((_unit(query[i]) @ rows.T)[None, :])[0]
        return float(np.mean(pred == target.y))
    if mode == "E5":
        source = ds.subset(split.train)
        _clamp_k(k, source.y, C, False)
        pred = _knn_predictions(query, teacher.image_embed(source), source.y, C, k, False)
        return float(np.mean(pred == target.y))
    _clamp_k(k, target.y, C, True)
    pred = _knn_predictions(query, query, target.y, C, k, True)
    return float(np.mean(pred == target.y))


def probe(ds: DomainDataset, teacher, split: SplitSpec | Split | None, mode: str, k: int = 10) -> ProbeResult:
    """Probe accuracy; ``split=None`` rotates the held-out domain over all domains."""
    if split is None:
        specs = [SplitSpec(d) for d in range(ds.num_domains)]
    elif isinstance(split, SplitSpec):
        specs = [split]
    else:
        accs = [probe_split(ds, teacher, split, mode, k)]
        return ProbeResult(mode, accs, float(np.mean(accs)))
    accs = [probe_split(ds, teacher, split_domainbed(ds, s), mode, k) for s in specs]
    return ProbeResult(mode, accs, float(np.mean(accs)))


def probe_lodo(ds: DomainDataset, teacher, k: int = 10, val_fraction: float = 0.2, seed: int = 0, modes=PROBE_MODES) -> dict[str, ProbeResult]:
    specs = [SplitSpec(d, val_fraction, seed) for d in range(ds.num_domains)]
    splits = [split_domainbed(ds, s) for s in specs]
    out = {}
    for mode in modes:
        accs = [probe_split(ds, teacher, sp, mode, k) for sp in splits]
        out[mode] = ProbeResult(mode, accs, float(np.mean(accs)))
    return out
