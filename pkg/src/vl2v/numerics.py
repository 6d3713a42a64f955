"""Dense float64 tensors with reverse-mode autodiff, Adam and a gradient checker.

Every operation that involves a tensor with ``requires_grad`` is recorded as a
node carrying a monotonically increasing id, so the recording order is a valid
topological order. :func:`backward` walks the reachable nodes in exactly the
reverse of that order and fills ``grad`` on leaf tensors.

Broadcasting is limited to three cases: equal shapes, a scalar against
anything, and a length-``n`` vector against the rows of an ``(m, n)`` matrix.
Reductions along the last axis (normalisation, cosine, softmax) treat a 2-D
tensor as a batch of row vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateVectorError, DimensionError, RankError

EPS_NORM = 1e-10
EPS_PROB = 1e-12

_node_ids = itertools.count()


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """A float64 array that optionally participates in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _frozen(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = _frozen(np.asarray(data, dtype=np.float64))
        out.grad = None
        out.op = op
        out._id = next(_node_ids)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root``, in recording order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._id)


def backward(loss: Tensor) -> int:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Returns the number of graph nodes visited. Calling twice without
    clearing accumulates.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = graph_nodes(loss)
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    visited = 0
    for node in reversed(nodes):
        visited += 1
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(parent._id)
            pending[parent._id] = pg if acc is None else acc + pg
    return visited


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return Tensor._result(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    """Natural log with inputs clamped below at ``EPS_PROB``."""
    a = as_tensor(a)
    live = a.data > EPS_PROB
    x = np.where(live, a.data, EPS_PROB)

    def bw(g):
        return (np.where(live, g / x, 0.0),)

    return Tensor._result(np.log(x), (a,), bw, "log")


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.sum(a.data, axis=axis), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul supports vectors and matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        return g * B, g * A

    return Tensor._result(A @ B, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def _norms(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError(f"cannot normalise a vector with norm <= {EPS_NORM}")
    return norms


def l2_normalize(a) -> Tensor:
    """Scale ``a`` (or each row of ``a``) to unit Euclidean norm."""
    a = as_tensor(a)
    norms = _norms(a.data)
    y = a.data / norms

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms,)

    return Tensor._result(y, (a,), bw, "l2_normalize")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis; scalar for vectors, ``(n,)`` for row batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    na, nb = _norms(a.data), _norms(b.data)
    ua, ub = a.data / na, b.data / nb
    c = np.sum(ua * ub, axis=-1)

    def bw(g):
        gc = np.expand_dims(g, -1)
        cc = np.expand_dims(c, -1)
        return gc * (ub - cc * ua) / na, gc * (ua - cc * ub) / nb

    return Tensor._result(c, (a, b), bw, "cosine_sim")


# ---------------------------------------------------------------------------
# probability


def softmax(logits, temperature: float = 1.0) -> Tensor:
    """softmax(logits / temperature) along the last axis, max-shifted."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    z = logits.data / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)) / temperature,)

    return Tensor._result(s, (logits,), bw, "softmax")


def cross_entropy(probs, label) -> Tensor:
    """-log(probs[label]); a row batch with an integer label array gives one value per row.

    Probabilities below ``EPS_PROB`` are clamped, so a zero at the label
    yields ``-log(EPS_PROB)`` with zero gradient.
    """
    probs = as_tensor(probs)
    labels = np.asarray(label)
    n_classes = probs.shape[-1]
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"class labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes: {label}")
    if probs.ndim == 1:
        if labels.ndim != 0:
            raise DimensionError("a single distribution takes a single label")
        picked = probs.data[int(labels)]
    elif probs.ndim == 2:
        if labels.shape != (probs.shape[0],):
            raise DimensionError(f"{probs.shape[0]} rows but labels of shape {labels.shape}")
        picked = probs.data[np.arange(probs.shape[0]), labels]
    else:
        raise DimensionError(f"cross_entropy expects 1-D or 2-D probabilities, got {probs.shape}")
    live = picked > EPS_PROB
    clamped = np.where(live, picked, EPS_PROB)

    def bw(g):
        out = np.zeros_like(probs.data)
        local = np.where(live, -g / clamped, 0.0)
        if probs.ndim == 1:
            out[int(labels)] = local
        else:
            out[np.arange(probs.shape[0]), labels] = local
        return (out,)

    return Tensor._result(-np.log(clamped), (probs,), bw, "cross_entropy")


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < -1e-12) or np.any(np.abs(np.sum(x, axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{name} is not a probability distribution")


def kl_div(p, q) -> Tensor:
    """KL(p || q) = sum p log(p / q) along the last axis, with 0 log 0 = 0."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div shape mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p.data, "p")
    _check_distribution(q.data, "q")
    support = p.data > 0
    q_live = q.data > EPS_PROB
    q_c = np.where(q_live, q.data, EPS_PROB)
    log_ratio = np.where(support, np.log(np.where(support, p.data, 1.0)) - np.log(q_c), 0.0)
    value = np.sum(np.where(support, p.data * log_ratio, 0.0), axis=-1)

    def bw(g):
        gx = np.expand_dims(g, -1)
        gp = np.where(support, log_ratio + 1.0, 0.0) * gx
        gq = np.where(q_live, -p.data / q_c, 0.0) * gx
        return gp, gq

    return Tensor._result(value, (p, q), bw, "kl_div")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, **kw) -> AdamState:
        if not lr >= 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        return cls(
            lr=lr,
            m=[np.zeros(np.shape(p)) for p in params],
            v=[np.zeros(np.shape(p)) for p in params],
            **kw,
        )


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns fresh parameter arrays."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and optimiser state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if np.shape(p) != np.shape(g) or np.shape(p) != m.shape:
            raise DimensionError(f"shape mismatch in adam_step: {np.shape(p)} vs {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params, state


class Adam:
    """Adam over a list of leaf tensors; reads ``grad`` and rebinds ``data``."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            [p.data for p in self.params], lr, beta1=betas[0], beta2=betas[1], eps=eps
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        new, _ = adam_step([p.data for p in self.params], grads, self.state)
        for p, arr in zip(self.params, new):
            p.data = _frozen(arr)


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the recorded gradient of ``f`` at ``point`` to central differences.

    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps coordinates whose true derivative is ~0 from dividing by
    rounding noise.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x0) if x.grad is None else np.array(x.grad)
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        numeric[idx] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(bool(max_rel < tol), max_rel, analytic, numeric)
