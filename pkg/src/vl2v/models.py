"""Teacher oracles, student encoders, classifier heads and prompts.

Embeddings are plain float64 numpy arrays with unit-norm rows. Teachers are
frozen: their arrays are read-only and ``state_hash`` lets callers verify
that no training run touched them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .data import DomainDataset, Samples
from .errors import ConfigError, DimensionError, MissingEmbeddingError, UnsupportedModeError
from .numerics import Tensor

TEACHER_FORMAT = "vl2v-teacher/1"


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _unit(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _renormalize(a: np.ndarray) -> np.ndarray:
    # stored unit vectors pass through untouched so exported embeddings round-trip bit-exactly
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.all(np.abs(norms - 1.0) <= 1e-12):
        return np.array(a)
    return a / norms


def _hash_arrays(named: Iterable[tuple[str, np.ndarray]]) -> str:
    h = hashlib.sha256()
    for name, arr in named:
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class Prompt:
    template: str
    class_name: str
    domain_name: str | None = None

    def __post_init__(self):
        if self.template not in ("photo", "domain"):
            raise ConfigError(f"unknown prompt template {self.template!r}")
        if self.template == "domain" and self.domain_name is None:
            raise ConfigError("the domain template needs a domain name")

    def render(self) -> str:
        if self.template == "photo":
            return f"A photo of a {self.class_name}"
        return f"A {self.domain_name} of a {self.class_name}"

    @property
    def key(self) -> str:
        if self.template == "photo":
            return f"txt_photo_{self.class_name}"
        return f"txt_domain_{self.class_name}_{self.domain_name}"


def build_prompts(classes: Sequence[str], domains: Sequence[str] | None = None, template: str = "photo") -> list[Prompt]:
    classes = list(classes)
    if not classes:
        raise ConfigError("class list is empty")
    if len(set(classes)) != len(classes):
        raise ConfigError("duplicate class names")
    if template == "photo":
        return [Prompt("photo", c) for c in classes]
    if template == "domain":
        if not domains:
            raise ConfigError("the domain template needs at least one domain")
        return [Prompt("domain", c, dom) for c in classes for dom in domains]
    raise ConfigError(f"unknown prompt template {template!r}")


# ---------------------------------------------------------------------------
# teachers


class SyntheticTeacher:
    """Embedding oracle built from a dataset's generative structure.

    Image embeddings are the noise-free latents of the samples; the text
    embedding of "A photo of a {class}" is the class prototype and that of
    "A {domain} of a {class}" the prototype shifted by the domain offset.
    """

    backend = "synthetic"

    def __init__(self, classes, domains, prototypes, offsets, alpha, sigma, image_map=None):
        self.classes = tuple(classes)
        self.domains = tuple(domains)
        self.prototypes = _readonly(prototypes)
        self.offsets = _readonly(offsets)
        self.alpha = float(alpha)
        self.sigma = float(sigma)
        self._image_map = None if image_map is None else tuple(_readonly(a) for a in image_map)
        if self.prototypes.shape[0] != len(self.classes):
            raise DimensionError("one prototype per class required")

    @classmethod
    def from_dataset(cls, ds: DomainDataset) -> SyntheticTeacher:
        if ds.world is None or ds.params is None:
            raise UnsupportedModeError("dataset carries no generator; use a file-backed teacher")
        w = ds.world
        # white-box image encoder on raw inputs: pseudo-inverse of the mixing matrix
        weight = np.linalg.pinv(w.mixing).T
        bias = np.zeros(w.mixing.shape[1])
        return cls(ds.classes, ds.domains, w.prototypes, w.offsets, ds.params.alpha, ds.params.sigma, (weight, bias))

    @property
    def dimension(self) -> int:
        return self.prototypes.shape[1]

    def _class(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise MissingEmbeddingError(f"teacher knows no class {name!r}") from None

    def _domain(self, name: str) -> int:
        try:
            return self.domains.index(name)
        except ValueError:
            raise MissingEmbeddingError(f"teacher knows no domain {name!r}") from None

    def image_embed(self, samples: Samples) -> np.ndarray:
        if samples.eps.shape[-1] != self.dimension:
            raise DimensionError(f"sample noise has dim {samples.eps.shape[-1]}, teacher expects {self.dimension}")
        raw = self.prototypes[samples.y] + self.alpha * self.offsets[samples.d] + self.sigma * samples.eps
        return _unit(raw)

    def text_embed(self, prompt: Prompt) -> np.ndarray:
        mu = self.prototypes[self._class(prompt.class_name)]
        if prompt.template == "photo":
            return np.array(mu)
        return _unit(mu + self.alpha * self.offsets[self._domain(prompt.domain_name)])

    def image_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Weights ``(W, b)`` of the white-box image encoder ``normalize(x @ W + b)``."""
        if self._image_map is None:
            raise UnsupportedModeError("this teacher exposes no image encoder weights")
        return np.array(self._image_map[0]), np.array(self._image_map[1])

    def state_hash(self) -> str:
        arrays = [("prototypes", self.prototypes), ("offsets", self.offsets)]
        arrays.append(("scalars", np.array([self.alpha, self.sigma])))
        if self._image_map is not None:
            arrays += [("map_w", self._image_map[0]), ("map_b", self._image_map[1])]
        h = hashlib.sha256(_hash_arrays(arrays).encode())
        h.update(json.dumps([self.classes, self.domains]).encode())
        return h.hexdigest()


class FileTeacher:
    """Teacher backed by a directory of stored embeddings.

    Layout: ``meta.json`` with ``dimension``, ``classes`` and ``domains``, and
    one little-endian f64 file per key: ``img_<sampleid>.bin``,
    ``txt_photo_<class>.bin`` and ``txt_domain_<class>_<domain>.bin``.
    """

    backend = "file"

    def __init__(self, directory):
        self.directory = Path(directory)
        try:
            meta = json.loads((self.directory / "meta.json").read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"no teacher at {self.directory}") from exc
        self.classes = tuple(meta["classes"])
        self.domains = tuple(meta["domains"])
        self._dimension = int(meta["dimension"])
        table = {}
        for path in sorted(self.directory.glob("*.bin")):
            vec = np.fromfile(path, dtype="<f8").astype(np.float64)
            if vec.shape != (self._dimension,):
                raise DimensionError(f"{path.name} holds {vec.size} values, expected {self._dimension}")
            table[path.stem] = _readonly(vec)
        self.embedding_table = table

    @property
    def dimension(self) -> int:
        return self._dimension

    def _lookup(self, key: str) -> np.ndarray:
        try:
            return self.embedding_table[key]
        except KeyError:
            raise MissingEmbeddingError(f"no stored embedding {key!r} in {self.directory}") from None

    def image_embed(self, samples: Samples) -> np.ndarray:
        return _renormalize(np.stack([self._lookup(f"img_{int(i)}") for i in samples.ids]))

    def text_embed(self, prompt: Prompt) -> np.ndarray:
        if prompt.class_name not in self.classes:
            raise MissingEmbeddingError(f"teacher knows no class {prompt.class_name!r}")
        return _renormalize(self._lookup(prompt.key))

    def image_map(self):
        raise UnsupportedModeError("a file-backed teacher has no trainable image encoder")

    def state_hash(self) -> str:
        h = hashlib.sha256(_hash_arrays(sorted(self.embedding_table.items())).encode())
        h.update(json.dumps([self.classes, self.domains, self._dimension]).encode())
        return h.hexdigest()


def export_teacher(teacher, ds: DomainDataset, directory) -> Path:
    """Write every embedding ``teacher`` can produce for ``ds`` in the file-teacher layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": TEACHER_FORMAT,
        "dimension": teacher.dimension,
        "classes": list(teacher.classes),
        "domains": list(teacher.domains),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    for sid, vec in zip(ds.ids, teacher.image_embed(ds.all())):
        np.asarray(vec, dtype="<f8").tofile(directory / f"img_{int(sid)}.bin")
    prompts = build_prompts(teacher.classes) + build_prompts(teacher.classes, teacher.domains, "domain")
    for p in prompts:
        np.asarray(teacher.text_embed(p), dtype="<f8").tofile(directory / f"{p.key}.bin")
    return directory


def teacher_image_embed(teacher, sample) -> np.ndarray:
    """Image embedding of one sample (or of every sample in a batch)."""
    return teacher.image_embed(sample)


def teacher_text_embed(teacher, prompt: Prompt) -> np.ndarray:
    return teacher.text_embed(prompt)


# ---------------------------------------------------------------------------
# students and heads


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in)


class StudentModel:
    """Affine+tanh backbone followed by an affine projection into the teacher space."""

    def __init__(self, layers, projection, last_activation: bool = True):
        self.layers = [(Tensor(w), Tensor(b)) for w, b in layers]
        w, b = projection
        self.projection = (Tensor(w), None if b is None else Tensor(b))
        self.last_activation = last_activation
        self.backbone_frozen = False
        self.projection_frozen = False
        self._sync_flags()

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        input_dim: int = 32,
        hidden_dim: int = 32,
        feature_dim: int = 16,
        embed_dim: int = 16,
        projection_bias: bool = True,
    ) -> StudentModel:
        layers = [
            (_init_weight(rng, input_dim, hidden_dim), np.zeros(hidden_dim)),
            (_init_weight(rng, hidden_dim, feature_dim), np.zeros(feature_dim)),
        ]
        proj = (_init_weight(rng, feature_dim, embed_dim), np.zeros(embed_dim) if projection_bias else None)
        return cls(layers, proj)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.projection[0].shape[1]

    def set_frozen(self, backbone: bool | None = None, projection: bool | None = None) -> None:
        if backbone is not None:
            self.backbone_frozen = backbone
        if projection is not None:
            self.projection_frozen = projection
        self._sync_flags()

    def _sync_flags(self) -> None:
        for w, b in self.layers:
            w.requires_grad = b.requires_grad = not self.backbone_frozen
        for t in self.projection:
            if t is not None:
                t.requires_grad = not self.projection_frozen

    def named_parameters(self, part: str | None = None) -> dict[str, Tensor]:
        out = {}
        if part in (None, "backbone"):
            for i, (w, b) in enumerate(self.layers):
                out[f"backbone.{i}.weight"] = w
                out[f"backbone.{i}.bias"] = b
        if part in (None, "projection"):
            out["projection.weight"] = self.projection[0]
            if self.projection[1] is not None:
                out["projection.bias"] = self.projection[1]
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.named_parameters().values() if t.requires_grad]

    def features(self, x) -> Tensor:
        x = nx.as_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"student expects input dim {self.input_dim}, got {x.shape[-1]}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = nx.matmul(h, w) + b
            if i < last or self.last_activation:
                h = nx.tanh(h)
        return h

    def project(self, features: Tensor) -> Tensor:
        w, b = self.projection
        out = nx.matmul(features, w)
        if b is not None:
            out = out + b
        return nx.l2_normalize(out)

    def projected(self, x) -> Tensor:
        return self.project(self.features(x))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(t.data) for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigError(f"state keys {sorted(state)} do not match {sorted(params)}")
        for k, t in params.items():
            arr = np.array(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {t.shape}")
            arr.flags.writeable = False
            t.data = arr
            t.grad = None

    def copy(self) -> StudentModel:
        layers = [(w.data, b.data) for w, b in self.layers]
        w, b = self.projection
        twin = StudentModel(layers, (w.data, None if b is None else b.data), self.last_activation)
        twin.set_frozen(self.backbone_frozen, self.projection_frozen)
        return twin

    def part_hash(self, part: str | None = None) -> str:
        return _hash_arrays((k, t.data) for k, t in self.named_parameters(part).items())


def student_features(student: StudentModel, x) -> Tensor:
    return student.features(x)


def student_projected_features(student: StudentModel, x) -> Tensor:
    return student.projected(x)


class AffineEncoder:
    """``normalize(x @ W + b)``: the trainable form of a white-box image encoder."""

    def __init__(self, weight, bias):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"encoder.weight": self.weight, "encoder.bias": self.bias}

    def trainable_parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def embed(self, x) -> Tensor:
        x = nx.as_tensor(x)
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"encoder expects input dim {self.weight.shape[0]}, got {x.shape[-1]}")
        return nx.l2_normalize(nx.matmul(x, self.weight) + self.bias)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(t.data) for k, t in self.named_parameters().items()}

    def part_hash(self, part=None) -> str:
        return _hash_arrays((k, t.data) for k, t in self.named_parameters().items())


class LinearHead:
    """Trainable affine classifier over backbone features."""

    def __init__(self, weight, bias):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int, num_classes: int) -> LinearHead:
        return cls(_init_weight(rng, in_dim, num_classes), np.zeros(num_classes))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight, "head.bias": self.bias}

    def logits(self, features: Tensor) -> Tensor:
        return nx.matmul(features, self.weight) + self.bias

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(nx.as_tensor(features)).data, axis=-1)


class CosineHead:
    """Classifier whose logits are cosines to trainable class vectors (one row per class)."""

    def __init__(self, class_vectors):
        self.weight = Tensor(class_vectors, requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"head.weight": self.weight}

    def logits(self, embeddings: Tensor) -> Tensor:
        rows = nx.l2_normalize(self.weight)
        return nx.matmul(nx.l2_normalize(embeddings), nx.transpose(rows))

    def predict(self, embeddings) -> np.ndarray:
        return np.argmax(self.logits(nx.as_tensor(embeddings)).data, axis=-1)


@dataclass(frozen=True)
class ZeroShotHead:
    class_embeddings: np.ndarray  # (C, D), row c is T_c

    def __post_init__(self):
        emb = _readonly(self.class_embeddings)
        if emb.ndim != 2:
            raise DimensionError("class embeddings must form a matrix")
        if not np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-10, rtol=0):
            raise ConfigError("zero-shot head rows must be unit-norm")
        object.__setattr__(self, "class_embeddings", emb)

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        e = np.asarray(embeddings, dtype=np.float64)
        if e.shape[-1] != self.class_embeddings.shape[1]:
            raise DimensionError(f"embedding dim {e.shape[-1]} != head dim {self.class_embeddings.shape[1]}")
        return _unit(e) @ self.class_embeddings.T


def build_zero_shot_head(teacher, classes: Sequence[str]) -> ZeroShotHead:
    prompts = build_prompts(classes, template="photo")
    return ZeroShotHead(np.stack([teacher.text_embed(p) for p in prompts]))


def predict(head: ZeroShotHead, e) -> int | np.ndarray:
    """argmax_c cos(e, T_c); the lowest class index wins ties."""
    e = e.data if isinstance(e, Tensor) else e
    pred = np.argmax(head.scores(e), axis=-1)
    return int(pred) if np.ndim(pred) == 0 else pred
