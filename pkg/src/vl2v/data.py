"""Synthetic multi-domain datasets, their file format and DomainBed-style splits.

Each sample is generated from a latent unit vector

    z = normalize(mu_y + alpha * delta_d + sigma * eps)

where ``mu_y`` is a class prototype, ``delta_d`` a per-domain offset and
``eps`` a stored per-sample noise vector. ``eps`` mixes a class-by-domain
style vector shared by all samples of that (class, domain) cell with fresh
per-sample jitter, so a class looks systematically different in every domain.
The observation handed to students is ``x = A z + b_d + obs_noise * eta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, GeneratorError
from .seeding import stream

DATASET_FORMAT = "vl2v-dataset/1"


@dataclass(frozen=True)
class GeneratorParams:
    num_classes: int = 5
    num_domains: int = 4
    per_domain_count: int = 100
    alpha: float = 0.8
    sigma: float = 0.2
    dim: int = 16
    input_dim: int = 32
    seed: int = 0
    style_share: float = 0.8
    noise_scale: float = 1.5
    input_shift: float = 0.2
    obs_noise: float = 0.01
    min_angle_deg: float = 60.0
    max_tries: int = 1000

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes", "num_classes")
        if self.num_domains < 2:
            raise ConfigError("need at least 2 domains", "num_domains")
        if self.per_domain_count < 1:
            raise ConfigError("must be positive", "per_domain_count")
        if self.dim < 2 or self.input_dim < self.dim:
            raise ConfigError("need 2 <= dim <= input_dim", "dim")
        if not 0.0 <= self.style_share <= 1.0:
            raise ConfigError("must lie in [0, 1]", "style_share")
        for name in ("alpha", "sigma", "noise_scale", "input_shift", "obs_noise"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", name)


@dataclass(frozen=True)
class SyntheticWorld:
    """The hidden generative structure shared by a dataset and its synthetic teacher."""

    prototypes: np.ndarray  # (C, D) unit rows
    offsets: np.ndarray  # (domains, D) unit rows
    styles: np.ndarray  # (C, domains, D)
    mixing: np.ndarray  # (D_in, D)
    input_biases: np.ndarray  # (domains, D_in)


@dataclass(frozen=True)
class Samples:
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    eps: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DomainDataset:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    eps: np.ndarray
    ids: np.ndarray
    classes: tuple[str, ...]
    domains: tuple[str, ...]
    params: GeneratorParams | None = None
    world: SyntheticWorld | None = None

    def __post_init__(self):
        n = len(self.ids)
        if not (len(self.x) == len(self.y) == len(self.d) == len(self.eps) == n):
            raise ConfigError("sample arrays disagree in length")
        if n and (self.y.min() < 0 or self.y.max() >= len(self.classes)):
            raise ConfigError("class index out of range")
        if n and (self.d.min() < 0 or self.d.max() >= len(self.domains)):
            raise ConfigError("domain index out of range")
        for arr in (self.x, self.y, self.d, self.eps, self.ids):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def subset(self, idx) -> Samples:
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(self.ids[idx], self.x[idx], self.y[idx], self.d[idx], self.eps[idx])

    def all(self) -> Samples:
        return self.subset(np.arange(len(self)))

    def counts(self) -> np.ndarray:
        """Sample counts as a (classes, domains) table."""
        table = np.zeros((self.num_classes, self.num_domains), dtype=np.int64)
        np.add.at(table, (self.y, self.d), 1)
        return table


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def _draw_prototypes(rng: np.random.Generator, p: GeneratorParams) -> np.ndarray:
    limit = math.cos(math.radians(p.min_angle_deg))
    for _ in range(p.max_tries):
        mu = _unit_rows(rng.normal(size=(p.num_classes, p.dim)))
        gram = mu @ mu.T - 2.0 * np.eye(p.num_classes)
        if gram.max() < limit:
            return mu
    raise GeneratorError(
        f"could not place {p.num_classes} prototypes {p.min_angle_deg} degrees apart in "
        f"{p.dim} dimensions after {p.max_tries} draws; try a larger dim"
    )


def build_world(p: GeneratorParams) -> SyntheticWorld:
    p.validate()
    seed = p.seed
    prototypes = _draw_prototypes(stream(seed, "prototypes"), p)
    offsets = _unit_rows(stream(seed, "offsets").normal(size=(p.num_domains, p.dim)))
    styles = stream(seed, "styles").normal(size=(p.num_classes, p.num_domains, p.dim))
    mixing = stream(seed, "mixing").normal(size=(p.input_dim, p.dim)) / math.sqrt(p.dim)
    biases = stream(seed, "input_bias").normal(size=(p.num_domains, p.input_dim))
    biases = p.alpha * p.input_shift * biases / math.sqrt(p.input_dim)
    return SyntheticWorld(prototypes, offsets, styles, mixing, biases)


def latent(world: SyntheticWorld, p: GeneratorParams, y, d, eps) -> np.ndarray:
    raw = world.prototypes[y] + p.alpha * world.offsets[d] + p.sigma * eps
    return _unit_rows(raw)


def gen_synthetic_domains(
    num_classes: int = 5,
    num_domains: int = 4,
    per_domain_count: int = 100,
    alpha: float = 0.8,
    sigma: float = 0.2,
    dim: int = 16,
    input_dim: int = 32,
    seed: int = 0,
    **extra,
) -> DomainDataset:
    params = GeneratorParams(
        num_classes=num_classes,
        num_domains=num_domains,
        per_domain_count=per_domain_count,
        alpha=alpha,
        sigma=sigma,
        dim=dim,
        input_dim=input_dim,
        seed=seed,
        **extra,
    )
    return generate(params)


def generate(p: GeneratorParams) -> DomainDataset:
    world = build_world(p)
    rng = stream(p.seed, "samples")
    share = math.sqrt(p.style_share)
    fresh = math.sqrt(1.0 - p.style_share)
    xs, ys, ds, es = [], [], [], []
    for dom in range(p.num_domains):
        y = np.arange(p.per_domain_count) % p.num_classes
        jitter = rng.normal(size=(p.per_domain_count, p.dim))
        eta = rng.normal(size=(p.per_domain_count, p.input_dim))
        eps = p.noise_scale * (share * world.styles[y, dom] + fresh * jitter)
        z = latent(world, p, y, dom, eps)
        xs.append(z @ world.mixing.T + world.input_biases[dom] + p.obs_noise * eta)
        ys.append(y)
        ds.append(np.full(p.per_domain_count, dom))
        es.append(eps)
    n = p.num_domains * p.per_domain_count
    return DomainDataset(
        x=np.concatenate(xs),
        y=np.concatenate(ys).astype(np.int64),
        d=np.concatenate(ds).astype(np.int64),
        eps=np.concatenate(es),
        ids=np.arange(n, dtype=np.int64),
        classes=tuple(f"class{i}" for i in range(p.num_classes)),
        domains=tuple(f"domain{i}" for i in range(p.num_domains)),
        params=p,
        world=world,
    )


# ---------------------------------------------------------------------------
# file format: meta.json + samples.bin (little-endian f64 records)


def save_dataset(ds: DomainDataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d_in, dim = ds.x.shape[1], ds.eps.shape[1]
    meta = {
        "format": DATASET_FORMAT,
        "classes": list(ds.classes),
        "domains": list(ds.domains),
        "count": len(ds),
        "input_dim": d_in,
        "dim": dim,
        "record": ["id", "y", "d", f"x[{d_in}]", f"eps[{dim}]"],
        "generator": asdict(ds.params) if ds.params is not None else None,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    records = np.column_stack([ds.ids, ds.y, ds.d, ds.x, ds.eps]).astype("<f8")
    records.tofile(directory / "samples.bin")
    return directory


def load_dataset(directory) -> DomainDataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no dataset at {directory}") from exc
    if meta.get("format") != DATASET_FORMAT:
        raise ConfigError(f"unsupported dataset format {meta.get('format')!r}")
    d_in, dim = meta["input_dim"], meta["dim"]
    width = 3 + d_in + dim
    raw = np.fromfile(directory / "samples.bin", dtype="<f8")
    if raw.size != meta["count"] * width:
        raise ConfigError("samples.bin size disagrees with meta.json")
    rec = raw.reshape(meta["count"], width).astype(np.float64)
    params = world = None
    if meta.get("generator") is not None:
        known = {f.name for f in fields(GeneratorParams)}
        params = GeneratorParams(**{k: v for k, v in meta["generator"].items() if k in known})
        world = build_world(params)
    return DomainDataset(
        x=np.ascontiguousarray(rec[:, 3 : 3 + d_in]),
        y=rec[:, 1].astype(np.int64),
        d=rec[:, 2].astype(np.int64),
        eps=np.ascontiguousarray(rec[:, 3 + d_in :]),
        ids=rec[:, 0].astype(np.int64),
        classes=tuple(meta["classes"]),
        domains=tuple(meta["domains"]),
        params=params,
        world=world,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    test_domain: int
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    test_domain: int


def split_domainbed(ds: DomainDataset, spec: SplitSpec) -> Split:
    """Hold out ``spec.test_domain`` entirely; split every other domain into train/val."""
    if not 0 <= spec.test_domain < ds.num_domains:
        raise ConfigError(f"test domain {spec.test_domain} out of range for {ds.num_domains} domains")
    if not 0.0 < spec.val_fraction < 1.0:
        raise ConfigError(f"val_fraction must lie in (0, 1), got {spec.val_fraction}")
    train, val = [], []
    for dom in range(ds.num_domains):
        if dom == spec.test_domain:
            continue
        members = np.flatnonzero(ds.d == dom)
        order = stream(spec.seed, "split", dom).permutation(members)
        n_val = int(round(spec.val_fraction * len(order)))
        val.append(order[:n_val])
        train.append(order[n_val:])
    split = Split(
        train=np.sort(np.concatenate(train)),
        val=np.sort(np.concatenate(val)),
        test=np.flatnonzero(ds.d == spec.test_domain),
        test_domain=spec.test_domain,
    )
    assert not np.intersect1d(split.train, split.val).size
    assert not np.intersect1d(split.train, split.test).size
    assert not np.intersect1d(split.val, split.test).size
    assert len(split.train) + len(split.val) + len(split.test) == len(ds)
    return split


def pretext_samples(
    world: SyntheticWorld,
    p: GeneratorParams,
    rng: np.random.Generator,
    num_classes: int,
    num_domains: int,
    per_domain: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Labelled observations of held-out classes and domains sharing ``world.mixing``.

    Stands in for a generic pretraining corpus: same observation model, but
    none of the dataset's classes, domains or styles.
    """
    mu = _unit_rows(rng.normal(size=(num_classes, p.dim)))
    offsets = _unit_rows(rng.normal(size=(num_domains, p.dim)))
    styles = rng.normal(size=(num_classes, num_domains, p.dim))
    biases = p.alpha * p.input_shift * rng.normal(size=(num_domains, p.input_dim)) / math.sqrt(p.input_dim)
    share, fresh = math.sqrt(p.style_share), math.sqrt(1.0 - p.style_share)
    xs, ys = [], []
    for dom in range(num_domains):
        y = rng.integers(0, num_classes, size=per_domain)
        eps = p.noise_scale * (share * styles[y, dom] + fresh * rng.normal(size=(per_domain, p.dim)))
        z = _unit_rows(mu[y] + p.alpha * offsets[dom] + p.sigma * eps)
        eta = rng.normal(size=(per_domain, p.input_dim))
        xs.append(z @ world.mixing.T + biases[dom] + p.obs_noise * eta)
        ys.append(y)
    return np.concatenate(xs), np.concatenate(ys).astype(np.int64)
