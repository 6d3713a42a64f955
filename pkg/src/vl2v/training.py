"""Trainers: the Align/Distill/Predict pipeline, self-distillation, KD and ERM
baselines, tail weight averaging and the ablation variants.

Every trainer owns its student exclusively and never writes to the teacher.
Randomness comes from named streams of a single seed, so two runs with equal
seed and configuration produce bit-identical parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from . import numerics as nx
from .data import DomainDataset, Split, pretext_samples
from .errors import ConfigError, StateError, UnsupportedModeError
from .models import (
    AffineEncoder,
    CosineHead,
    LinearHead,
    StudentModel,
    ZeroShotHead,
    build_zero_shot_head,
    predict,
)
from .numerics import Adam, Tensor
from .seeding import stream

log = logging.getLogger(__name__)

PARTS = ("backbone", "projection")
ABLATION_IDS = tuple(f"A{i}" for i in range(1, 9))
METHODS = ("adip", "sd", "kd", "erm-lp", "erm-fft")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SwadConfig:
    enabled: bool = True
    start_fraction: float = 0.5
    stride: int = 10
    include_align: bool = False


@dataclass(frozen=True)
class StudentConfig:
    hidden_dim: int = 32
    feature_dim: int = 16
    projection_bias: bool = True


@dataclass(frozen=True)
class PretrainConfig:
    """Backbone pre-fitting on held-out classes before any distillation."""

    enabled: bool = True
    classes: int = 50
    domains: int = 32
    per_domain: int = 100
    iterations: int = 1500
    lr: float = 1e-2
    batch_size: int = 64


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 2000
    align_iterations: int | None = None
    distill_iterations: int | None = None
    finetune_iterations: int | None = None
    lr: float = 5e-4
    batch_size: int = 32
    adip_lambda: float = 0.5
    lambda_kd: float = 1.0
    tau: float = 1.0
    finetune_tau: float = 0.1
    stratified: bool = False
    val_fraction: float = 0.2
    swad: SwadConfig = field(default_factory=SwadConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def stage_iterations(self, stage: str) -> int:
        explicit = {
            "align": self.align_iterations,
            "distill": self.distill_iterations,
            "finetune": self.finetune_iterations,
        }.get(stage)
        if explicit is not None:
            return explicit
        if stage == "joint":
            return self.stage_iterations("align") + self.stage_iterations("distill")
        if stage == "baseline":
            return self.total_iterations
        return max(1, self.total_iterations // 2)

    def validate(self) -> None:
        if self.total_iterations < 1:
            raise ConfigError("must be positive", "total_iterations")
        if self.lr < 0:
            raise ConfigError("must be non-negative", "lr")
        if self.batch_size < 1:
            raise ConfigError("must be positive", "batch_size")
        if not 0.0 <= self.adip_lambda <= 1.0:
            raise ConfigError("must lie in [0, 1]", "adip_lambda")
        if self.lambda_kd < 0:
            raise ConfigError("must be non-negative", "lambda_kd")
        if self.tau <= 0:
            raise ConfigError("must be positive", "tau")
        if self.finetune_tau <= 0:
            raise ConfigError("must be positive", "finetune_tau")
        if not 0.0 <= self.swad.start_fraction < 1.0:
            raise ConfigError("must lie in [0, 1)", "swad.start_fraction")
        if self.swad.stride < 1:
            raise ConfigError("must be positive", "swad.stride")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "adip"  # adip | adip_weighted | sd | kd | ce
    lam: float = 0.5
    lambda_kd: float = 1.0
    tau: float = 1.0


@dataclass(frozen=True)
class StageConfig:
    stage: str
    iterations: int
    lr: float
    trainable: frozenset = frozenset()
    loss: LossSpec = field(default_factory=LossSpec)
    batch_size: int = 32
    stratified: bool = False

    def __post_init__(self):
        if self.stage not in ("align", "distill", "joint", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if not set(self.trainable) <= {"backbone", "projection", "head"}:
            raise ConfigError(f"unknown trainable parts {sorted(self.trainable)}")

    @classmethod
    def default(cls, stage: str, cfg: TrainConfig, **kw) -> StageConfig:
        trainable = {
            "align": {"projection"},
            "distill": {"backbone"},
            "joint": {"backbone", "projection"},
            "finetune": {"head"},
        }[stage]
        base = dict(
            stage=stage,
            iterations=cfg.stage_iterations(stage),
            lr=cfg.lr,
            trainable=frozenset(trainable),
            loss=LossSpec("adip_weighted", lam=cfg.adip_lambda, tau=cfg.tau),
            batch_size=cfg.batch_size,
            stratified=cfg.stratified,
        )
        base.update(kw)
        base["trainable"] = frozenset(base["trainable"])
        return cls(**base)


@dataclass(frozen=True)
class AblationSpec:
    id: str
    description: str
    overrides: dict


ABLATIONS = {
    "A1": AblationSpec("A1", "Align and Distill merged into one joint stage", {"joint": True}),
    "A2": AblationSpec("A2", "projection head left trainable in Distill", {"distill_trainable": ("backbone", "projection")}),
    "A3": AblationSpec("A3", "distil from text embeddings only", {"adip_lambda": 0.0}),
    "A4": AblationSpec("A4", "distil from image embeddings only", {"adip_lambda": 1.0}),
    "A5": AblationSpec("A5", "Stage-3 CE fine-tune of classifier head, text-embedding init", {"finetune": ("head", "text")}),
    "A6": AblationSpec("A6", "Stage-3 CE fine-tune of full network, text-embedding init", {"finetune": ("full", "text")}),
    "A7": AblationSpec("A7", "Stage-3 CE fine-tune of classifier head, random init", {"finetune": ("head", "random")}),
    "A8": AblationSpec("A8", "Stage-3 CE fine-tune of full network, random init", {"finetune": ("full", "random")}),
}


def ablation_lambda(ablation_id: str, cfg: TrainConfig) -> float:
    return ABLATIONS[ablation_id].overrides.get("adip_lambda", cfg.adip_lambda)


# ---------------------------------------------------------------------------
# weight averaging


@dataclass
class SwadState:
    """Snapshots collected from ``start_fraction * total`` on, every ``stride`` iterations."""

    total: int
    stride: int = 10
    start_fraction: float = 0.5
    window: list = field(default_factory=list)


def swad_update(swad: SwadState, params: dict[str, np.ndarray], iteration: int) -> SwadState:
    if iteration < 0:
        raise ConfigError(f"iteration must be non-negative, got {iteration}")
    if iteration >= swad.start_fraction * swad.total and iteration % swad.stride == 0:
        swad.window.append({k: np.array(v) for k, v in params.items()})
    return swad


def swad_finalize(swad: SwadState) -> dict[str, np.ndarray]:
    """Coordinate-wise mean of the window.

    The running-mean form keeps a window of identical snapshots bit-exact.
    """
    if not swad.window:
        raise StateError("weight averaging window is empty")
    mean = {k: np.array(v) for k, v in swad.window[0].items()}
    for count, snap in enumerate(swad.window[1:], start=2):
        for k in mean:
            mean[k] = mean[k] + (snap[k] - mean[k]) / count
    return mean


# ---------------------------------------------------------------------------
# fold data and shared loop


@dataclass
class FoldData:
    ds: DomainDataset
    split: Split

    def __post_init__(self):
        if not len(self.split.train):
            raise ConfigError("empty training data")
        if np.any(self.ds.d[self.split.train] == self.split.test_domain):
            raise StateError("test-domain samples leaked into the training split")

    @property
    def train(self):
        return self.ds.subset(self.split.train)


class _BatchSampler:
    def __init__(self, rng: np.random.Generator, domains: np.ndarray, batch_size: int, stratified: bool):
        self.rng = rng
        self.n = len(domains)
        self.size = min(batch_size, self.n)
        self.groups = [np.flatnonzero(domains == d) for d in np.unique(domains)] if stratified else None

    def __call__(self) -> np.ndarray:
        if self.groups is None:
            return self.rng.choice(self.n, size=self.size, replace=False)
        per = max(1, self.size // len(self.groups))
        return np.concatenate([self.rng.choice(g, size=min(per, len(g)), replace=False) for g in self.groups])


def _optimize(
    params: dict[str, Tensor],
    loss_fn: Callable[[np.ndarray], Tensor],
    sampler: _BatchSampler,
    iterations: int,
    lr: float,
    swad: SwadState | None = None,
) -> list[float]:
    opt = Adam(list(params.values()), lr)
    trace = []
    for it in range(iterations):
        batch = sampler()
        opt.zero_grad()
        loss = loss_fn(batch)
        nx.backward(loss)
        opt.step()
        trace.append(loss.item())
        if swad is not None:
            swad_update(swad, {k: t.data for k, t in params.items()}, it)
    opt.zero_grad()
    if swad is not None and swad.window:
        for k, arr in swad_finalize(swad).items():
            arr.flags.writeable = False
            params[k].data = arr
    return trace


def _new_swad(cfg: TrainConfig, iterations: int, stage: str) -> SwadState | None:
    if not cfg.swad.enabled or (stage == "align" and not cfg.swad.include_align):
        return None
    return SwadState(total=iterations, stride=cfg.swad.stride, start_fraction=cfg.swad.start_fraction)


def _hashes(student: StudentModel) -> dict[str, str]:
    return {part: student.part_hash(part) for part in PARTS}


def _check_frozen(before: dict[str, str], after: dict[str, str], trainable) -> None:
    for part in PARTS:
        if part not in trainable and before[part] != after[part]:
            raise StateError(f"{part} changed during a stage that froze it")


def _apply_trainable(student: StudentModel, trainable) -> None:
    student.set_frozen(backbone="backbone" not in trainable, projection="projection" not in trainable)


def _stage_loss(spec: LossSpec):
    if spec.kind in ("adip", "sd"):
        return losses.adip_loss
    if spec.kind == "adip_weighted":
        return lambda s, i, t: losses.adip_loss_weighted(s, i, t, spec.lam)
    raise ConfigError(f"loss {spec.kind!r} is not an embedding-alignment loss")


@dataclass
class StageResult:
    student: StudentModel
    trace: list[float]
    hashes_before: dict[str, str]
    hashes_after: dict[str, str]


def _run_embedding_stage(
    student: StudentModel,
    teacher,
    data: FoldData,
    cfg: StageConfig,
    rng: np.random.Generator,
    swad: SwadState | None,
) -> StageResult:
    train = data.train
    head = build_zero_shot_head(teacher, data.ds.classes)
    img = teacher.image_embed(train)
    txt = head.class_embeddings[train.y]
    x = train.x
    loss = _stage_loss(cfg.loss)
    _apply_trainable(student, cfg.trainable)
    params = {k: t for k, t in student.named_parameters().items() if t.requires_grad}
    before = _hashes(student)

    def loss_fn(batch):
        return loss(student.projected(x[batch]), img[batch], txt[batch])

    sampler = _BatchSampler(rng, train.d, cfg.batch_size, cfg.stratified)
    trace = _optimize(params, loss_fn, sampler, cfg.iterations, cfg.lr, swad)
    after = _hashes(student)
    _check_frozen(before, after, cfg.trainable)
    return StageResult(student, trace, before, after)


def run_align_stage(student, teacher, data: FoldData, cfg: StageConfig, rng, swad: SwadState | None = None) -> StageResult:
    """Stage 1: fit only the projection head on the alignment loss."""
    if cfg.stage != "align":
        raise ConfigError(f"expected an align stage config, got {cfg.stage!r}")
    return _run_embedding_stage(student, teacher, data, cfg, rng, swad)


def run_distill_stage(student, teacher, data: FoldData, cfg: StageConfig, rng, swad: SwadState | None = None) -> StageResult:
    """Stage 2: fit the backbone through the frozen projection on the same loss."""
    if cfg.stage != "distill":
        raise ConfigError(f"expected a distill stage config, got {cfg.stage!r}")
    return _run_embedding_stage(student, teacher, data, cfg, rng, swad)


def run_joint_stage(student, teacher, data: FoldData, cfg: StageConfig, rng, swad: SwadState | None = None) -> StageResult:
    if cfg.stage != "joint":
        raise ConfigError(f"expected a joint stage config, got {cfg.stage!r}")
    return _run_embedding_stage(student, teacher, data, cfg, rng, swad)


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ConfigError("empty evaluation set")
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


def run_predict_eval(student: StudentModel, teacher, eval_samples, classes) -> float:
    """Stage 3: zero-shot accuracy of projected student features against photo-prompt text embeddings."""
    if len(eval_samples) == 0:
        raise ConfigError("empty evaluation set")
    head = build_zero_shot_head(teacher, classes)
    return accuracy(predict(head, student.projected(eval_samples.x).data), eval_samples.y)


# ---------------------------------------------------------------------------
# method results


@dataclass
class MethodResult:
    """A trained model plus how to classify with it."""

    model: object
    classify: Callable[[np.ndarray], np.ndarray]
    traces: dict[str, list[float]] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def accuracy(self, samples) -> float:
        return accuracy(self.classify(samples.x), samples.y)


def _zero_shot_classifier(student: StudentModel, head: ZeroShotHead):
    return lambda x: predict(head, student.projected(x).data)


def run_adip(
    student: StudentModel,
    teacher,
    data: FoldData,
    cfg: TrainConfig,
    seed: int,
    fold: int = 0,
    ablation: str | None = None,
) -> MethodResult:
    """Align, Distill, Predict; ``ablation`` selects one of the A1-A8 variants."""
    over = ABLATIONS[ablation].overrides if ablation else {}
    if ablation and ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}")
    lam = over.get("adip_lambda", cfg.adip_lambda)
    loss = LossSpec("adip_weighted", lam=lam, tau=cfg.tau)
    traces: dict[str, list[float]] = {}
    info: dict = {"hashes": {}}
    head = build_zero_shot_head(teacher, data.ds.classes)
    if over.get("joint"):
        st = StageConfig.default("joint", cfg, loss=loss)
        res = run_joint_stage(
            student, teacher, data, st, stream(seed, "fold", fold, "joint"), _new_swad(cfg, st.iterations, "joint")
        )
        traces["joint"] = res.trace
        info["hashes"]["joint"] = (res.hashes_before, res.hashes_after)
    else:
        st = StageConfig.default("align", cfg, loss=loss)
        res = run_align_stage(
            student, teacher, data, st, stream(seed, "fold", fold, "align"), _new_swad(cfg, st.iterations, "align")
        )
        traces["align"] = res.trace
        info["hashes"]["align"] = (res.hashes_before, res.hashes_after)
        st = StageConfig.default("distill", cfg, loss=loss, trainable=over.get("distill_trainable", ("backbone",)))
        res = run_distill_stage(
            student, teacher, data, st, stream(seed, "fold", fold, "distill"), _new_swad(cfg, st.iterations, "distill")
        )
        traces["distill"] = res.trace
        info["hashes"]["distill"] = (res.hashes_before, res.hashes_after)
    student.set_frozen(backbone=True, projection=True)
    if "finetune" in over:
        scope, init = over["finetune"]
        return _run_finetune(student, head, data, cfg, seed, fold, scope, init, traces, info)
    return MethodResult(student, _zero_shot_classifier(student, head), traces, info)


def _run_finetune(student, head, data, cfg, seed, fold, scope, init, traces, info) -> MethodResult:
    """Stage-3 cross-entropy fine-tuning of a cosine classifier over projected features."""
    if init == "text":
        rows = np.array(head.class_embeddings)
    else:
        # unit rows, like the text init: the cosine head turns large rows slowly
        rows = stream(seed, "fold", fold, "finetune_head").normal(size=head.class_embeddings.shape)
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    clf = CosineHead(rows)
    trainable = {"head"} if scope == "head" else {"head", "backbone", "projection"}
    _apply_trainable(student, trainable)
    params = dict(clf.named_parameters())
    params.update({k: t for k, t in student.named_parameters().items() if t.requires_grad})
    train = data.train
    x, y = train.x, train.y
    iters = cfg.stage_iterations("finetune")
    before = _hashes(student)

    def loss_fn(batch):
        return losses.cross_entropy_loss(clf.logits(student.projected(x[batch])), y[batch], cfg.finetune_tau)

    sampler = _BatchSampler(stream(seed, "fold", fold, "finetune"), train.d, cfg.batch_size, cfg.stratified)
    traces["finetune"] = _optimize(params, loss_fn, sampler, iters, cfg.lr, _new_swad(cfg, iters, "finetune"))
    after = _hashes(student)
    _check_frozen(before, after, trainable)
    info["hashes"]["finetune"] = (before, after)
    student.set_frozen(backbone=True, projection=True)
    clf.weight.requires_grad = False
    return MethodResult(student, lambda xs: clf.predict(student.projected(xs)), traces, info)


def run_ablation(spec: AblationSpec | str, cfg: TrainConfig, data: FoldData, teacher, student: StudentModel, seed: int, fold: int = 0) -> MethodResult:
    ablation_id = spec.id if isinstance(spec, AblationSpec) else spec
    if ablation_id not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation_id!r}; expected one of {', '.join(ABLATIONS)}")
    return run_adip(student, teacher, data, cfg, seed, fold, ablation=ablation_id)


def _run_classifier(
    student: StudentModel,
    data: FoldData,
    cfg: TrainConfig,
    seed: int,
    fold: int,
    train_backbone: bool,
    loss_fn_factory,
) -> MethodResult:
    train = data.train
    clf = LinearHead.create(stream(seed, "fold", fold, "head"), student.feature_dim, data.ds.num_classes)
    student.set_frozen(backbone=not train_backbone, projection=True)
    params = dict(clf.named_parameters())
    params.update({k: t for k, t in student.named_parameters("backbone").items() if t.requires_grad})
    iters = cfg.stage_iterations("baseline")
    before = _hashes(student)
    loss_fn = loss_fn_factory(clf, train)
    sampler = _BatchSampler(stream(seed, "fold", fold, "baseline"), train.d, cfg.batch_size, cfg.stratified)
    trace = _optimize(params, loss_fn, sampler, iters, cfg.lr, _new_swad(cfg, iters, "baseline"))
    after = _hashes(student)
    _check_frozen(before, after, {"backbone"} if train_backbone else set())
    student.set_frozen(backbone=True, projection=True)
    clf.weight.requires_grad = clf.bias.requires_grad = False
    return MethodResult(
        {"student": student, "head": clf},
        lambda xs: clf.predict(student.features(xs)),
        {"train": trace},
        {"hashes": {"train": (before, after)}},
    )


def run_erm(student: StudentModel, data: FoldData, cfg: TrainConfig, mode: str, seed: int, fold: int = 0) -> MethodResult:
    """Cross-entropy training of a linear head (``lp``) or of head and backbone (``fft``)."""
    if mode not in ("lp", "fft"):
        raise ConfigError(f"ERM mode must be 'lp' or 'fft', got {mode!r}")

    def factory(clf, train):
        def loss_fn(batch):
            return losses.cross_entropy_loss(clf.logits(student.features(train.x[batch])), train.y[batch])

        return loss_fn

    return _run_classifier(student, data, cfg, seed, fold, mode == "fft", factory)


def run_kd_baseline(student: StudentModel, teacher, data: FoldData, cfg: TrainConfig, seed: int, fold: int = 0) -> MethodResult:
    """Full fine-tuning on CE plus KL to the teacher's zero-shot distribution."""

    def factory(clf, train):
        head = build_zero_shot_head(teacher, data.ds.classes)
        target = losses.teacher_softmax(teacher.image_embed(train), head, cfg.tau) if cfg.lambda_kd else None

        def loss_fn(batch):
            logits = clf.logits(student.features(train.x[batch]))
            t = None if target is None else target[batch]
            return losses.kd_loss(logits, train.y[batch], t, cfg.lambda_kd, cfg.tau)

        return loss_fn

    return _run_classifier(student, data, cfg, seed, fold, True, factory)


def run_vl2v_sd(teacher, data: FoldData, cfg: TrainConfig, seed: int, fold: int = 0) -> MethodResult:
    """White-box self-distillation: fine-tune a copy of the teacher's image encoder."""
    if getattr(teacher, "backend", None) != "synthetic":
        raise UnsupportedModeError("self-distillation needs a white-box (synthetic) teacher")
    weight, bias = teacher.image_map()
    encoder = AffineEncoder(weight, bias)
    original = AffineEncoder(weight, bias)
    train = data.train
    head = build_zero_shot_head(teacher, data.ds.classes)
    img = original.embed(Tensor(train.x)).data  # constant: frozen teacher encoder
    txt = head.class_embeddings[train.y]
    iters = cfg.stage_iterations("baseline")

    def loss_fn(batch):
        return losses.sd_loss(encoder.embed(train.x[batch]), img[batch], txt[batch])

    sampler = _BatchSampler(stream(seed, "fold", fold, "sd"), train.d, cfg.batch_size, cfg.stratified)
    trace = _optimize(encoder.named_parameters(), loss_fn, sampler, iters, cfg.lr, _new_swad(cfg, iters, "sd"))
    for t in encoder.trainable_parameters():
        t.requires_grad = False
    return MethodResult(
        encoder,
        lambda xs: predict(head, encoder.embed(xs).data),
        {"train": trace},
        {"teacher_encoder": original},
    )


# ---------------------------------------------------------------------------
# student initialisation


def init_student(ds: DomainDataset, cfg: TrainConfig, seed: int, embed_dim: int) -> StudentModel:
    """Student with a backbone pre-fitted on a held-out pretext task, projection at random."""
    sc = cfg.student
    student = StudentModel.create(
        stream(seed, "student_init"),
        input_dim=ds.x.shape[1],
        hidden_dim=sc.hidden_dim,
        feature_dim=sc.feature_dim,
        embed_dim=embed_dim,
        projection_bias=sc.projection_bias,
    )
    pc = cfg.pretrain
    if not pc.enabled:
        return student
    if ds.world is None or ds.params is None:
        log.warning("dataset has no generator; student backbone starts from random weights")
        return student
    rng = stream(seed, "pretext")
    x, y = pretext_samples(ds.world, ds.params, rng, pc.classes, pc.domains, pc.per_domain)
    clf = LinearHead.create(rng, student.feature_dim, pc.classes)
    student.set_frozen(backbone=False, projection=True)
    params = dict(clf.named_parameters())
    params.update(student.named_parameters("backbone"))

    def loss_fn(batch):
        return losses.cross_entropy_loss(clf.logits(student.features(x[batch])), y[batch])

    sampler = _BatchSampler(rng, np.zeros(len(y)), pc.batch_size, False)
    _optimize(params, loss_fn, sampler, pc.iterations, pc.lr)
    student.set_frozen(backbone=False, projection=False)
    return student


# ---------------------------------------------------------------------------
# dispatch


def method_names() -> list[str]:
    return list(METHODS) + [f"ablation:{a}" for a in ABLATION_IDS]


def run_method(method: str, student: StudentModel | None, teacher, data: FoldData, cfg: TrainConfig, seed: int, fold: int) -> MethodResult:
    if method == "adip":
        return run_adip(student, teacher, data, cfg, seed, fold)
    if method == "sd":
        return run_vl2v_sd(teacher, data, cfg, seed, fold)
    if method == "kd":
        return run_kd_baseline(student, teacher, data, cfg, seed, fold)
    if method in ("erm-lp", "erm-fft"):
        return run_erm(student, data, cfg, method.split("-")[1], seed, fold)
    if method.startswith("ablation:"):
        return run_ablation(method.split(":", 1)[1], cfg, data, teacher, student, seed, fold)
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(method_names())}")


def needs_student(method: str) -> bool:
    return method != "sd"


# ---------------------------------------------------------------------------
# checkpoints: meta.json + one little-endian f64 blob per parameter

CHECKPOINT_FORMAT = "vl2v-checkpoint/1"


def save_checkpoint(params: dict[str, np.ndarray], directory, meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {k: list(np.shape(v)) for k, v in params.items()}
    doc = {"format": CHECKPOINT_FORMAT, "parameters": shapes, "meta": meta or {}}
    (directory / "meta.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for k, v in params.items():
        np.asarray(v, dtype="<f8").tofile(directory / f"{k}.bin")
    return directory


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    doc = json.loads((directory / "meta.json").read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {doc.get('format')!r}")
    params = {}
    for k, shape in doc["parameters"].items():
        arr = np.fromfile(directory / f"{k}.bin", dtype="<f8").astype(np.float64)
        params[k] = arr.reshape(shape)
    return params, doc["meta"]


def model_parameters(result: MethodResult) -> dict[str, np.ndarray]:
    model = result.model
    if isinstance(model, dict):
        out = model["student"].state_dict()
        out.update({k: np.array(t.data) for k, t in model["head"].named_parameters().items()})
        return out
    return model.state_dict()


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
