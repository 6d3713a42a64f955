"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line verdict through the ``acceptance_log`` fixture; the
lines are repeated in the terminal summary. Thresholds are the contract values
and are never relaxed here.
"""

import time
import warnings

import numpy as np
import pytest
import yaml

from vl2v import losses
from vl2v import numerics as nx
from vl2v.cli import main
from vl2v.data import SplitSpec, gen_synthetic_domains, split_domainbed
from vl2v.harness import PROBE_MODES, leave_one_domain_out, probe_lodo, probe_split
from vl2v.models import StudentModel, SyntheticTeacher, ZeroShotHead
from vl2v.numerics import Tensor, finite_diff_check
from vl2v.seeding import stream
from vl2v.training import SwadState, TrainConfig, swad_finalize, swad_update

from oracles import TableTeacher, brute_probe

SEEDS = (0, 1, 2, 3, 4)
SHARED_METHODS = ("adip", "kd", "erm-fft", "ablation:A1", "ablation:A6", "ablation:A8")
SHIFTED = dict(num_classes=5, num_domains=4, per_domain_count=100, alpha=0.8, sigma=0.2, dim=16, input_dim=32)


def shifted(seed):
    ds = gen_synthetic_domains(seed=seed, **SHIFTED)
    return ds, SyntheticTeacher.from_dataset(ds)


def _unit(rng, n, d):
    a = rng.normal(size=(n, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


class _Runs:
    """Lazily computed leave-one-domain-out reports, shared by criteria 3 and 6-8."""

    def __init__(self):
        self.cfg = TrainConfig()
        self.reports = {}
        self.seconds = {}
        self.teacher_hashes = []

    def get(self, method, seed):
        key = (method, seed)
        if key not in self.reports:
            ds, teacher = shifted(seed)
            before = teacher.state_hash()
            t0 = time.perf_counter()
            self.reports[key] = leave_one_domain_out(ds, self.cfg, teacher, seed=seed, method=method)
            self.seconds[key] = time.perf_counter() - t0
            self.teacher_hashes.append((method, seed, before, teacher.state_hash()))
        return self.reports[key]

    def ood(self, method):
        return np.array([self.get(method, s).avg_ood for s in SEEDS])

    def id(self, method):
        return np.array([self.get(method, s).avg_id for s in SEEDS])


@pytest.fixture(scope="module")
def runs():
    return _Runs()


# --- 1. gradients -------------------------------------------------------------------------


def _loss_cases(rng):
    """Yield (name, f, point) for every loss at one random configuration."""
    n, d, C = int(rng.integers(2, 5)), int(rng.integers(3, 6)), int(rng.integers(2, 5))
    cand = _unit(rng, C, d)
    y = rng.integers(0, C, size=n)
    yield "clip", lambda x: losses.clip_loss(x, cand[y], cand), rng.normal(size=(n, d))

    # teacher softmax composed into a cross-entropy, differentiated w.r.t. image embeddings
    tau = float(rng.uniform(0.5, 2.0))

    def softmax_ce(x):
        logits = nx.matmul(nx.l2_normalize(x), Tensor(cand.T))
        return nx.mean(nx.cross_entropy(nx.softmax(logits, tau), y))

    yield "teacher-softmax", softmax_ce, rng.normal(size=(n, d))

    f_t = losses.teacher_softmax(_unit(rng, n, d), ZeroShotHead(cand), tau)
    lam = float(rng.uniform(0.0, 2.0))
    yield "kd", lambda x: losses.kd_loss(x, y, f_t, lam, tau), rng.normal(size=(n, C))

    img, txt = _unit(rng, n, d), cand[y]
    xs = rng.normal(size=(n, d + 1))
    bias = rng.normal(size=d)

    def sd_through_encoder(w):
        # same computation as the affine image encoder, with the weight as the variable
        return losses.sd_loss(nx.l2_normalize(nx.matmul(Tensor(xs), w) + Tensor(bias)), img, txt)

    yield "sd", sd_through_encoder, rng.normal(size=(d + 1, d))

    feats = rng.normal(size=(n, d + 2))
    pbias = rng.normal(size=d)

    def adip_through_projection(w):
        emb = nx.add(nx.matmul(Tensor(feats), w), Tensor(pbias))
        return losses.adip_loss(emb, img, txt)

    yield "adip", adip_through_projection, rng.normal(size=(d + 2, d))
    lam_w = float(rng.uniform(0.0, 1.0))
    yield "weighted", lambda x: losses.adip_loss_weighted(x, img, txt, lam_w), rng.normal(size=(n, d))


def test_criterion_01_gradients(acceptance_log):
    t0 = time.perf_counter()
    worst = {}
    for cfg_seed in range(5):
        for name, f, point in _loss_cases(stream(cfg_seed, "gradcheck")):
            rep = finite_diff_check(f, point)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    elapsed = time.perf_counter() - t0
    passed = max(worst.values()) < 1e-4 and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    acceptance_log(1, passed, f"max rel err {detail}; {elapsed:.1f}s")
    assert passed


# --- 2-3. freezing and the black-box contract -------------------------------------------------


def test_criterion_02_freeze_discipline(runs, acceptance_log):
    from vl2v.training import FoldData, run_ablation, run_adip

    ds, teacher = shifted(0)
    data = FoldData(ds, split_domainbed(ds, SplitSpec(0)))
    cfg = runs.cfg
    student = lambda: StudentModel.create(stream(0, "acc"), input_dim=ds.x.shape[1], hidden_dim=32, feature_dim=16, embed_dim=teacher.dimension)
    h = run_adip(student(), teacher, data, cfg, seed=0).info["hashes"]
    align_ok = h["align"][0]["backbone"] == h["align"][1]["backbone"]
    distill_ok = h["distill"][0]["projection"] == h["distill"][1]["projection"]
    h2 = run_ablation("A2", cfg, data, teacher, student(), seed=0).info["hashes"]
    a2_moves = h2["distill"][0]["projection"] != h2["distill"][1]["projection"]
    passed = align_ok and distill_ok and a2_moves
    acceptance_log(2, passed, f"align backbone frozen={align_ok}, distill projection frozen={distill_ok}, A2 moves projection={a2_moves}")
    assert passed


def test_criterion_03_black_box(runs, acceptance_log):
    ds, teacher = shifted(0)
    cfg = TrainConfig(total_iterations=40)
    from vl2v.training import method_names

    records = []
    for method in method_names():
        before = teacher.state_hash()
        leave_one_domain_out(ds, cfg, teacher, seed=0, method=method)
        records.append((method, before == teacher.state_hash()))
    for method in SHARED_METHODS:
        runs.ood(method)
    records += [(f"{m}@{s}", a == b) for m, s, a, b in runs.teacher_hashes]
    bad = [m for m, ok in records if not ok]
    acceptance_log(3, not bad, f"{len(records)} method runs, teacher hash changed in {bad or 'none'}")
    assert not bad


# --- 4-5. probes ---------------------------------------------------------------------------------


def test_criterion_04_probe_oracle(acceptance_log):
    rng = stream(0, "probe-oracle")
    checked, mismatches = 0, []
    for i in range(24):
        C, n_dom = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        per_domain = C * int(rng.integers(3, 50 // (C * n_dom) + 1))
        ds = gen_synthetic_domains(C, n_dom, per_domain, alpha=0.8, sigma=0.4, dim=6, input_dim=8, seed=i)
        assert len(ds) <= 50
        teacher = SyntheticTeacher.from_dataset(ds) if i % 2 else TableTeacher(ds, rng, 6)
        split = split_domainbed(ds, SplitSpec(i % n_dom, 0.2, i))
        k = int(rng.integers(1, 7))
        for mode in PROBE_MODES:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if probe_split(ds, teacher, split, mode, k) != brute_probe(ds, teacher, split, mode, k):
                    mismatches.append((i, mode))
        checked += 1
    acceptance_log(4, not mismatches, f"{checked} instances x 6 modes, mismatches {mismatches or 'none'}")
    assert checked >= 20 and not mismatches


def test_criterion_05_probe_ordering(acceptance_log):
    t0 = time.perf_counter()
    acc = {m: [] for m in PROBE_MODES}
    for seed in SEEDS:
        ds, teacher = shifted(seed)
        for mode, res in probe_lodo(ds, teacher, seed=seed).items():
            acc[mode].append(res.average)
    mean = {m: float(np.mean(v)) for m, v in acc.items()}
    elapsed = time.perf_counter() - t0
    passed = mean["E6"] >= mean["E1"] >= mean["E3"] and mean["E1"] - mean["E3"] >= 0.05 and elapsed < 120
    detail = " ".join(f"{m}={v:.3f}" for m, v in mean.items())
    acceptance_log(5, passed, f"{detail}; E1-E3={mean['E1'] - mean['E3']:+.3f}; {elapsed:.1f}s")
    assert passed


# --- 6-8. method and ablation directions -----------------------------------------------------------


def test_criterion_06_method_ordering(runs, acceptance_log):
    adip, kd, fft = runs.ood("adip"), runs.ood("kd"), runs.ood("erm-fft")
    elapsed = sum(runs.seconds[(m, s)] for m in ("adip", "kd", "erm-fft") for s in SEEDS)
    gap_kd, gap_fft = adip.mean() - kd.mean(), adip.mean() - fft.mean()
    passed = gap_kd >= 0.02 and gap_fft >= 0.02 and elapsed < 600
    acceptance_log(
        6, passed,
        f"OOD adip={adip.mean():.3f} kd={kd.mean():.3f} erm-fft={fft.mean():.3f}; gaps {gap_kd:+.3f} {gap_fft:+.3f}; {elapsed:.0f}s",
    )
    assert passed


def test_criterion_07_staged_beats_joint(runs, acceptance_log):
    base, joint = runs.ood("adip"), runs.ood("ablation:A1")
    wins = int(np.sum(base >= joint))
    acceptance_log(7, wins >= 4, f"base OOD >= A1 OOD in {wins}/5 seeds (base {base.mean():.3f}, A1 {joint.mean():.3f})")
    assert wins >= 4


def test_criterion_08_finetune_tradeoff(runs, acceptance_log):
    base_id, base_ood = runs.id("adip"), runs.ood("adip")
    counts = {}
    for a in ("A6", "A8"):
        counts[f"{a} ID>=base"] = int(np.sum(runs.id(f"ablation:{a}") >= base_id))
        counts[f"base OOD>={a}"] = int(np.sum(base_ood >= runs.ood(f"ablation:{a}")))
    passed = all(c >= 4 for c in counts.values())
    acceptance_log(8, passed, ", ".join(f"{k} {v}/5" for k, v in counts.items()))
    assert passed


# --- 9-11. identities, determinism, no-shift sanity -------------------------------------------------


def test_criterion_09_swad_identities(acceptance_log):
    rng = stream(0, "swad")
    theta = rng.normal(size=(6, 4)) * 1e3
    sw = SwadState(total=9, stride=1, start_fraction=0.0)
    for it in range(9):
        swad_update(sw, {"w": theta}, it)
    exact = bool(np.array_equal(swad_finalize(sw)["w"], theta))
    start, step = rng.normal(size=20), rng.normal(size=20)
    n = 11
    sw = SwadState(total=n, stride=1, start_fraction=0.0)
    for it in range(n):
        swad_update(sw, {"w": start + it * step}, it)
    err = float(np.max(np.abs(swad_finalize(sw)["w"] - (start + (n - 1) / 2 * step))))
    passed = exact and err <= 1e-12
    acceptance_log(9, passed, f"identical snapshots bit-exact={exact}, arithmetic midpoint err {err:.1e}")
    assert passed


def test_criterion_10_determinism(tmp_path, acceptance_log):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"method": "adip", "train": {"total_iterations": 200}}))
    codes = [main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / r)]) for r in ("a", "b")]
    same = (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    passed = codes == [0, 0] and same
    acceptance_log(10, passed, f"exit codes {codes}, report.json byte-identical={same}")
    assert passed


def test_criterion_11_no_shift(acceptance_log):
    from vl2v.training import method_names

    ds = gen_synthetic_domains(**dict(SHIFTED, alpha=0.0, sigma=0.0), seed=0)
    teacher = SyntheticTeacher.from_dataset(ds)
    imperfect = [m for m, r in probe_lodo(ds, teacher).items() if r.per_domain != [1.0] * 4]
    cfg = TrainConfig()
    for method in method_names():
        report = leave_one_domain_out(ds, cfg, teacher, seed=0, method=method)
        if any(f.ood_acc != 1.0 for f in report.folds):
            imperfect.append(f"{method}={report.avg_ood:.3f}")
    acceptance_log(11, not imperfect, f"6 probe modes + {len(method_names())} methods, below 1.0: {imperfect or 'none'}")
    assert not imperfect
