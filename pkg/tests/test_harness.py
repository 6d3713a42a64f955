import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vl2v.data import DomainDataset, SplitSpec, gen_synthetic_domains, split_domainbed
from vl2v.errors import ConfigError
from vl2v.harness import (
    FoldResult,
    MethodResult,
    RunReport,
    aggregate_report,
    leave_one_domain_out,
    probe,
    probe_lodo,
    probe_split,
)
from vl2v.models import SyntheticTeacher
from vl2v.training import PretrainConfig, SwadConfig, TrainConfig

from oracles import TableTeacher, brute_probe

@settings(max_examples=25, deadline=None)
@given(
    st.integers(2, 3),
    st.integers(2, 3),
    st.integers(3, 5),
    st.integers(0, 10_000),
    st.integers(1, 6),
    st.sampled_from(["E1", "E2", "E3", "E4", "E5", "E6"]),
    st.booleans(),
)
def test_probe_matches_brute_force(C, n_dom, per_class, seed, k, mode, structured):
    per_domain = C * per_class
    ds = gen_synthetic_domains(C, n_dom, per_domain, alpha=0.8, sigma=0.4, dim=6, input_dim=8, seed=seed)
    assert len(ds) <= 50
    teacher = SyntheticTeacher.from_dataset(ds) if structured else TableTeacher(ds, np.random.default_rng(seed), 6)
    split = split_domainbed(ds, SplitSpec(seed % n_dom, 0.2, seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = probe_split(ds, teacher, split, mode, k)
    assert got == brute_probe(ds, teacher, split, mode, k)


def test_probe_hand_set_vectors():
    # 2 classes, 2 domains, 3 samples per class and domain; embeddings chosen by hand
    ds = gen_synthetic_domains(2, 2, 6, alpha=0.0, sigma=0.0, dim=2, input_dim=2, seed=0, min_angle_deg=0.0)
    teacher = TableTeacher(ds, np.random.default_rng(0), 2)
    angles = np.array([0.1, 1.4, 0.3, 1.2, 0.2, 1.0, 0.9, 0.5, 1.3, 0.7, 0.4, 1.5])
    teacher.img = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    teacher.txt[("photo", "class0", None)] = np.array([1.0, 0.0])
    teacher.txt[("photo", "class1", None)] = np.array([0.0, 1.0])
    split = split_domainbed(ds, SplitSpec(1))
    for mode in ("E1", "E3", "E4", "E5", "E6"):
        for k in (1, 2, 3):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert probe_split(ds, teacher, split, mode, k) == brute_probe(ds, teacher, split, mode, k)
    # E1 predicts class 0 below pi/4: domain 1 angles [0.9, 0.5, 1.3, 0.7, 0.4, 1.5]
    # give [1, 0, 1, 0, 0, 1] against labels [0, 1, 0, 1, 0, 1]
    assert probe_split(ds, teacher, split, "E1") == pytest.approx(2 / 6)


def test_probe_no_shift_is_perfect():
    ds = gen_synthetic_domains(5, 4, 60, alpha=0.0, sigma=0.0, dim=16, input_dim=32, seed=0)
    teacher = SyntheticTeacher.from_dataset(ds)
    for mode, res in probe_lodo(ds, teacher).items():
        assert res.per_domain == [1.0] * 4, mode


def test_e1_ignores_source_domains():
    ds = gen_synthetic_domains(4, 4, 40, alpha=0.8, sigma=0.2, dim=8, input_dim=12, seed=5)
    teacher = SyntheticTeacher.from_dataset(ds)
    keep = np.flatnonzero(ds.d < 2)
    fewer = DomainDataset(
        x=ds.x[keep], y=ds.y[keep], d=ds.d[keep], eps=ds.eps[keep], ids=ds.ids[keep],
        classes=ds.classes, domains=ds.domains, params=ds.params, world=ds.world,
    )
    full = probe(ds, teacher, SplitSpec(0), "E1").average
    assert probe(fewer, teacher, SplitSpec(0), "E1").average == full


def test_probe_k_clamped_with_warning():
    ds = gen_synthetic_domains(2, 2, 6, seed=0, dim=4, input_dim=6)
    teacher = SyntheticTeacher.from_dataset(ds)
    split = split_domainbed(ds, SplitSpec(0))
    with pytest.warns(UserWarning, match="k=50"):
        clamped = probe_split(ds, teacher, split, "E6", 50)
    assert clamped == probe_split(ds, teacher, split, "E6", 2)


def test_probe_rejects_bad_mode_and_k():
    ds = gen_synthetic_domains(2, 2, 6, seed=0, dim=4, input_dim=6)
    teacher = SyntheticTeacher.from_dataset(ds)
    with pytest.raises(ConfigError):
        probe(ds, teacher, SplitSpec(0), "E7")
    with pytest.raises(ConfigError):
        probe(ds, teacher, SplitSpec(0), "E5", k=0)


def test_probe_average_is_mean_of_domains():
    ds = gen_synthetic_domains(3, 3, 30, seed=1, dim=6, input_dim=8)
    res = probe(ds, SyntheticTeacher.from_dataset(ds), None, "E3")
    assert len(res.per_domain) == 3
    assert abs(res.average - np.mean(res.per_domain)) <= 1e-12


# --- leave-one-domain-out ---------------------------------------------------------------

FAST = TrainConfig(total_iterations=20, batch_size=16, swad=SwadConfig(enabled=False), pretrain=PretrainConfig(enabled=False))


@pytest.fixture(scope="module")
def four_domains():
    ds = gen_synthetic_domains(3, 4, 15, dim=6, input_dim=10, seed=0)
    return ds, SyntheticTeacher.from_dataset(ds)


def test_lodo_has_one_fold_per_domain(four_domains):
    ds, teacher = four_domains
    report = leave_one_domain_out(ds, FAST, teacher, seed=0, method="erm-lp")
    assert [f.test_domain for f in report.folds] == [0, 1, 2, 3]


def test_lodo_oracle_method_is_perfect(four_domains):
    ds, teacher = four_domains
    label_of = {x.tobytes(): y for x, y in zip(ds.x, ds.y)}

    def oracle(data, teacher_, seed, fold):
        return MethodResult(None, lambda xs: np.array([label_of[x.tobytes()] for x in xs]))

    report = leave_one_domain_out(ds, FAST, teacher, seed=0, method=oracle)
    assert all(f.ood_acc == 1.0 for f in report.folds)


def test_lodo_deterministic(four_domains):
    ds, teacher = four_domains
    a = leave_one_domain_out(ds, FAST, teacher, seed=2, method="adip")
    b = leave_one_domain_out(ds, FAST, teacher, seed=2, method="adip")
    assert a.to_json() == b.to_json()


def test_lodo_records_failures(four_domains):
    ds, teacher = four_domains

    def flaky(data, teacher_, seed, fold):
        if fold == 1:
            raise RuntimeError("boom")
        return MethodResult(None, lambda xs: np.zeros(len(xs), dtype=int))

    failures = []
    report = leave_one_domain_out(ds, FAST, teacher, method=flaky, failures=failures)
    assert [f.fold for f in failures] == [1] and "boom" in failures[0].error
    assert [f.test_domain for f in report.folds] == [0, 2, 3]


def test_lodo_parallel_matches_serial(four_domains):
    ds, teacher = four_domains
    a = leave_one_domain_out(ds, FAST, teacher, seed=1, method="erm-fft", jobs=1)
    b = leave_one_domain_out(ds, FAST, teacher, seed=1, method="erm-fft", jobs=2)
    assert a.to_json() == b.to_json()


# --- reports ----------------------------------------------------------------------------------


def test_aggregate_examples():
    assert aggregate_report([FoldResult(0, 0.4, 0.9)]).avg_ood == 0.4
    r = aggregate_report([FoldResult(0, 0.5, 1.0), FoldResult(1, 0.7, 0.8)])
    assert r.avg_ood == pytest.approx(0.6, abs=1e-12) and r.avg_id == pytest.approx(0.9, abs=1e-12)
    with pytest.raises(ConfigError):
        aggregate_report([])


def test_report_round_trip_and_consistency(four_domains):
    ds, teacher = four_domains
    report = leave_one_domain_out(ds, FAST, teacher, method="erm-lp", config_echo={"lr": 1.0})
    back = RunReport.from_json(report.to_json())
    assert back == report
    assert abs(back.avg_ood - np.mean([f.ood_acc for f in back.folds])) <= 1e-12
    lines = report.to_csv().strip().splitlines()
    assert len(lines) == 1 + 4 + 1 and lines[-1].split(",")[2] == "avg"
