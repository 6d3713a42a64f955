import csv
import json

import numpy as np
import pytest
import yaml

from vl2v.cli import main
from vl2v.config import ExperimentConfig, config_from_dict, config_to_dict, dump_config, load_config
from vl2v.data import load_dataset
from vl2v.errors import ConfigError
from vl2v.training import load_checkpoint

TINY = {
    "dataset": {"generator": {"num_classes": 3, "per_domain_count": 30, "dim": 8, "input_dim": 12}},
    "train": {"total_iterations": 20, "pretrain": {"iterations": 10, "per_domain": 20}},
}


def write_cfg(tmp_path, tree, name="c.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree))
    return path


# --- config -----------------------------------------------------------------------------


def test_config_round_trip_is_fixed_point():
    cfg = config_from_dict(TINY)
    again = config_from_dict(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    assert config_to_dict(again) == config_to_dict(cfg)


def test_defaults_parse():
    assert config_from_dict({}) == ExperimentConfig()


@pytest.mark.parametrize(
    "tree, path",
    [
        ({"trian": {}}, "trian"),
        ({"train": {"swad": {"strid": 3}}}, "train.swad.strid"),
        ({"train": {"lr": "fast"}}, "train.lr"),
        ({"train": {"adip_lambda": 1.5}}, "train.adip_lambda"),
        ({"seeds": [0, "x"]}, "seeds[1]"),
        ({"method": "ablation:A9"}, "method"),
    ],
)
def test_config_errors_name_the_field(tree, path):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(tree)
    assert exc.value.path == path


def test_load_config_reports_yaml_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [unclosed")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(bad)


# --- gen-data -------------------------------------------------------------------------------


def test_gen_data_default_and_deterministic(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b")]) == 0
    ds = load_dataset(tmp_path / "a" / "dataset")
    assert ds.num_domains == 4 and ds.num_classes == 5 and len(ds) == 400
    for name in ("meta.json", "samples.bin"):
        assert (tmp_path / "a" / "dataset" / name).read_bytes() == (tmp_path / "b" / "dataset" / name).read_bytes()
    assert "class4" in capsys.readouterr().out


def test_malformed_config_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"dataset": {"generator": {"alpah": 0.5}}})
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "dataset.generator.alpah" in capsys.readouterr().err


def test_missing_config_file_exit_code(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2


# --- train ------------------------------------------------------------------------------------


def test_train_single_seed_report(tmp_path):
    cfg = write_cfg(tmp_path, dict(TINY, method="erm-lp"))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    doc = json.loads((out / "report.json").read_text())
    assert len(doc["runs"]) == 1 and len(doc["runs"][0]["folds"]) == 4
    assert doc["summary"]["ood_std"] == 0.0
    seed_dir = out / "seed_0"
    assert {p.name for p in seed_dir.glob("trace_*.csv")} == {f"trace_{i}.csv" for i in range(4)}
    params, meta = load_checkpoint(seed_dir / "checkpoints" / "fold_2")
    assert meta["fold"] == 2 and "head.weight" in params


def test_train_multi_seed_mean_std(tmp_path):
    cfg = write_cfg(tmp_path, dict(TINY, method="erm-lp"))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "0,1,2"]) == 0
    doc = json.loads((out / "report.json").read_text())
    oods = [r["avg_ood"] for r in doc["runs"]]
    assert doc["summary"]["seeds"] == [0, 1, 2]
    assert doc["summary"]["ood_mean"] == pytest.approx(np.mean(oods), abs=1e-12)
    assert doc["summary"]["ood_std"] == pytest.approx(np.std(oods, ddof=1), abs=1e-12)
    rows = list(csv.reader((out / "report.csv").open()))
    assert [r[2] for r in rows[-2:]] == ["mean", "std"]


def test_train_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, dict(TINY, method="adip"))
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_train_partial_failure(tmp_path, capsys):
    # a file teacher cannot be self-distilled: every fold fails, nothing crashes
    main(["gen-data", "--out", str(tmp_path)])
    from vl2v.models import SyntheticTeacher, export_teacher

    ds = load_dataset(tmp_path / "dataset")
    export_teacher(SyntheticTeacher.from_dataset(ds), ds, tmp_path / "teacher")
    tree = dict(TINY, method="sd", dataset={"path": str(tmp_path / "dataset")}, teacher={"kind": "file", "path": str(tmp_path / "teacher")})
    cfg = write_cfg(tmp_path, tree)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 3
    doc = json.loads((tmp_path / "run" / "report.json").read_text())
    assert len(doc["failures"]) == 4 and "UnsupportedModeError" in doc["failures"][0]["error"]


# --- probe and ablate --------------------------------------------------------------------------


def test_probe_table(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "probe.csv").open()))
    assert [r["mode"] for r in rows] == ["E1", "E2", "E3", "E4", "E5", "E6"]
    for r in rows:
        folds = [float(r[f"domain{i}"]) for i in range(4)]
        assert float(r["average"]) == pytest.approx(np.mean(folds), abs=1e-12)


def test_probe_no_shift_all_perfect(tmp_path):
    tree = {"dataset": {"generator": {"alpha": 0.0, "sigma": 0.0, "per_domain_count": 60}}}
    cfg = write_cfg(tmp_path, tree)
    assert main(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    for r in csv.DictReader((tmp_path / "probe.csv").open()):
        assert all(float(r[f"domain{i}"]) == 1.0 for i in range(4))


def test_ablate_rows(tmp_path):
    cfg = write_cfg(tmp_path, dict(TINY, train=dict(TINY["train"], total_iterations=6)))
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path), "--seed", "0,1"]) == 0
    doc = json.loads((tmp_path / "ablation.json").read_text())
    rows = {r["variant"]: r for r in doc["rows"]}
    assert list(rows) == ["base"] + [f"A{i}" for i in range(1, 9)]
    assert rows["A3"]["lambda"] == 0.0 and rows["A4"]["lambda"] == 1.0
    assert all(r["seeds"] == [0, 1] for r in doc["rows"])


def test_ablate_needs_adip(tmp_path):
    cfg = write_cfg(tmp_path, dict(TINY, method="kd"))
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
