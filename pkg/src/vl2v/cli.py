"""Command-line entry point: ``vl2v {gen-data,train,probe,ablate}``.

Exit codes: 0 when every requested fold completed, 2 for configuration
errors, 3 when some folds failed (completed folds are still written), 1 for
any other error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_to_dict, load_config
from .data import generate, load_dataset, save_dataset
from .errors import ConfigError, VL2VError
from .harness import FoldFailure, RunReport, leave_one_domain_out, probe_lodo
from .models import FileTeacher, SyntheticTeacher
from .training import ABLATIONS, ablation_lambda

log = logging.getLogger("vl2v")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# resolution helpers


def resolve_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.dataset.path:
        return load_dataset(cfg.dataset.path)
    return generate(cfg.dataset.generator.params(seed))


def resolve_teacher(cfg: ExperimentConfig, ds):
    if cfg.teacher.kind == "file":
        return FileTeacher(cfg.teacher.path)
    return SyntheticTeacher.from_dataset(ds)


def _echo(cfg: ExperimentConfig) -> dict:
    # everything needed to replay the run; the output location is not part of it
    doc = config_to_dict(cfg)
    doc.pop("output")
    return doc


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def _write_traces(directory: Path, report: RunReport) -> None:
    for f in report.folds:
        rows = [(stage, i, repr(v)) for stage, trace in f.traces.items() for i, v in enumerate(trace)]
        _write_csv(directory / f"trace_{f.test_domain}.csv", ["stage", "iteration", "loss"], rows)


def _run_lodo(cfg: ExperimentConfig, method: str, seed: int, jobs: int, out: Path | None, failures: list) -> RunReport | None:
    ds = resolve_dataset(cfg, seed)
    teacher = resolve_teacher(cfg, ds)
    fold_failures: list[FoldFailure] = []
    ckpt = None if out is None else out / "checkpoints"
    try:
        report = leave_one_domain_out(
            ds, cfg.train, teacher, seed, method, jobs, _echo(cfg), failures=fold_failures, checkpoint_dir=ckpt
        )
    except ConfigError:
        if not fold_failures:
            raise
        report = None  # every fold failed
    for f in fold_failures:
        log.error("seed %d fold %d failed: %s", seed, f.fold, f.error)
        failures.append({"method": method, "seed": seed, "fold": f.fold, "error": f.error})
    return report


def _summary(reports: list[RunReport]) -> dict:
    ood_mean, ood_std = _mean_std([r.avg_ood for r in reports])
    id_mean, id_std = _mean_std([r.avg_id for r in reports])
    return {"ood_mean": ood_mean, "ood_std": ood_std, "id_mean": id_mean, "id_std": id_std, "seeds": [r.seed for r in reports]}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.dataset.path:
        raise ConfigError("gen-data needs a generator block, not a dataset path", "dataset.path")
    for seed in cfg.seeds:
        ds = generate(cfg.dataset.generator.params(seed))
        target = out / "dataset" if len(cfg.seeds) == 1 else out / f"dataset_seed{seed}"
        save_dataset(ds, target)
        counts = ds.counts()
        print(f"wrote {len(ds)} samples to {target}")
        print("class     " + " ".join(f"{d:>9s}" for d in ds.domains))
        for c, name in enumerate(ds.classes):
            print(f"{name:9s} " + " ".join(f"{n:9d}" for n in counts[c]))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    reports, failures = [], []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        report = _run_lodo(cfg, cfg.method, seed, jobs, seed_dir, failures)
        if report is None:
            continue
        reports.append(report)
        (seed_dir / "report.json").write_text(report.to_json() + "\n")
        (seed_dir / "report.csv").write_text(report.to_csv())
        _write_traces(seed_dir, report)
    doc = {
        "method": cfg.method,
        "config": _echo(cfg),
        "runs": [{k: v for k, v in r.to_dict().items() if k not in ("config",)} for r in reports],
        "summary": _summary(reports) if reports else None,
        "failures": failures,
    }
    for run in doc["runs"]:
        for f in run["folds"]:
            f.pop("traces")  # kept in trace_<fold>.csv
    _write_json(out / "report.json", doc)
    rows = []
    for r in reports:
        rows += [[r.method, r.seed, f.test_domain, repr(f.ood_acc), repr(f.id_acc)] for f in r.folds]
        rows.append([r.method, r.seed, "avg", repr(r.avg_ood), repr(r.avg_id)])
    if reports:
        s = doc["summary"]
        rows.append([cfg.method, "all", "mean", repr(s["ood_mean"]), repr(s["id_mean"])])
        rows.append([cfg.method, "all", "std", repr(s["ood_std"]), repr(s["id_std"])])
    _write_csv(out / "report.csv", ["method", "seed", "fold", "ood_acc", "id_acc"], rows)
    if reports:
        s = doc["summary"]
        print(f"{cfg.method}: OOD {100 * s['ood_mean']:.2f} ± {100 * s['ood_std']:.2f}  ID {100 * s['id_mean']:.2f} ± {100 * s['id_std']:.2f}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_probe(cfg: ExperimentConfig, out: Path) -> int:
    rows, doc = [], {"config": _echo(cfg), "seeds": {}}
    header = None
    for seed in cfg.seeds:
        ds = resolve_dataset(cfg, seed)
        teacher = resolve_teacher(cfg, ds)
        results = probe_lodo(ds, teacher, cfg.probe.k, cfg.train.val_fraction, seed, cfg.probe.modes)
        header = ["seed", "mode"] + list(ds.domains) + ["average"]
        doc["seeds"][str(seed)] = {m: {"per_domain": r.per_domain, "average": r.average} for m, r in results.items()}
        for m, r in results.items():
            rows.append([seed, m] + [repr(a) for a in r.per_domain] + [repr(r.average)])
            print(f"seed {seed} {m}: " + " ".join(f"{100 * a:6.2f}" for a in r.per_domain) + f"  avg {100 * r.average:6.2f}")
    _write_json(out / "probe.json", doc)
    _write_csv(out / "probe.csv", header, rows)
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> int:
    if cfg.method != "adip":
        raise ConfigError("ablations compare against the adip pipeline", "method")
    variants = [("base", "adip")] + [(a, f"ablation:{a}") for a in cfg.ablations]
    table, failures = [], []
    for name, method in variants:
        reports = []
        for seed in cfg.seeds:
            r = _run_lodo(cfg, method, seed, jobs, None, failures)
            if r is not None:
                reports.append(r)
        row = {
            "variant": name,
            "description": ABLATIONS[name].description if name in ABLATIONS else "three-stage pipeline",
            "lambda": ablation_lambda(name, cfg.train) if name in ABLATIONS else cfg.train.adip_lambda,
            "seeds": list(cfg.seeds),
            "per_seed": [{"seed": r.seed, "ood": r.avg_ood, "id": r.avg_id} for r in reports],
        }
        if reports:
            row.update(_summary(reports))
        table.append(row)
        if reports:
            print(f"{name:5s} OOD {100 * row['ood_mean']:6.2f} ± {100 * row['ood_std']:5.2f}  ID {100 * row['id_mean']:6.2f}  {row['description']}")
    _write_json(out / "ablation.json", {"config": _echo(cfg), "rows": table, "failures": failures})
    _write_csv(
        out / "ablation.csv",
        ["variant", "lambda", "ood_mean", "ood_std", "id_mean", "id_std", "seeds", "description"],
        [
            [r["variant"], r["lambda"], repr(r.get("ood_mean")), repr(r.get("ood_std")), repr(r.get("id_mean")), repr(r.get("id_std")), " ".join(map(str, r["seeds"])), r["description"]]
            for r in table
        ],
    )
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vl2v", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate a synthetic multi-domain dataset"),
        ("train", "leave-one-domain-out training of one method"),
        ("probe", "teacher embedding probes E1-E6"),
        ("ablate", "base pipeline against its ablations"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--seed", type=_seed_list, help="comma-separated seeds; overrides the config")
        p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
        p.add_argument("--out", type=Path, help="output directory; overrides the config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed:
            cfg = replace(cfg, seeds=args.seed)
        if args.jobs < 1:
            raise ConfigError("must be at least 1", "--jobs")
        out = args.out or Path(cfg.output)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.jobs)
        if args.command == "probe":
            return cmd_probe(cfg, out)
        return cmd_ablate(cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VL2VError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
