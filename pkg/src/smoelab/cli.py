"""Command-line entry point.

Subcommands: train, eval, analyze, oracle, export. Exit codes are a stable
contract: 0 success, 2 usage/config problems, 3 training failure, 4 record
alignment failure, 5 oracle-suite failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as datamod
from . import metrics as metricsmod
from . import suites
from . import trainer
from .errors import AlignmentError, ConfigError, EnumerationBoundsError, TrainingFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_ALIGNMENT = 4
EXIT_ORACLE = 5

VARIANT_FLAGS = {"baseline": "baseline", "similarity": "similarity_aware",
                 "attention": "attention_aware"}


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _out_root() -> Path:
    return Path(os.environ.get("SMOELAB_OUT_ROOT", "runs"))


def _write_flat_config(path: Path, mcfg: trainer.ModelConfig, tcfg: trainer.TrainConfig,
                       extras: dict) -> None:
    lines = ["# resolved run configuration"]
    for key, value in {**asdict(mcfg), **asdict(tcfg), **extras}.items():
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_dataset(mcfg: trainer.ModelConfig, extras: dict):
    if mcfg.task == "synthetic":
        c = int(extras.get("clusters", 4))
        per = int(extras.get("tokens_per_cluster", 256))
        radius = float(extras.get("cluster_radius", 1.0))
        task = datamod.make_synthetic_clusters(c, per, mcfg.dim, radius, seed=0)
        return task
    corpus_key = extras.get("corpus", "default")
    path = datamod.default_corpus_path() if corpus_key == "default" else Path(corpus_key)
    return datamod.load_char_corpus(path)


def _write_run_metrics(run_dir: Path, variant: str, seed: int,
                       checkpoints: list[trainer.Checkpoint]) -> None:
    rows = []
    for ck in checkpoints:
        rows.append([ck.epoch,
                     repr(ck.scalars["train_loss"]) if "train_loss" in ck.scalars else "",
                     repr(ck.scalars["valid_loss"]), repr(ck.scalars["valid_ppl"])])
    (run_dir / "loss_curve.csv").write_text(
        _csv_text(["epoch", "train_loss", "valid_loss", "valid_ppl"], rows), encoding="utf-8")

    records = [ck.record for ck in checkpoints]
    (run_dir / "records.csv").write_text(metricsmod.records_to_csv(records), encoding="utf-8")

    if len(checkpoints) >= 2:
        report = metricsmod.build_report(variant, seed, records[-2], records[-1])
        _write_metric_csvs(run_dir, report)
        (run_dir / f"{report.file_stem()}.json").write_text(report.to_json(), encoding="utf-8")
        (run_dir / f"{report.file_stem()}.csv").write_text(report.to_csv(), encoding="utf-8")


def _write_metric_csvs(out_dir: Path, report: metricsmod.MetricsReport) -> None:
    layers = range(len(report.fluctuation_top1))
    (out_dir / "fluctuation.csv").write_text(_csv_text(
        ["layer", "top1_rate", "set_rate"],
        [[l, repr(float(report.fluctuation_top1[l])), repr(float(report.fluctuation_set[l]))]
         for l in layers]), encoding="utf-8")
    (out_dir / "entropy.csv").write_text(_csv_text(
        ["layer", "mean_entropy"],
        [[l, repr(float(report.mean_entropy[l]))] for l in layers]), encoding="utf-8")
    if report.entropy_ratio is not None:
        (out_dir / "entropy_ratio.csv").write_text(_csv_text(
            ["layer", "ratio"],
            [[l, repr(float(report.entropy_ratio[l]))] for l in layers]), encoding="utf-8")
    rows = []
    for l, frac in enumerate(report.load):
        for e, v in enumerate(frac):
            rows.append([l, e, repr(float(v))])
    (out_dir / "load.csv").write_text(_csv_text(["layer", "expert", "fraction"], rows),
                                      encoding="utf-8")


def cmd_train(args) -> int:
    try:
        mcfg, tcfg, extras = trainer.parse_config_file(args.config)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, str(err))

    if args.seed is not None:
        tcfg.seed = args.seed
    if args.variant is not None:
        mcfg.combiner = VARIANT_FLAGS[args.variant]

    run_dir = Path(args.out) if args.out else \
        _out_root() / f"{Path(args.config).stem}__{mcfg.combiner}__seed{tcfg.seed}"
    if run_dir.exists() and any(run_dir.iterdir()) and not args.force:
        return _fail(EXIT_CONFIG, f"run directory {run_dir} exists; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)

    try:
        dataset = _load_dataset(mcfg, extras)
        if mcfg.task == "lm":
            mcfg.vocab_size = dataset.vocab_size
        model = trainer.build_model(mcfg, tcfg.seed)
    except (ConfigError, ValueError) as err:
        return _fail(EXIT_CONFIG, str(err))

    _write_flat_config(run_dir / "config.cfg", mcfg, tcfg, extras)
    try:
        checkpoints = trainer.train(model, dataset, tcfg, out_dir=run_dir / "checkpoints")
    except TrainingFailure as err:
        return _fail(EXIT_TRAINING, str(err))

    _write_run_metrics(run_dir, mcfg.combiner, tcfg.seed, checkpoints)

    if mcfg.task == "lm":
        clean = trainer.evaluate_ppl(model, dataset.test_ids)
        attacked_ids = datamod.token_swap_attack(dataset.test_ids, tcfg.attack_fraction,
                                                 seed=tcfg.seed)
        attacked = trainer.evaluate_ppl(model, attacked_ids)
        (run_dir / "eval.csv").write_text(_csv_text(
            ["split", "attack_fraction", "ppl"],
            [["test", 0.0, repr(clean)], ["test", tcfg.attack_fraction, repr(attacked)]]),
            encoding="utf-8")
        print(f"test ppl clean={clean:.4f} attacked={attacked:.4f}")
    print(f"run written to {run_dir}")
    return EXIT_OK


def _load_run(run_dir: Path):
    ckpt_dir = run_dir / "checkpoints"
    paths = sorted(ckpt_dir.glob("checkpoint_ep*.bin"),
                   key=lambda p: int(p.stem.split("ep")[-1]))
    if not paths:
        raise ConfigError(f"no checkpoints under {run_dir}")
    mcfg, tcfg, extras = trainer.parse_config_file(run_dir / "config.cfg")
    return mcfg, tcfg, extras, paths


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    try:
        mcfg, tcfg, extras, paths = _load_run(run_dir)
        cfg, ck = trainer.load_checkpoint(paths[-1])
        model = trainer.build_model(cfg, tcfg.seed)
        model.load_state(ck.params)
        dataset = _load_dataset(mcfg, extras)
    except (ConfigError, ValueError) as err:
        return _fail(EXIT_CONFIG, str(err))
    if mcfg.task != "lm":
        return _fail(EXIT_CONFIG, "eval is defined for language-model runs")
    fraction = args.attack_fraction if args.attack_fraction is not None else tcfg.attack_fraction
    clean = trainer.evaluate_ppl(model, dataset.test_ids)
    attacked_ids = datamod.token_swap_attack(dataset.test_ids, fraction, seed=tcfg.seed)
    attacked = trainer.evaluate_ppl(model, attacked_ids)
    print(f"epoch {ck.epoch}: test ppl clean={clean:.6f} attacked={attacked:.6f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    try:
        mcfg, tcfg, _, paths = _load_run(run_dir)
        if len(paths) < 2:
            return _fail(EXIT_CONFIG, "need at least two checkpoints to analyze")
        _, ck_prev = trainer.load_checkpoint(paths[-2])
        _, ck_last = trainer.load_checkpoint(paths[-1])
        baseline_record = None
        baseline_variant = None
        if args.baseline:
            bcfg, btcfg, _, bpaths = _load_run(Path(args.baseline))
            target_epoch = ck_prev.record.epoch
            bpath = next((p for p in bpaths
                          if int(p.stem.split("ep")[-1]) == target_epoch), bpaths[-2])
            _, bck = trainer.load_checkpoint(bpath)
            baseline_record = bck.record
            baseline_variant = bcfg.combiner
    except (ConfigError, ValueError) as err:
        return _fail(EXIT_CONFIG, str(err))

    try:
        report = metricsmod.build_report(mcfg.combiner, tcfg.seed,
                                         ck_prev.record, ck_last.record,
                                         rec_baseline=baseline_record,
                                         baseline_variant=baseline_variant)
    except AlignmentError as err:
        return _fail(EXIT_ALIGNMENT, str(err))

    out_dir = Path(args.out) if args.out else run_dir / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metric_csvs(out_dir, report)
    (out_dir / f"{report.file_stem()}.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / f"{report.file_stem()}.csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"analysis written to {out_dir}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.bounds:
        try:
            n, h, e, d = (int(v) for v in args.bounds.split(","))
        except ValueError:
            return _fail(EXIT_CONFIG, f"--bounds expects N,H,E,D, got {args.bounds!r}")
        from . import pgm_oracle
        try:
            pgm_oracle.check_enumeration_bounds(n, h, e, d)
        except EnumerationBoundsError as err:
            return _fail(EXIT_CONFIG, str(err))

    perturb = None
    if args.inject_fault:
        def perturb(matrix):
            corrupted = matrix.copy()
            corrupted[0, 0] += 0.1
            return corrupted

    checks = suites.run_all_suites(seed=args.seed, fast=args.fast, perturb=perturb)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} - {c['detail']}")
    failures = [c for c in checks if not c["passed"]]
    if failures:
        return _fail(EXIT_ORACLE, f"oracle check failed: {failures[0]['name']}")
    print(f"all {len(checks)} oracle checks passed")
    return EXIT_OK


def cmd_export(args) -> int:
    run_dir = Path(args.run)
    reports = sorted(run_dir.rglob("metrics__*.json"))
    if not reports:
        return _fail(EXIT_CONFIG, f"no metrics reports under {run_dir}")
    if args.format not in ("csv", "json"):
        return _fail(EXIT_CONFIG, f"unknown format {args.format!r}")
    out_dir = Path(args.out) if args.out else run_dir / "export"
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in reports:
        report = metricsmod.MetricsReport.from_json(path.read_text(encoding="utf-8"))
        target = out_dir / f"{report.file_stem()}.{args.format}"
        payload = report.to_csv() if args.format == "csv" else report.to_json()
        target.write_text(payload, encoding="utf-8")
        print(f"wrote {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoelab",
                                     description="desk-scale sparse mixture-of-experts toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a flat config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=sorted(VARIANT_FLAGS), default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on clean and attacked text")
    p.add_argument("--run", required=True)
    p.add_argument("--attack-fraction", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="stability metrics for a run (vs optional baseline)")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("oracle", help="run the enumeration/Monte-Carlo verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fast", action="store_true")
    p.add_argument("--bounds", default=None, help="N,H,E,D to validate against limits")
    p.add_argument("--inject-fault", action="store_true",
                   help="negative control: corrupt one oracle value (must fail)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("export", help="re-serialize metrics reports")
    p.add_argument("--run", required=True)
    p.add_argument("--format", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    code = args.func(args)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
