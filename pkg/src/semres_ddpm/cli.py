"""Command-line entry point.

Exit codes: 0 success, 1 some cells failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, trainer
from .dataio import DataFormatError, Normalizer, class_stats, fit_encode
from .diffusion import sample
from .oversamplers import METHODS, OversampleRequest, balance

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _kv(pairs) -> dict:
    """``key=value`` pairs; values parsed as JSON when possible."""
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise harness.ConfigError(f"expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _experiment_config(args) -> harness.ExperimentConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise harness.ConfigError(f"cannot read config {args.config}: {exc}") from exc
        base = dict(base.get("config", base))
    for key in ("datasets", "methods", "classifiers", "folds", "seed", "workers", "t_start",
                "generator"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    if args.out:
        base["output_dir"] = args.out
    diff = dict(base.get("diffusion", {"T": 1000, "iterations": 20000}))
    if args.desk:
        diff.update(harness.desk_diffusion())
    diff.update(_kv(args.diffusion))
    base["diffusion"] = diff
    if "datasets" not in base:
        raise harness.ConfigError("no datasets given (use --datasets or a config file)")
    return harness.ExperimentConfig.from_dict(base)


def _add_experiment_flags(p, methods=True):
    p.add_argument("--config", help="JSON config or manifest file")
    p.add_argument("--datasets", nargs="+", help="bundled dataset names or file paths")
    if methods:
        p.add_argument("--methods", nargs="+", choices=METHODS)
        p.add_argument("--classifiers", nargs="+")
        p.add_argument("--folds", type=int)
        p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--desk", action="store_true", help="desk-scale diffusion (T=100, 3000 iterations)")
    p.add_argument("--diffusion", nargs="*", metavar="KEY=VALUE",
                   help="diffusion overrides, e.g. iterations=500 lr=0.002")
    p.add_argument("--out", help="output directory")


def cmd_ingest(args) -> int:
    ds = harness.resolve_dataset(args.dataset)
    n_min, n_maj, ir = class_stats(ds)
    info = {"dataset": harness.dataset_label(args.dataset), "rows": ds.n, "features": len(ds.schema),
            "positive_label": ds.positive_label, "n_min": n_min, "n_maj": n_maj,
            "imbalance_ratio": ir, "schema_fingerprint": ds.fingerprint()}
    print(json.dumps(info, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = ds.minority_rows() if args.fit_on == "minority" else ds.rows
        _, norm = fit_encode(rows, ds.schema)
        X = norm.transform(ds.rows)
        np.savetxt(out / "encoded.csv", np.column_stack([X, ds.y]), delimiter=",",
                   header=",".join([f"c{j}" for j in range(X.shape[1])] + ["y"]), comments="")
        (out / "normalizer.json").write_text(json.dumps(norm.to_dict(), indent=2), encoding="utf-8")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = harness.resolve_dataset(args.dataset)
    X, norm = harness.minority_matrix(ds)
    cfg = {"arch": args.arch, "seed": args.seed}
    if args.desk:
        cfg.update(harness.desk_diffusion())
    cfg.update(_kv(args.set))
    try:
        tc = trainer.TrainConfig(**cfg)
    except TypeError as exc:
        raise harness.ConfigError(str(exc)) from exc
    ckpt = trainer.train(X, tc, normalizer=norm.to_dict(), schema_fingerprint=ds.fingerprint())
    trainer.save(ckpt, args.out)
    sm = trainer.smoothed(ckpt.loss_trace)
    print(json.dumps({"checkpoint": args.out, "final_loss": ckpt.final_loss,
                      "final_smoothed_loss": float(sm[-1]), "parameters": ckpt.n_values}))
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = trainer.load(args.checkpoint)
    S = sample(ckpt.build_denoiser(), args.n, ckpt.arch_config["d_in"], ckpt.build_schedule(),
               np.random.default_rng(args.seed))
    S = np.clip(S, 0.0, 1.0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if args.raw or ckpt.normalizer is None:
        w.writerow([f"c{j}" for j in range(S.shape[1])])
        w.writerows([[repr(float(v)) for v in r] for r in S])
    else:
        norm = Normalizer.from_dict(ckpt.normalizer)
        w.writerow([f.name for f in norm.schema])
        w.writerows(norm.inverse(S))
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_oversample(args) -> int:
    ds = harness.resolve_dataset(args.dataset)
    cfg = harness.desk_diffusion() if args.desk else {}
    cfg.update(_kv(args.set))
    bal = balance(OversampleRequest(ds, args.method, cfg, seed=args.seed))
    # originals verbatim; synthetics decoded (majority rows may sit outside the fitted range)
    rows = list(ds.rows) + bal.synthetic_rows()
    labels = list(ds.labels) + [ds.positive_label] * bal.n_synthetic
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in ds.schema] + ["class", "synthetic"])
    for r, lab, s in zip(rows, labels, bal.synthetic):
        w.writerow(list(r) + [lab, int(s)])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _experiment_config(args)
    table = harness.run_evaluate(cfg)
    if not cfg.output_dir:
        sys.stdout.write(table.to_csv())
    for f in table.failures:
        logging.error("cell failed: %s", f)
    return EXIT_PARTIAL if table.failures else EXIT_OK


def cmd_denoise_bench(args) -> int:
    cfg = _experiment_config(args)
    report = harness.run_denoise_bench(cfg)
    print(json.dumps(report["results"], indent=2))
    return EXIT_OK


def cmd_dist_compare(args) -> int:
    cfg = _experiment_config(args)
    report = harness.run_dist_compare(cfg)
    print(json.dumps([{k: d[k] for k in ("dataset", "selected_mean_pearson", "mean_ecdf_distance")}
                      for d in report["datasets"]], indent=2))
    return EXIT_OK


def cmd_stats(args) -> int:
    if args.table5:
        datasets, methods, M = harness.load_table5()[args.table5]
    else:
        text = Path(args.input).read_text(encoding="utf-8")
        if text.startswith(",".join(harness.RESULT_HEADER)):
            datasets, methods, M = harness.ResultTable.from_csv(text).metric_matrix(args.metric)
        else:
            datasets, methods, M = harness.read_wide_csv(text)
    if args.methods:
        missing = [m for m in args.methods if m not in methods]
        if missing:
            raise harness.ConfigError(f"methods not in input: {missing}")
        cols = [methods.index(m) for m in args.methods]
        methods, M = list(args.methods), M[:, cols]
    report = harness.run_stats(datasets, methods, M, alpha=args.alpha)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        (out / "intervals.csv").write_text(harness.stats_intervals_csv(report), encoding="utf-8")
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semres-ddpm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a dataset, report class statistics, export the encoding")
    p.add_argument("dataset")
    p.add_argument("--fit-on", choices=["minority", "train"], default="minority")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a denoiser on a dataset's minority rows")
    p.add_argument("dataset")
    p.add_argument("--arch", choices=["semst", "mlp"], default="semst")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true")
    p.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="TrainConfig overrides")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw rows from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raw", action="store_true", help="write the encoded matrix instead of decoded rows")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("oversample", help="balance a dataset and write the result as CSV")
    p.add_argument("dataset")
    p.add_argument("--method", choices=METHODS, default="semres_ddpm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--desk", action="store_true")
    p.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="method config overrides")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oversample)

    p = sub.add_parser("evaluate", help="k-fold oversample/classify/score experiment")
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("denoise-bench", help="PSNR of MLP vs residual-attention reconstructions")
    _add_experiment_flags(p, methods=False)
    p.add_argument("--t-start", type=int, dest="t_start", help="start step T' (default T)")
    p.set_defaults(func=cmd_denoise_bench)

    p = sub.add_parser("dist-compare", help="histograms, ECDFs and correlations of generated data")
    _add_experiment_flags(p, methods=False)
    p.add_argument("--generator", choices=["semres_ddpm", "mlp_ddpm"])
    p.set_defaults(func=cmd_dist_compare)

    p = sub.add_parser("stats", help="Friedman test and Nemenyi intervals")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("input", nargs="?", help="result CSV or wide dataset x method CSV")
    src.add_argument("--table5", choices=["F1", "G-mean", "AUC"], help="use the bundled published table")
    p.add_argument("--metric", default="f1", help="metric to rank when reading a result CSV")
    p.add_argument("--methods", nargs="+", help="column subset, in order")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, DataFormatError, trainer.CheckpointError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
