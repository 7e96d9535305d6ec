"""Experiment orchestration: cross-validated evaluation, denoising benchmark,
distribution comparison and rank statistics.

Every run can write a manifest (config, derived seeds, library versions);
feeding the manifest back in reproduces the run exactly in serial mode.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import classifiers, metrics, trainer
from .dataio import KEEL_DATASETS, Dataset, fit_normalizer, load_dataset, load_keel, stratified_kfold
from .diffusion import q_sample, reverse_chain
from .oversamplers import METHODS, OversampleRequest, balance

log = logging.getLogger(__name__)

RESULT_HEADER = ["dataset", "method", "classifier", "fold", "metric", "value"]
METRIC_NAMES = ("f1", "g_mean", "auc")
DENOISE_PROTOCOL = (
    "paired reconstruction: each minority row is noised to step T' with a seeded eps shared by "
    "both models, then denoised by the full reverse chain from T' using one seeded noise stream "
    "replayed identically for each model; PSNR(original, reconstruction) with MAX=1")


class ConfigError(ValueError):
    pass


def derived_seed(base: int, *parts) -> int:
    """Stable 31-bit seed from a base seed and a tuple of labels."""
    key = "|".join([str(base)] + [str(p) for p in parts])
    return zlib.crc32(key.encode()) & 0x7FFFFFFF


def desk_diffusion() -> dict:
    return {"T": 100, "iterations": 3000}


@dataclass
class ExperimentConfig:
    datasets: list[str]
    methods: list[str] = field(default_factory=lambda: ["none", "smote", "adasyn", "semres_ddpm"])
    classifiers: list[str] = field(default_factory=lambda: ["gaussian_nb", "knn", "logistic_regression"])
    folds: int = 10
    seed: int = 0
    diffusion: dict = field(default_factory=lambda: {"T": 1000, "iterations": 20000})
    classifier_params: dict = field(default_factory=dict)
    fit_on: str = "minority"
    output_dir: str | None = None
    workers: int = 1
    # denoise-bench / dist-compare knobs
    t_start: int | None = None  # T' for the denoising benchmark; None -> T
    scatter_features: list[int] = field(default_factory=lambda: [0, 1])
    generator: str = "semres_ddpm"

    def __post_init__(self):
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        if not self.methods or not self.classifiers:
            raise ConfigError("at least one method and one classifier are required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        kinds = set(classifiers.KINDS) | set(classifiers.ALIASES)
        bad = [c for c in self.classifiers if c not in kinds]
        if bad:
            raise ConfigError(f"unknown classifiers {bad}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = d.get("config", d)  # accept a manifest as well
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_dataset(ref: str) -> Dataset:
    if ref in KEEL_DATASETS:
        return load_keel(ref)
    p = Path(ref)
    if not p.exists():
        raise ConfigError(f"dataset {ref!r} is neither a bundled name nor an existing file")
    return load_dataset(p)


def dataset_label(ref: str) -> str:
    return ref if ref in KEEL_DATASETS else Path(ref).stem


def versions() -> dict:
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "semres_ddpm": __version__}


def _rows_hash(rows) -> str:
    return hashlib.sha256(repr(rows).encode()).hexdigest()


@dataclass
class ResultTable:
    records: list[tuple]  # (dataset, method, classifier, fold, metric, value)
    failures: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for r in self.records:
            w.writerow([r[0], r[1], r[2], r[3], r[4], repr(float(r[5]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != RESULT_HEADER:
            raise ValueError(f"result CSV must start with header {','.join(RESULT_HEADER)}")
        return cls([(r[0], r[1], r[2], int(r[3]), r[4], float(r[5])) for r in rows[1:] if r])

    def aggregates(self) -> dict:
        """(dataset, method, classifier, metric) -> (mean, std) over folds."""
        groups: dict = {}
        for d, m, c, _, name, v in self.records:
            groups.setdefault((d, m, c, name), []).append(v)
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in groups.items()}

    def metric_matrix(self, metric: str, datasets=None, methods=None):
        """Dataset x method matrix of the metric averaged over classifiers and folds."""
        cells: dict = {}
        for d, m, _, _, name, v in self.records:
            if name == metric:
                cells.setdefault((d, m), []).append(v)
        datasets = datasets or list(dict.fromkeys(r[0] for r in self.records))
        methods = methods or list(dict.fromkeys(r[1] for r in self.records))
        M = np.full((len(datasets), len(methods)), np.nan)
        for i, d in enumerate(datasets):
            for j, m in enumerate(methods):
                if (d, m) in cells:
                    M[i, j] = np.mean(cells[(d, m)])
        return datasets, methods, M


def _evaluate_unit(args):
    """One (dataset, fold, method) cell: balance, then fit and score every classifier."""
    cfg_dict, ref, fold = args[0], args[1], args[2]
    method = args[3]
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ds = resolve_dataset(ref)
    label = dataset_label(ref)
    plan = stratified_kfold(ds, cfg.folds, seed=derived_seed(cfg.seed, label, "folds"))
    train_ds = ds.subset(plan.train_index(fold))
    test_ds = ds.subset(plan.test_index(fold))
    records, failures = [], []
    before = _rows_hash(test_ds.rows)
    try:
        diff_cfg = cfg.diffusion if method in ("semres_ddpm", "mlp_ddpm") else {}
        bal = balance(OversampleRequest(train_ds, method, dict(diff_cfg),
                                        seed=derived_seed(cfg.seed, label, fold, method),
                                        fit_on=cfg.fit_on))
    except Exception as exc:  # recorded per cell; the run continues
        return records, [{"dataset": label, "fold": fold, "method": method, "classifier": "*",
                          "error": f"{type(exc).__name__}: {exc}"}]
    if _rows_hash(test_ds.rows) != before:
        raise AssertionError("test fold changed during the balance stage")
    X_test = bal.normalizer.transform(test_ds.rows)
    y_test = test_ds.y
    for clf in cfg.classifiers:
        try:
            model = classifiers.fit(clf, bal.X, bal.y, **cfg.classifier_params.get(clf, {}))
            s = classifiers.score(model, X_test)
            cm = metrics.confusion(y_test, s >= 0.5)
            vals = {"f1": metrics.f1(cm), "g_mean": metrics.g_mean(cm), "auc": metrics.auc(s, y_test)}
        except Exception as exc:
            failures.append({"dataset": label, "fold": fold, "method": method, "classifier": clf,
                             "error": f"{type(exc).__name__}: {exc}"})
            continue
        records.extend((label, method, clf, fold, name, vals[name]) for name in METRIC_NAMES)
    return records, failures


def run_evaluate(config: ExperimentConfig) -> ResultTable:
    """k-fold evaluation of every (dataset, method, classifier) combination."""
    cfg_dict = config.to_dict()
    for ref in config.datasets:
        resolve_dataset(ref)  # fail fast on bad paths
    units = [(cfg_dict, ref, fold, m) for ref in config.datasets
             for fold in range(config.folds) for m in config.methods]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            results = list(ex.map(_evaluate_unit, units))
    else:
        results = [_evaluate_unit(u) for u in units]
    records = [r for recs, _ in results for r in recs]
    failures = [f for _, fails in results for f in fails]

    d_ord = {dataset_label(d): i for i, d in enumerate(config.datasets)}
    m_ord = {m: i for i, m in enumerate(config.methods)}
    c_ord = {c: i for i, c in enumerate(config.classifiers)}
    k_ord = {k: i for i, k in enumerate(METRIC_NAMES)}
    records.sort(key=lambda r: (d_ord[r[0]], m_ord[r[1]], c_ord[r[2]], r[3], k_ord[r[4]]))
    table = ResultTable(records, failures)
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(table.to_csv(), encoding="utf-8", newline="\n")
        write_manifest(out / "manifest.json", config, {
            "fold_seeds": {dataset_label(d): derived_seed(config.seed, dataset_label(d), "folds")
                           for d in config.datasets},
            "failures": failures})
    return table


def write_manifest(path, config: ExperimentConfig, extra: dict | None = None) -> None:
    man = {"config": config.to_dict(), "versions": versions(),
           "seed_scheme": "crc32('base|dataset|fold|method') & 0x7fffffff"}
    man.update(extra or {})
    Path(path).write_text(json.dumps(man, indent=2, sort_keys=True), encoding="utf-8")


def load_manifest(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- denoising benchmark -------------------------------------------------------

def minority_matrix(ds: Dataset, fit_on: str = "minority"):
    norm = fit_normalizer(ds.minority_rows() if fit_on == "minority" else ds.rows, ds.schema)
    return norm.transform(ds.minority_rows()), norm


def denoise_pair(X: np.ndarray, checkpoints: dict, t_start: int, seed: int = 0) -> dict:
    """Reconstruct ``X`` from step ``t_start`` with each checkpoint under shared randomness.

    Returns name -> (psnr, reconstruction).  ``t_start = 0`` means no noise.
    """
    scheds = {n: c.build_schedule() for n, c in checkpoints.items()}
    Ts = {s.T for s in scheds.values()}
    if len(Ts) != 1:
        raise ValueError("checkpoints must share the number of diffusion steps")
    widths = {c.arch_config["d_in"] for c in checkpoints.values()}
    if widths != {X.shape[1]}:
        raise ValueError(f"checkpoint width {sorted(widths)} does not match data width {X.shape[1]}")
    T = Ts.pop()
    if not 0 <= t_start <= T:
        raise ValueError(f"t_start must lie in [0, {T}]")
    eps = np.random.default_rng([seed, 0]).standard_normal(X.shape)
    out = {}
    for name, ckpt in checkpoints.items():
        sched = scheds[name]
        if t_start == 0:
            rec = X.copy()
        else:
            St = q_sample(X, t_start, eps, sched)
            rec = reverse_chain(ckpt.build_denoiser(), St, t_start, sched,
                                np.random.default_rng([seed, 1]))
        out[name] = (metrics.psnr(X, rec), rec)
    return out


def train_pair(X, norm, config: ExperimentConfig, label: str) -> dict:
    """Train an MLP and a SEMST denoiser on ``X`` with the same seed and budget."""
    ckpts = {}
    for name, arch in (("mlp", "mlp"), ("semst", "semst")):
        tc = trainer.TrainConfig(arch=arch, seed=derived_seed(config.seed, label, "bench"),
                                 **config.diffusion)
        ckpts[name] = trainer.train(X, tc, normalizer=norm.to_dict())
    return ckpts


def run_denoise_bench(config: ExperimentConfig, checkpoints: dict | None = None) -> dict:
    """PSNR of MLP vs residual-attention reconstructions for each dataset.

    Both models get identical training budgets and seeds unless
    pre-trained ``checkpoints`` ({dataset: {"mlp": c, "semst": c}}) are given.
    """
    results = []
    out = Path(config.output_dir) if config.output_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for ref in config.datasets:
        label = dataset_label(ref)
        X, norm = minority_matrix(resolve_dataset(ref), config.fit_on)
        pair = (checkpoints or {}).get(label) or train_pair(X, norm, config, label)
        T = pair["semst"].build_schedule().T
        t_start = T if config.t_start is None else config.t_start
        res = denoise_pair(X, pair, t_start, seed=derived_seed(config.seed, label, "denoise"))
        results.append({"dataset": label, "t_start": t_start, "n_rows": len(X),
                        "psnr_mlp": res["mlp"][0], "psnr_semst": res["semst"][0]})
        if out:
            f = [j for j in config.scatter_features if j < X.shape[1]]
            write_scatter(out / f"scatter_{label}.csv", X, res["mlp"][1], res["semst"][1], f)
    report = {"protocol": DENOISE_PROTOCOL, "results": results, "versions": versions()}
    if out:
        (out / "denoise_bench.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        write_manifest(out / "manifest.json", config)
    return report


def write_scatter(path, original, mlp, ours, features) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"{src}_f{j}" for src in ("original", "mlp", "ours") for j in features])
    for a, b, c in zip(original, mlp, ours):
        w.writerow([repr(float(m[j])) for m in (a, b, c) for j in features])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


# -- distribution comparison ---------------------------------------------------

def ecdf(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=np.float64))
    return np.searchsorted(v, grid, side="right") / len(v)


def compare_distributions(real: np.ndarray, synth: np.ndarray, bins: int = 32,
                          grid_size: int = 101) -> dict:
    """Per-column histograms, ECDFs, quantile-matched Pearson and ECDF distance."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    grid = np.linspace(0.0, 1.0, grid_size)
    feats = []
    for j in range(real.shape[1]):
        r = np.clip(real[:, j], 0, 1)
        s = np.clip(synth[:, j], 0, 1)
        Fr, Fs = ecdf(r, grid), ecdf(s, grid)
        try:
            rho = metrics.quantile_pearson(r, s)
        except ValueError:  # a constant column has no defined correlation
            rho = float("nan")
        feats.append({"feature": j,
                      "hist_real": np.histogram(r, edges)[0].tolist(),
                      "hist_synth": np.histogram(s, edges)[0].tolist(),
                      "ecdf_grid": grid.tolist(), "ecdf_real": Fr.tolist(), "ecdf_synth": Fs.tolist(),
                      "pearson": rho, "ecdf_distance": float(np.max(np.abs(Fr - Fs)))})
    return {"bin_edges": edges.tolist(), "features": feats,
            "mean_ecdf_distance": float(np.mean([f["ecdf_distance"] for f in feats]))}


def run_dist_compare(config: ExperimentConfig, checkpoints: dict | None = None) -> dict:
    from .diffusion import sample
    arch = {"semres_ddpm": "semst", "mlp_ddpm": "mlp"}[config.generator]
    out = Path(config.output_dir) if config.output_dir else None
    report = {"generator": config.generator, "datasets": []}
    for ref in config.datasets:
        label = dataset_label(ref)
        X, norm = minority_matrix(resolve_dataset(ref), config.fit_on)
        seed = derived_seed(config.seed, label, "dist")
        ckpt = (checkpoints or {}).get(label)
        if ckpt is None:
            ckpt = trainer.train(X, trainer.TrainConfig(arch=arch, seed=seed, **config.diffusion),
                                 normalizer=norm.to_dict())
        S = sample(ckpt.build_denoiser(), len(X), X.shape[1], ckpt.build_schedule(),
                   np.random.default_rng([seed, 1]))
        cmp = compare_distributions(X, np.clip(S, 0, 1))
        sel = [j for j in config.scatter_features if j < X.shape[1]]
        rhos = [cmp["features"][j]["pearson"] for j in sel]
        cmp.update(dataset=label, selected_features=sel,
                   selected_mean_pearson=float(np.mean(rhos)) if rhos else float("nan"))
        report["datasets"].append(cmp)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "dist_compare.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        write_manifest(out / "manifest.json", config)
    return report


# -- statistics ---------------------------------------------------------------

def load_table5() -> dict:
    """Published per-dataset averages: metric -> (datasets, methods, N x k matrix)."""
    text = (resources.files("semres_ddpm") / "data" / "table5.csv").read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    methods = rows[0][2:]
    out: dict = {}
    for r in rows[1:]:
        out.setdefault(r[0], ([], []))
        out[r[0]][0].append(r[1])
        out[r[0]][1].append([float(v) for v in r[2:]])
    return {m: (ds, methods, np.array(vals)) for m, (ds, vals) in out.items()}


def read_wide_csv(text: str):
    """``dataset,<method>,...`` matrix; empty cells become NaN."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    methods = rows[0][1:]
    datasets = [r[0] for r in rows[1:]]
    M = np.array([[float(v) if v.strip() else np.nan for v in r[1:]] for r in rows[1:]])
    return datasets, methods, M


def run_stats(datasets: list[str], methods: list[str], matrix, alpha: float = 0.05,
              higher_better: bool = True) -> dict:
    M = np.asarray(matrix, dtype=np.float64)
    missing = [(datasets[i], methods[j]) for i, j in zip(*np.nonzero(~np.isfinite(M)))]
    if missing:
        raise ValueError("missing cells: " + ", ".join(f"{d}/{m}" for d, m in missing))
    table = metrics.mean_ranks(M, higher_better, methods)
    chi2, p = metrics.friedman(table)
    cd = metrics.nemenyi_cd(table.k, table.N, alpha)
    ranks = table.as_dict()
    return {
        "mean_ranks": ranks,
        "chi2": chi2,
        "p_value": p,
        "critical_difference": cd,
        "intervals": {m: [r - cd / 2, r + cd / 2] for m, r in ranks.items()},
        "significant": bool(p < alpha),
        "conclusion": ("methods differ significantly" if p < alpha
                       else "no significant difference"),
        "N": table.N, "k": table.k, "alpha": alpha,
    }


def stats_intervals_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "mean_rank", "low", "high"])
    for m, r in report["mean_ranks"].items():
        lo, hi = report["intervals"][m]
        w.writerow([m, repr(r), repr(lo), repr(hi)])
    return buf.getvalue()
