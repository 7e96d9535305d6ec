"""Minority oversampling: diffusion generation, SMOTE, ADASYN, and the balancer.

Everything operates in the encoded [0, 1] space produced by a Normalizer.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import trainer
from .dataio import Dataset, Normalizer, fit_normalizer
from .diffusion import sample

METHODS = ("none", "smote", "adasyn", "semres_ddpm", "mlp_ddpm")
DDPM_ARCH = {"semres_ddpm": "semst", "mlp_ddpm": "mlp"}


@dataclass
class OversampleRequest:
    train: Dataset
    method: str = "none"
    config: dict = field(default_factory=dict)
    seed: int = 0
    fit_on: str = "minority"  # rows the normalizer is fitted on: "minority" or "train"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if self.fit_on not in ("minority", "train"):
            raise ValueError("fit_on must be 'minority' or 'train'")

    @property
    def n_synthetic(self) -> int:
        y = self.train.y
        return max(0, int((y == 0).sum() - (y == 1).sum()))


@dataclass
class BalancedTrainSet:
    X: np.ndarray  # encoded rows, originals first then synthetics
    y: np.ndarray
    synthetic: np.ndarray  # bool mask
    normalizer: Normalizer
    checkpoint: trainer.Checkpoint | None = None

    @property
    def n_synthetic(self) -> int:
        return int(self.synthetic.sum())

    def synthetic_rows(self) -> list[list]:
        return self.normalizer.inverse(self.X[self.synthetic])


def _knn_index(A: np.ndarray, B: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    """Indices into B of the k nearest rows for every row of A (Euclidean, stable ties)."""
    d2 = np.sum(A ** 2, axis=1)[:, None] - 2 * A @ B.T + np.sum(B ** 2, axis=1)[None, :]
    d2 = np.maximum(d2, 0.0)
    if exclude_self:
        np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def _interpolate(X_min, base, nn, rng, k):
    pick = nn[base, rng.integers(k, size=len(base))]
    lam = rng.random(len(base))[:, None]
    return X_min[base] + lam * (X_min[pick] - X_min[base])


def smote(X_min: np.ndarray, count: int, k: int = 5, seed=0) -> np.ndarray:
    X_min = np.asarray(X_min, dtype=np.float64)
    n = len(X_min)
    if n < 2:
        raise ValueError("SMOTE needs at least two minority rows")
    rng = np.random.default_rng(seed)
    k = min(k, n - 1)
    if count == 0:
        return np.zeros((0, X_min.shape[1]))
    nn = _knn_index(X_min, X_min, k, exclude_self=True)
    base = rng.integers(n, size=count)
    return _interpolate(X_min, base, nn, rng, k)


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation proportional to ``weights`` summing exactly to ``total``.

    Leftover units go to the largest fractional parts, lower index first on ties.
    """
    w = np.asarray(weights, dtype=np.float64)
    quota = total * w / w.sum()
    alloc = np.floor(quota).astype(int)
    rest = total - alloc.sum()
    if rest > 0:
        order = np.lexsort((np.arange(len(w)), -(quota - alloc)))
        alloc[order[:rest]] += 1
    return alloc


def adasyn_weights(X: np.ndarray, y: np.ndarray, k: int = 5) -> np.ndarray:
    """Fraction of majority rows among each minority row's k nearest neighbours."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    k = min(k, len(X) - 1)
    mins = np.flatnonzero(y == 1)
    d2 = np.sum(X[mins] ** 2, axis=1)[:, None] - 2 * X[mins] @ X.T + np.sum(X ** 2, axis=1)[None, :]
    d2[np.arange(len(mins)), mins] = np.inf
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return (y[nn] == 0).sum(axis=1) / k


def adasyn(X: np.ndarray, y: np.ndarray, count: int, k: int = 5, seed=0) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    X_min = X[y == 1]
    n = len(X_min)
    if n < 2:
        raise ValueError("ADASYN needs at least two minority rows")
    rng = np.random.default_rng(seed)
    if count == 0:
        return np.zeros((0, X.shape[1]))
    r = adasyn_weights(X, y, k)
    if r.sum() == 0:
        warnings.warn("no minority row has majority neighbours; ADASYN falls back to uniform allocation",
                      stacklevel=2)
        r = np.ones(n)
    alloc = largest_remainder(r, count)
    km = min(k, n - 1)
    nn = _knn_index(X_min, X_min, km, exclude_self=True)
    base = np.repeat(np.arange(n), alloc)
    return _interpolate(X_min, base, nn, rng, km)


def ddpm_generate(X_min: np.ndarray, count: int, arch: str, config: dict, seed: int,
                  normalizer: Normalizer | None = None):
    """Train a diffusion model on ``X_min`` and draw ``count`` rows, clamped to [0, 1]."""
    cfg = dict(config)
    sample_batch = cfg.pop("sample_batch", None)
    tc = trainer.TrainConfig(arch=arch, seed=seed, **cfg)
    ckpt = trainer.train(X_min, tc, normalizer=normalizer.to_dict() if normalizer else None)
    net = ckpt.build_denoiser()
    rng = np.random.default_rng([seed, 1])
    S = sample(net, count, X_min.shape[1], ckpt.build_schedule(), rng, batch_size=sample_batch)
    return np.clip(S, 0.0, 1.0), ckpt


def balance(request: OversampleRequest) -> BalancedTrainSet:
    ds = request.train
    y = ds.y
    fit_rows = ds.minority_rows() if request.fit_on == "minority" else ds.rows
    norm = fit_normalizer(fit_rows, ds.schema)
    X = norm.transform(ds.rows)
    count = request.n_synthetic
    method, cfg = request.method, dict(request.config)
    ckpt = None
    if method == "none" or count == 0:
        synth = np.zeros((0, X.shape[1]))
    elif method == "smote":
        synth = smote(X[y == 1], count, k=cfg.get("k", 5), seed=request.seed)
    elif method == "adasyn":
        synth = adasyn(X, y, count, k=cfg.get("k", 5), seed=request.seed)
    else:
        if (y == 1).sum() < 2:
            raise ValueError("diffusion oversampling needs at least two minority rows")
        raw, ckpt = ddpm_generate(X[y == 1], count, DDPM_ARCH[method], cfg, request.seed, norm)
        # snap to valid rows: one-hot groups become exact indicators
        synth = norm.transform(norm.inverse(raw))
    Xb = np.vstack([X, synth])
    yb = np.concatenate([y, np.ones(len(synth), dtype=int)])
    mask = np.concatenate([np.zeros(len(X), dtype=bool), np.ones(len(synth), dtype=bool)])
    return BalancedTrainSet(Xb, yb, mask, norm, ckpt)


def semres_oversample(request: OversampleRequest) -> BalancedTrainSet:
    if request.method not in DDPM_ARCH:
        raise ValueError("semres_oversample handles the diffusion methods only")
    return balance(request)
