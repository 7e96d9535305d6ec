"""Five small binary classifiers with a shared fit / score / predict surface.

All of them consume the encoded [0, 1] feature space and produce a
positive-class score in [0, 1] (used directly for AUC).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

DEFAULTS = {
    "gaussian_nb": {"var_smoothing": 1e-9},
    "bernoulli_nb": {"binarize": 0.5, "laplace": 1.0},
    "knn": {"k": 5},
    "logistic_regression": {"lr": 0.1, "iters": 500, "l2": 1e-4},
    "decision_tree": {"max_depth": 10, "min_split": 2},
}
ALIASES = {"logreg": "logistic_regression", "tree": "decision_tree"}
KINDS = tuple(DEFAULTS)


@dataclass(frozen=True)
class FittedClassifier:
    kind: str
    params: dict
    n_features: int
    state: dict = field(repr=False)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be n x d with one label per row")
    if len(X) < 2:
        raise ValueError("need at least two rows")
    if set(np.unique(y)) != {0, 1}:
        raise ValueError("both classes must be present (labels 0/1)")
    return X, y


def _fit_gaussian_nb(X, y, var_smoothing):
    # smoothing relative to the largest feature variance, as is customary
    eps = var_smoothing * float(np.var(X, axis=0).max())
    mu = np.stack([X[y == c].mean(axis=0) for c in (0, 1)])
    var = np.stack([X[y == c].var(axis=0) for c in (0, 1)]) + eps
    if eps == 0.0:
        var = np.maximum(var, 1e-12)
    prior = np.array([np.mean(y == 0), np.mean(y == 1)])
    return {"mu": mu, "var": var, "log_prior": np.log(prior)}


def _score_gaussian_nb(st, X):
    mu, var = st["mu"], st["var"]
    ll = -0.5 * (np.sum(np.log(2 * np.pi * var), axis=1)[None, :]
                 + np.sum((X[:, None, :] - mu[None]) ** 2 / var[None], axis=2))
    joint = ll + st["log_prior"][None, :]
    return np.exp(joint[:, 1] - logsumexp(joint, axis=1))


def _fit_bernoulli_nb(X, y, binarize, laplace):
    B = (X > binarize).astype(np.float64)
    p = np.stack([(B[y == c].sum(axis=0) + laplace) / (np.sum(y == c) + 2 * laplace)
                  for c in (0, 1)])
    prior = np.array([np.mean(y == 0), np.mean(y == 1)])
    return {"log_p": np.log(p), "log_q": np.log1p(-p), "log_prior": np.log(prior),
            "binarize": binarize}


def _score_bernoulli_nb(st, X):
    B = (X > st["binarize"]).astype(np.float64)
    joint = B @ st["log_p"].T + (1 - B) @ st["log_q"].T + st["log_prior"][None, :]
    return np.exp(joint[:, 1] - logsumexp(joint, axis=1))


def _score_knn(st, X):
    Xt, yt, k = st["X"], st["y"], st["k"]
    k = min(k, len(Xt))
    d2 = (np.sum(X ** 2, axis=1)[:, None] - 2 * X @ Xt.T + np.sum(Xt ** 2, axis=1)[None, :])
    # stable sort: equidistant neighbours resolved by training-row order
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return yt[nn].mean(axis=1)


def _fit_logreg(X, y, lr, iters, l2):
    n, d = X.shape
    w, b = np.zeros(d), 0.0
    for _ in range(int(iters)):
        r = expit(X @ w + b) - y
        w -= lr * (X.T @ r / n + l2 * w)
        b -= lr * float(r.mean())
    return {"w": w, "b": b}


def _best_split(X, y):
    """Gini-optimal (feature, threshold) or None.  Ties: lowest feature, then lowest threshold."""
    n = len(y)
    n_pos = y.sum()
    parent = n * 2 * (n_pos / n) * (1 - n_pos / n)
    best = (parent - 1e-12, None, None)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        valid = np.flatnonzero(xs[1:] != xs[:-1])  # split after position i
        if valid.size == 0:
            continue
        n_l = valid + 1.0
        pos_l = np.cumsum(ys)[valid]
        n_r = n - n_l
        pos_r = n_pos - pos_l
        imp = 2 * pos_l * (1 - pos_l / n_l) + 2 * pos_r * (1 - pos_r / n_r)
        i = int(np.argmin(imp))
        if imp[i] < best[0]:
            best = (imp[i], j, 0.5 * (xs[valid[i]] + xs[valid[i] + 1]))
    return None if best[1] is None else (best[1], best[2])


def _fit_tree(X, y, max_depth, min_split):
    feat, thr, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feat)
        feat.append(-1), thr.append(0.0), left.append(-1), right.append(-1)
        value.append(float(y[idx].mean()))
        yi = y[idx]
        if depth >= max_depth or len(idx) < min_split or yi.min() == yi.max():
            return node
        split = _best_split(X[idx], yi)
        if split is None:
            return node
        j, t = split
        go_left = X[idx, j] <= t
        feat[node], thr[node] = j, t
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return {"feature": np.array(feat), "threshold": np.array(thr), "left": np.array(left),
            "right": np.array(right), "value": np.array(value)}


def _score_tree(st, X):
    node = np.zeros(len(X), dtype=int)
    while True:
        f = st["feature"][node]
        active = f >= 0
        if not active.any():
            return st["value"][node]
        rows = np.flatnonzero(active)
        go_left = X[rows, f[active]] <= st["threshold"][node[active]]
        node[rows] = np.where(go_left, st["left"][node[active]], st["right"][node[active]])


def tree_depth(model: FittedClassifier) -> int:
    st = model.state

    def depth(i):
        if st["feature"][i] < 0:
            return 0
        return 1 + max(depth(st["left"][i]), depth(st["right"][i]))
    return depth(0)


def fit(kind: str, X, y, **params) -> FittedClassifier:
    kind = ALIASES.get(kind, kind)
    if kind not in DEFAULTS:
        raise ValueError(f"unknown classifier {kind!r}; choose from {list(KINDS)}")
    unknown = set(params) - set(DEFAULTS[kind])
    if unknown:
        raise ValueError(f"unknown {kind} parameters: {sorted(unknown)}")
    hp = {**DEFAULTS[kind], **params}
    if any(v <= 0 for v in hp.values()) and kind != "bernoulli_nb":
        raise ValueError(f"{kind} hyperparameters must be positive: {hp}")
    X, y = _check_xy(X, y)
    if kind == "gaussian_nb":
        st = _fit_gaussian_nb(X, y, hp["var_smoothing"])
    elif kind == "bernoulli_nb":
        st = _fit_bernoulli_nb(X, y, hp["binarize"], hp["laplace"])
    elif kind == "knn":
        st = {"X": X.copy(), "y": y.astype(np.float64), "k": int(hp["k"])}
    elif kind == "logistic_regression":
        st = _fit_logreg(X, y, hp["lr"], hp["iters"], hp["l2"])
    else:
        st = _fit_tree(X, y, int(hp["max_depth"]), int(hp["min_split"]))
    for v in st.values():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return FittedClassifier(kind, hp, X.shape[1], st)


def score(model: FittedClassifier, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected width {model.n_features}, got shape {X.shape}")
    st = model.state
    if model.kind == "gaussian_nb":
        s = _score_gaussian_nb(st, X)
    elif model.kind == "bernoulli_nb":
        s = _score_bernoulli_nb(st, X)
    elif model.kind == "knn":
        s = _score_knn(st, X)
    elif model.kind == "logistic_regression":
        s = expit(X @ st["w"] + st["b"])
    else:
        s = _score_tree(st, X)
    return np.clip(s, 0.0, 1.0)


def predict(model: FittedClassifier, X, threshold: float = 0.5) -> np.ndarray:
    return (score(model, X) >= threshold).astype(int)
