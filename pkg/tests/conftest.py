import numpy as np
import pytest

from semres_ddpm.dataio import Dataset, FeatureSpec


def weighted_sq_loss(seed=0):
    """Random quadratic loss ``sum(w * y**2) / 2`` so every output coordinate matters."""
    cache = {}

    def loss(y):
        if "w" not in cache:
            cache["w"] = np.random.default_rng(seed).uniform(0.5, 1.5, size=y.shape)
        w = cache["w"]
        return 0.5 * float(np.sum(w * y * y)), w * y
    return loss


def linear_loss(seed=0):
    """``sum(c * y)``: gradient is constant, good for probing sign errors."""
    cache = {}

    def loss(y):
        if "c" not in cache:
            cache["c"] = np.random.default_rng(seed).standard_normal(y.shape)
        return float(np.sum(cache["c"] * y)), cache["c"]
    return loss


def gaussian_fixture(n=500, mean=(0.5, 0.5), std=0.15, seed=100):
    """2-D isotropic Gaussian minority matrix clipped to [0, 1] (3.3 sigma, ~0 rows touched)."""
    rng = np.random.default_rng(seed)
    return np.clip(np.asarray(mean) + std * rng.standard_normal((n, 2)), 0.0, 1.0)


def toy_dataset(n_min=5, n_maj=15, d=2, seed=0, categorical=False):
    rng = np.random.default_rng(seed)
    schema = [FeatureSpec(f"x{j}", "numeric") for j in range(d)]
    rows = [list(rng.normal(1.0, 0.3, d)) for _ in range(n_min)]
    rows += [list(rng.normal(0.0, 0.3, d)) for _ in range(n_maj)]
    if categorical:
        schema.append(FeatureSpec("c", "categorical", ["a", "b", "c"]))
        for i, r in enumerate(rows):
            r.append("abc"[i % 3])
    labels = ["pos"] * n_min + ["neg"] * n_maj
    return Dataset(schema, rows, labels, "pos", "toy")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
