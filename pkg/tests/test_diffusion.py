import math

import numpy as np
import pytest

from semres_ddpm.diffusion import (linear_schedule, p_mean, p_sample_step, q_sample, reverse_chain,
                                   sample, scaled_linear_schedule, simple_loss)
from semres_ddpm.neuralcore import NonFiniteError


class Oracle:
    """Returns a fixed noise matrix regardless of input."""

    def __init__(self, eps):
        self.eps = eps

    def __call__(self, x, t):
        return self.eps


class Zero:
    def __call__(self, x, t):
        return np.zeros_like(x)


def test_single_step_schedule():
    s = linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])
    np.testing.assert_array_equal(s.beta_tilde, [0.0])


def test_default_schedule_terminal():
    s = linear_schedule()
    assert s.T == 1000 and s.alpha_bar[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.beta_tilde[0] == 0.0
    assert np.all((s.beta > 0) & (s.beta < 1))


def test_schedule_posterior_variance_formula():
    s = linear_schedule(10, 0.01, 0.2)
    ab_prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    np.testing.assert_allclose(s.beta_tilde, s.beta * (1 - ab_prev) / (1 - s.alpha_bar), rtol=1e-15)


def test_schedule_errors_and_immutability():
    with pytest.raises(ValueError):
        linear_schedule(10, 0.1, 0.05)
    with pytest.raises(ValueError):
        linear_schedule(0)
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5


def test_scaled_schedule():
    s = scaled_linear_schedule(100)
    assert (s.beta_start, s.beta_end) == pytest.approx((1e-3, 0.2))
    assert s.alpha_bar[-1] < 1e-4
    assert scaled_linear_schedule(1000).params() == linear_schedule().params()


def test_q_sample_hand_value():
    s = linear_schedule(1, 0.75, 0.75)  # alpha_bar_1 = 0.25
    out = q_sample(np.array([[1.0]]), 1, np.array([[2.0]]), s)
    assert abs(out[0, 0] - 2.2320508) < 1e-7
    assert abs(out[0, 0] - (0.5 + math.sqrt(0.75) * 2)) < 1e-12


def test_q_sample_zero_noise_and_per_row_t():
    s = linear_schedule(50)
    S0 = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(q_sample(S0, 7, np.zeros_like(S0), s), math.sqrt(s.alpha_bar[6]) * S0)
    t = np.array([1, 10, 50])
    np.testing.assert_allclose(q_sample(S0, t, np.zeros_like(S0), s),
                               np.sqrt(s.alpha_bar[t - 1])[:, None] * S0)
    with pytest.raises(ValueError):
        q_sample(S0, 51, S0, s)


def test_q_sample_monte_carlo_moments():
    s = linear_schedule()
    t, x0 = 300, 0.8
    eps = np.random.default_rng(0).standard_normal((10_000, 1))
    St = q_sample(np.full((10_000, 1), x0), t, eps, s)
    ab = s.alpha_bar[t - 1]
    sigma = math.sqrt(1 - ab)
    assert abs(St.mean() - math.sqrt(ab) * x0) < 4 * sigma / 100
    assert abs(St.var() / (1 - ab) - 1) < 0.05


def test_simple_loss_cases(rng):
    s = linear_schedule(20)
    S0 = rng.random((4, 3))
    eps = rng.standard_normal((4, 3))
    t = rng.integers(1, 21, 4)
    assert simple_loss(Oracle(eps), S0, t, eps, s) == 0.0
    signs = np.where(rng.random((4, 3)) < 0.5, -1.0, 1.0)
    assert simple_loss(Zero(), S0, t, signs, s) == 1.0


def test_simple_loss_brute_force(rng):
    s = linear_schedule(30)
    S0, eps = rng.random((3, 2)), rng.standard_normal((3, 2))
    t = np.array([2, 15, 30])

    def den(x, tt):
        return np.sin(x) * np.asarray(tt)[:, None] / 30

    total = 0.0
    for i in range(3):
        ab = s.alpha_bar[t[i] - 1]
        for j in range(2):
            xt = math.sqrt(ab) * S0[i, j] + math.sqrt(1 - ab) * eps[i, j]
            total += (eps[i, j] - math.sin(xt) * t[i] / 30) ** 2
    assert abs(simple_loss(den, S0, t, eps, s) - total / 6) < 1e-14


def test_simple_loss_permutation_invariant(rng):
    s = linear_schedule(30)
    S0, eps = rng.random((6, 2)), rng.standard_normal((6, 2))
    t = rng.integers(1, 31, 6)

    def den(x, tt):
        return x * 0.3 + np.asarray(tt)[:, None] * 0.01

    p = rng.permutation(6)
    assert simple_loss(den, S0, t, eps, s) == pytest.approx(simple_loss(den, S0[p], t[p], eps[p], s),
                                                            abs=1e-15)


def test_simple_loss_nonfinite_and_shapes(rng):
    s = linear_schedule(5)
    with pytest.raises(NonFiniteError):
        simple_loss(lambda x, t: np.full_like(x, np.inf), np.zeros((2, 2)), np.array([1, 2]),
                    np.zeros((2, 2)), s)
    with pytest.raises(ValueError):
        simple_loss(Zero(), np.zeros((2, 2)), np.array([1, 2, 3]), np.zeros((2, 2)), s)


def test_t1_oracle_inversion(rng):
    s = linear_schedule(100)
    S0 = rng.random((5, 3))
    eps = rng.standard_normal((5, 3))
    S1 = q_sample(S0, 1, eps, s)
    out = p_sample_step(Oracle(eps), S1, 1, s, rng)
    assert np.max(np.abs(out - S0)) < 1e-10


def test_p_mean_hand_value():
    s = linear_schedule(3, 0.1, 0.3)  # beta_2 = 0.2, alpha_bar_2 = 0.9 * 0.8 = 0.72
    mu = p_mean(lambda x, t: np.array([[0.5]]), np.array([[1.0]]), 2, s)
    expected = (1.0 - 0.2 / math.sqrt(1 - 0.72) * 0.5) / math.sqrt(0.8)
    assert abs(mu[0, 0] - expected) < 1e-12


def test_sample_determinism_and_shape():
    s = linear_schedule(20)
    den = lambda x, t: 0.1 * x
    a = sample(den, 7, 3, s, np.random.default_rng(5))
    b = sample(den, 7, 3, s, np.random.default_rng(5))
    assert a.shape == (7, 3) and np.array_equal(a, b)
    c = sample(den, 7, 3, s, np.random.default_rng(5), batch_size=3)
    assert c.shape == (7, 3)


def test_reverse_chain_reports_step():
    s = linear_schedule(10)

    def bad(x, t):
        return np.full_like(x, np.nan) if t == 4 else np.zeros_like(x)
    with pytest.raises(NonFiniteError, match="t=4"):
        reverse_chain(bad, np.zeros((2, 2)), 10, s, np.random.default_rng(0))


def test_gaussian_target_exact_denoiser():
    """With the analytic noise predictor for N(m, s^2) data, sampling recovers m and s."""
    sched = linear_schedule(200, 1e-4 * 5, 0.02 * 5)
    m, sd = np.array([0.3, 0.7]), 0.1

    def den(x, t):
        ab = sched.alpha_bar[t - 1]
        var = ab * sd ** 2 + 1 - ab
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * m) / var

    out = sample(den, 20_000, 2, sched, np.random.default_rng(0))
    assert np.all(np.abs(out.mean(0) - m) / m < 0.15)
    assert np.all(np.abs(out.std(0) - sd) / sd < 0.2)
