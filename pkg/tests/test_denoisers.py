import numpy as np
import pytest

from semres_ddpm.denoisers import (FCBlock, MLPDenoiser, MlpConfig, MultiHeadSelfAttention, SemstBlock,
                                   SemstConfig, SemstResNet, SoftThreshold, build_denoiser,
                                   timestep_embed)
from semres_ddpm.neuralcore import Module, grad_check

from conftest import linear_loss, weighted_sq_loss


def randomize_bn(net, rng):
    """Give every BN layer non-trivial running stats and affine params."""
    from semres_ddpm.neuralcore import BatchNorm
    for m in net.modules():
        if isinstance(m, BatchNorm):
            m.running_mean[...] = rng.normal(0, 0.3, m.d)
            m.running_var[...] = rng.uniform(0.5, 2.0, m.d)
            m.gamma.value[...] = rng.uniform(0.5, 1.5, m.d)
            m.beta.value[...] = rng.normal(0, 0.3, m.d)


class WithT(Module):
    """Adapter so grad_check can drive a (x, t) network with a fixed t."""

    def __init__(self, net, t):
        self.net, self.t = net, t

    def forward(self, x):
        return self.net.forward(x, self.t)

    def backward(self, dy):
        return self.net.backward(dy)


def test_config_validation():
    with pytest.raises(ValueError):
        SemstConfig(d_in=2, d_hidden=10, n_tokens=4)
    with pytest.raises(ValueError):
        SemstConfig(d_in=2, d_hidden=8, n_tokens=4, n_heads=3)
    with pytest.raises(ValueError):
        SemstConfig(d_in=2, n_blocks=0)
    with pytest.raises(ValueError):
        MlpConfig(d_in=2, hidden_widths=[])
    c = SemstConfig(d_in=3, d_hidden=16, n_tokens=4, n_heads=2)
    assert (c.d_tok, c.d_head) == (4, 2)


def test_timestep_embed():
    np.testing.assert_array_equal(timestep_embed(0, 2), [0.0, 1.0])
    e = timestep_embed(np.arange(1, 50), 16)
    assert e.shape == (49, 16) and np.all(np.abs(e) <= 1)
    assert abs(np.linalg.norm(timestep_embed(1, 7)) - np.linalg.norm(timestep_embed(2, 7))) > 0
    np.testing.assert_allclose(timestep_embed(3, 6)[2:4],
                               [np.sin(3 / 10000 ** (2 / 6)), np.cos(3 / 10000 ** (2 / 6))])


def test_fc_block_nonnegative_and_identity(rng):
    assert np.all(FCBlock(4, 4, rng)(rng.standard_normal((6, 4))) >= 0)
    fc = FCBlock(4, 4, rng)  # fresh: running stats still (0, 1)
    fc.linear.W.value[...] = np.eye(4)
    fc.eval()
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(fc(x), np.maximum(x, 0) / np.sqrt(1 + 1e-5))


def test_fc_block_grad(rng):
    fc = FCBlock(8, 6, rng)
    randomize_bn(fc, rng)
    fc.eval()
    assert grad_check(fc, rng.standard_normal((4, 8)), linear_loss()) < 1e-4


def test_soft_threshold_range_and_half(rng):
    y = SoftThreshold(5, rng)(rng.normal(0, 5, (7, 5)))
    assert np.all((y > 0) & (y < 1))
    st = SoftThreshold(5, rng)
    st.linear.W.value[...] = 0
    st.eval()
    np.testing.assert_array_equal(st(rng.standard_normal((3, 5))), 0.5)


def test_soft_threshold_rows_independent(rng):
    st = SoftThreshold(4, rng).eval()
    x = rng.standard_normal((5, 4))
    np.testing.assert_allclose(st(x)[2:3], st(x[2:3]))


def test_soft_threshold_grad(rng):
    st = SoftThreshold(6, rng)
    randomize_bn(st, rng)
    st.eval()
    assert grad_check(st, rng.standard_normal((4, 6)), weighted_sq_loss()) < 1e-4


def test_mhsa_single_token_is_value_projection(rng):
    a = MultiHeadSelfAttention(1, 4, 2, rng)
    x = rng.standard_normal((3, 4))
    Wv = np.concatenate(list(a.Wv.value), axis=1)
    np.testing.assert_allclose(a(x), x @ Wv @ a.Wo.value, atol=1e-12)


def test_mhsa_identical_tokens(rng):
    a = MultiHeadSelfAttention(4, 3, 1, rng)
    tok = rng.standard_normal(3)
    y = a(np.tile(tok, 4)[None]).reshape(4, 3)
    np.testing.assert_allclose(y, np.tile(y[0], (4, 1)), atol=1e-14)


def test_mhsa_hand_case():
    a = MultiHeadSelfAttention(2, 1, 1, np.random.default_rng(0))
    for W in (a.Wq, a.Wk, a.Wv, a.Wo):
        W.value[...] = 1.0
    np.testing.assert_array_equal(a(np.zeros((1, 2))), [[0.0, 0.0]])
    # tokens (1, 3): scores q*k = [[1,3],[3,9]], output = softmax-weighted values
    y = a(np.array([[1.0, 3.0]]))
    w0 = np.exp([1, 3]) / np.exp([1, 3]).sum()
    w1 = np.exp([3, 9]) / np.exp([3, 9]).sum()
    np.testing.assert_allclose(y, [[w0 @ [1, 3], w1 @ [1, 3]]])


def test_mhsa_row_permutation(rng):
    a = MultiHeadSelfAttention(4, 4, 2, rng)
    x = rng.standard_normal((5, 16))
    perm = rng.permutation(5)
    np.testing.assert_allclose(a(x)[perm], a(x[perm]), atol=1e-14)


@pytest.mark.parametrize("n_tokens,d_tok,heads", [(4, 4, 2), (2, 6, 3), (1, 4, 1), (8, 2, 1)])
def test_mhsa_grad(rng, n_tokens, d_tok, heads):
    a = MultiHeadSelfAttention(n_tokens, d_tok, heads, rng)
    assert grad_check(a, rng.standard_normal((3, n_tokens * d_tok)), weighted_sq_loss()) < 1e-4


def test_block_residual_identity(rng):
    cfg = SemstConfig(d_in=2, d_hidden=16, n_tokens=4, n_heads=2)
    blk = SemstBlock(cfg, rng).eval()
    x = rng.standard_normal((5, 16))
    np.testing.assert_array_equal(blk(x) - x, (x + blk.residual(x)) - x)
    assert blk(x).shape == x.shape


def test_block_grad(rng):
    cfg = SemstConfig(d_in=2, d_hidden=16, n_tokens=4, n_heads=2)
    blk = SemstBlock(cfg, rng)
    randomize_bn(blk, rng)
    blk.eval()
    assert grad_check(blk, rng.standard_normal((4, 16)), linear_loss(3)) < 1e-4


def test_semst_full_grad_eval(rng):
    net = SemstResNet(SemstConfig(d_in=4, d_hidden=8, n_blocks=1, n_tokens=2, n_heads=2), rng)
    randomize_bn(net, rng)
    net.eval()
    assert grad_check(WithT(net, 7), rng.standard_normal((5, 4)), weighted_sq_loss()) < 1e-4


def test_semst_full_grad_train_mode(rng):
    # biases feeding a train-mode BN have exactly zero gradient; the floor keeps
    # their finite-difference round-off (~ulp(loss)/h, about 1e-10) from counting
    net = SemstResNet(SemstConfig(d_in=3, d_hidden=8, n_blocks=2, n_tokens=2, n_heads=1), rng)
    t = rng.integers(1, 50, size=6)
    assert grad_check(WithT(net, t), rng.standard_normal((6, 3)), weighted_sq_loss(),
                      floor=1e-5) < 1e-4


def test_mlp_grad(rng):
    net = MLPDenoiser(MlpConfig(d_in=3, hidden_widths=[8, 6]), rng)
    x = rng.standard_normal((4, 3))
    assert grad_check(WithT(net, 3), x, weighted_sq_loss()) < 1e-4


def test_mlp_zero_weights_gives_bias(rng):
    net = MLPDenoiser(MlpConfig(d_in=3, hidden_widths=[5]), rng)
    for p in net.parameters():
        p.value[...] = 0
    net.out.b.value[...] = [1, -2, 3]
    np.testing.assert_array_equal(net(rng.standard_normal((4, 3)), 9), np.tile([1, -2, 3], (4, 1)))


@pytest.mark.parametrize("kind,cfg", [
    ("semst", {"d_in": 5, "d_hidden": 16, "n_tokens": 4, "n_heads": 2}),
    ("mlp", {"d_in": 5, "hidden_widths": [12]}),
])
def test_shape_preserving_and_signed(kind, cfg, rng):
    net = build_denoiser(kind, cfg, seed=1)
    for t in (1, 50, np.arange(1, 8)):
        y = net(rng.standard_normal((7, 5)), t)
        assert y.shape == (7, 5)
    assert (y < 0).any()
    with pytest.raises(ValueError):
        net(rng.standard_normal((7, 4)), 1)
    with pytest.raises(ValueError):
        net(rng.standard_normal((7, 5)), np.arange(3))


def test_build_unknown_kind():
    with pytest.raises(ValueError):
        build_denoiser("unet", {"d_in": 2})


def test_same_seed_same_init():
    a = build_denoiser("semst", {"d_in": 3, "d_hidden": 16}, seed=4)
    b = build_denoiser("semst", {"d_in": 3, "d_hidden": 16}, seed=4)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.state_dict(), b.state_dict()))
