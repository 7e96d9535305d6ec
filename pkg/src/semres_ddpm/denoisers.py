"""Noise-prediction networks: the residual attention/soft-threshold net and an MLP.

Both map a noised batch ``S_t`` (n x d_in) and an integer step ``t`` to a
predicted noise matrix of the same shape.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .neuralcore import (BatchNorm, Linear, Module, Parameter, ReLU, Sigmoid,
                         check_finite, glorot_uniform, softmax_backward, softmax_rows)


@dataclass
class SemstConfig:
    d_in: int
    d_hidden: int = 128
    n_blocks: int = 2
    n_tokens: int = 8
    n_heads: int = 2

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.d_hidden % self.n_tokens:
            raise ValueError("d_hidden must be divisible by n_tokens")
        if (self.d_hidden // self.n_tokens) % self.n_heads:
            raise ValueError("token width d_hidden/n_tokens must be divisible by n_heads")

    @property
    def d_tok(self) -> int:
        return self.d_hidden // self.n_tokens

    @property
    def d_head(self) -> int:
        return self.d_tok // self.n_heads


@dataclass
class MlpConfig:
    d_in: int
    hidden_widths: list[int] = field(default_factory=lambda: [128, 128])

    def __post_init__(self):
        if not self.hidden_widths:
            raise ValueError("MLP needs at least one hidden layer")
        self.hidden_widths = [int(w) for w in self.hidden_widths]


def timestep_embed(t, d: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` may be a scalar or a 1-D array of steps.

    Entry ``2i`` is ``sin(t / 10000**(2i/d))`` and entry ``2i+1`` the cosine
    at the same frequency.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    i = np.arange((d + 1) // 2)
    freq = 1.0 / 10000.0 ** (2 * i / d)
    ang = t_arr[:, None] * freq[None, :]
    emb = np.empty((t_arr.size, d))
    emb[:, 0::2] = np.sin(ang)[:, : (d + 1) // 2]
    emb[:, 1::2] = np.cos(ang)[:, : d // 2]
    return emb[0] if np.ndim(t) == 0 else emb


class FCBlock(Module):
    """ReLU(BN(Linear(x)))."""

    def __init__(self, d_in, d_out, rng):
        self.linear = Linear(d_in, d_out, rng)
        self.bn = BatchNorm(d_out)
        self.act = ReLU()

    def forward(self, x):
        return self.act.forward(self.bn.forward(self.linear.forward(x)))

    def backward(self, dy):
        return self.linear.backward(self.bn.backward(self.act.backward(dy)))


class SoftThreshold(Module):
    """Sigmoid(BN(Linear(x))): a per-sample threshold strictly inside (0, 1)."""

    def __init__(self, d, rng):
        self.linear = Linear(d, d, rng)
        self.bn = BatchNorm(d)
        self.act = Sigmoid()

    def forward(self, x):
        return self.act.forward(self.bn.forward(self.linear.forward(x)))

    def backward(self, dy):
        return self.linear.backward(self.bn.backward(self.act.backward(dy)))


class MultiHeadSelfAttention(Module):
    """Self-attention across the tokens of a single row.

    Each row of width ``n_tokens * d_tok`` is viewed as a sequence of
    ``n_tokens`` tokens.  Heads use bias-free projections W^Q, W^K, W^V of
    shape (d_tok, d_head); concatenated heads go through W^O (d_tok, d_tok).
    Rows never attend to each other.
    """

    def __init__(self, n_tokens, d_tok, n_heads, rng):
        if d_tok % n_heads:
            raise ValueError("d_tok must be divisible by n_heads")
        self.n_tokens, self.d_tok, self.n_heads = n_tokens, d_tok, n_heads
        self.d_head = d_tok // n_heads
        # (heads, d_tok, d_head); glorot per head
        def proj():
            return np.stack([glorot_uniform(rng, self.d_head, d_tok) for _ in range(n_heads)])
        self.Wq = Parameter(proj())
        self.Wk = Parameter(proj())
        self.Wv = Parameter(proj())
        self.Wo = Parameter(glorot_uniform(rng, d_tok, d_tok).T.copy())
        self._cache = None

    def _cat(self, W):
        # (h, d_tok, d_head) -> (d_tok, h * d_head), heads side by side
        return W.transpose(1, 0, 2).reshape(self.d_tok, self.n_heads * self.d_head)

    def _uncat(self, G):
        return G.reshape(self.d_tok, self.n_heads, self.d_head).transpose(1, 0, 2)

    def _split(self, Z, n):
        # (n*L, h*d_head) -> (n, h, L, d_head)
        return Z.reshape(n, self.n_tokens, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def _merge(self, Z, n):
        return Z.transpose(0, 2, 1, 3).reshape(n * self.n_tokens, self.d_tok)

    def forward(self, x):
        n, d = x.shape
        if d != self.n_tokens * self.d_tok:
            raise ValueError(f"attention expects width {self.n_tokens * self.d_tok}, got {d}")
        T = x.reshape(n * self.n_tokens, self.d_tok)
        Q = self._split(T @ self._cat(self.Wq.value), n)
        K = self._split(T @ self._cat(self.Wk.value), n)
        V = self._split(T @ self._cat(self.Wv.value), n)
        scale = 1.0 / np.sqrt(self.d_head)
        A = softmax_rows((Q @ K.transpose(0, 1, 3, 2)) * scale)
        C = self._merge(A @ V, n)
        out = C @ self.Wo.value
        self._cache = (T, Q, K, V, A, C, scale)
        return out.reshape(n, d)

    def backward(self, dy):
        T, Q, K, V, A, C, scale = self._cache
        n = dy.shape[0]
        dout = dy.reshape(n * self.n_tokens, self.d_tok)
        self.Wo.grad += C.T @ dout
        dH = self._split(dout @ self.Wo.value.T, n)
        dA = dH @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dH
        dS = softmax_backward(A, dA) * scale
        dQ = self._merge(dS @ K, n)
        dK = self._merge(dS.transpose(0, 1, 3, 2) @ Q, n)
        dV = self._merge(dV, n)
        self.Wq.grad += self._uncat(T.T @ dQ)
        self.Wk.grad += self._uncat(T.T @ dK)
        self.Wv.grad += self._uncat(T.T @ dV)
        dT = (dQ @ self._cat(self.Wq.value).T + dK @ self._cat(self.Wk.value).T
              + dV @ self._cat(self.Wv.value).T)
        return dT.reshape(n, -1)


class SemstBlock(Module):
    """Residual block ``x + F(x)`` with ``F(x) = MHSA(FC(x)) - SoftThreshold(FC(x))``."""

    def __init__(self, cfg: SemstConfig, rng):
        d = cfg.d_hidden
        self.fc = FCBlock(d, d, rng)
        self.attn = MultiHeadSelfAttention(cfg.n_tokens, cfg.d_tok, cfg.n_heads, rng)
        self.thresh = SoftThreshold(d, rng)

    def residual(self, x):
        """F(x) alone, without the skip path."""
        h = self.fc.forward(x)
        return self.attn.forward(h) - self.thresh.forward(h)

    def forward(self, x):
        return x + self.residual(x)

    def backward(self, dy):
        dh = self.attn.backward(dy) + self.thresh.backward(-dy)
        return dy + self.fc.backward(dh)


class Denoiser(Module):
    """Common surface for noise predictors: ``forward(S_t, t)`` and ``backward``."""

    kind = ""

    def config_dict(self) -> dict:
        return asdict(self.config)

    def _embed(self, t, n, d):
        t_arr = np.asarray(t)
        if t_arr.ndim == 0:
            return np.broadcast_to(timestep_embed(int(t_arr), d), (n, d))
        if t_arr.shape != (n,):
            raise ValueError(f"expected {n} timesteps, got shape {t_arr.shape}")
        return timestep_embed(t_arr, d)


class SemstResNet(Denoiser):
    """FC-in, time embedding, ``n_blocks`` residual blocks, plain affine out."""

    kind = "semst"

    def __init__(self, config: SemstConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.fc_in = FCBlock(config.d_in, config.d_hidden, rng)
        self.blocks = [SemstBlock(config, rng) for _ in range(config.n_blocks)]
        self.out = Linear(config.d_hidden, config.d_in, rng)

    def forward(self, x, t):
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise ValueError(f"expected (n, {self.config.d_in}) input, got {x.shape}")
        h = self.fc_in.forward(x) + self._embed(t, x.shape[0], self.config.d_hidden)
        for blk in self.blocks:
            h = blk.forward(h)
        return check_finite(self.out.forward(h), "semst forward")

    def backward(self, dy):
        dh = self.out.backward(dy)
        for blk in reversed(self.blocks):
            dh = blk.backward(dh)
        return self.fc_in.backward(dh)


class MLPDenoiser(Denoiser):
    """Linear/ReLU stack; time embedding added after the first hidden layer."""

    kind = "mlp"

    def __init__(self, config: MlpConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        widths = [config.d_in] + list(config.hidden_widths)
        self.hidden = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.acts = [ReLU() for _ in self.hidden]
        self.out = Linear(widths[-1], config.d_in, rng)

    def forward(self, x, t):
        if x.ndim != 2 or x.shape[1] != self.config.d_in:
            raise ValueError(f"expected (n, {self.config.d_in}) input, got {x.shape}")
        h = x
        for i, (lin, act) in enumerate(zip(self.hidden, self.acts)):
            h = act.forward(lin.forward(h))
            if i == 0:
                h = h + self._embed(t, x.shape[0], lin.d_out)
        return check_finite(self.out.forward(h), "mlp forward")

    def backward(self, dy):
        dh = self.out.backward(dy)
        for lin, act in zip(reversed(self.hidden), reversed(self.acts)):
            dh = lin.backward(act.backward(dh))
        return dh


ARCHITECTURES = {"semst": (SemstResNet, SemstConfig), "mlp": (MLPDenoiser, MlpConfig)}


def build_denoiser(kind: str, config: dict | SemstConfig | MlpConfig, seed: int = 0) -> Denoiser:
    if kind not in ARCHITECTURES:
        raise ValueError(f"unknown denoiser kind {kind!r}; choose from {sorted(ARCHITECTURES)}")
    net_cls, cfg_cls = ARCHITECTURES[kind]
    if isinstance(config, dict):
        config = cfg_cls(**config)
    return net_cls(config, np.random.default_rng(seed))
