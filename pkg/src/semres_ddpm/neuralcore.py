"""Small float64 neural substrate with hand-written backpropagation.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in ``backward`` until ``zero_grad`` is
called.  Only the fixed topologies used by the denoisers are supported.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward pass or a gradient."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


class Parameter:
    """A trainable array together with its gradient accumulator."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Module:
    """Base class: subclasses register parameters and child modules."""

    training = True

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix + key + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        """Non-trainable state (BN running statistics), in a stable order."""
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.extend(val.named_buffers(prefix + key + "."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_buffers(f"{prefix}{key}.{i}."))
        return out

    def state_dict(self) -> list[tuple[str, np.ndarray]]:
        return ([(n, p.value) for n, p in self.named_parameters()]
                + self.named_buffers())

    def load_state_dict(self, state):
        state = dict(state)
        own = self.state_dict()
        missing = [n for n, _ in own if n not in state]
        if missing or len(state) != len(own):
            raise ValueError(f"state mismatch; missing {missing[:5]}")
        for n, arr in own:
            src = np.asarray(state[n], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


class Linear(Module):
    """Affine map ``Y = X W^T + b`` with ``W`` of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out = d_in, d_out
        self.W = Parameter(glorot_uniform(rng, d_in, d_out))
        self.b = Parameter(np.zeros(d_out)) if bias else None
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"Linear expects (n, {self.d_in}) input, got {x.shape}")
        self._x = x
        y = x @ self.W.value.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if dy.shape != (self._x.shape[0], self.d_out):
            raise ValueError(f"Linear backward expects {(self._x.shape[0], self.d_out)}, got {dy.shape}")
        self.W.grad += dy.T @ self._x
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value


class BatchNorm(Module):
    """Batch normalisation over the rows of a 2-D batch.

    Train mode normalises with the batch statistics (biased variance) and
    updates running statistics with the unbiased variance; eval mode uses
    the running statistics.
    """

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.d = d
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self._cache = None

    def named_buffers(self, prefix: str = ""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"BatchNorm expects (n, {self.d}) input, got {x.shape}")
        if self.training:
            n = x.shape[0]
            if n < 2:
                raise ValueError("BatchNorm in train mode needs a batch of at least 2 rows")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            # in place so buffer views handed out by state_dict stay live
            self.running_mean *= 1 - m
            self.running_mean += m * mean
            self.running_var *= 1 - m
            self.running_var += m * var * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv_std, was_training = self._cache
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        if not was_training:
            return dxhat * inv_std
        n = dy.shape[0]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                                - xhat * (dxhat * xhat).sum(axis=0))


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


class Sigmoid(Module):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, max-subtracted."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Backward of softmax over the last axis given its output ``y``."""
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


class Adam:
    """Adam with bias correction.  Refuses non-finite gradients.

    All parameters are packed into one flat buffer (each Parameter keeps a
    view into it) so a step is a handful of whole-array operations.
    """

    def __init__(self, params: list[Parameter] | list[tuple[str, Parameter]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        named = [p if isinstance(p, tuple) else (p.name or f"param{i}", p)
                 for i, p in enumerate(params)]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        sizes = [p.value.size for p in self.params]
        self._bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        total = int(self._bounds[-1])
        self.flat = np.empty(total)
        self.flat_grad = np.empty(total)
        for p, a, b in zip(self.params, self._bounds[:-1], self._bounds[1:]):
            self.flat[a:b] = p.value.reshape(-1)
            self.flat_grad[a:b] = p.grad.reshape(-1)
            p.value = self.flat[a:b].reshape(p.value.shape)
            p.grad = self.flat_grad[a:b].reshape(p.grad.shape)
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.t = 0

    def zero_grad(self):
        self.flat_grad[...] = 0.0

    def step(self):
        g = self.flat_grad
        if not np.all(np.isfinite(g)):
            bad = next(n for n, p in zip(self.names, self.params) if not np.all(np.isfinite(p.grad)))
            raise NonFiniteError(f"non-finite gradient for parameter {bad!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * g
        self.v *= b2
        self.v += (1 - b2) * (g * g)
        step_size = self.lr / (1.0 - b1 ** self.t)
        denom = np.sqrt(self.v / (1.0 - b2 ** self.t))
        denom += self.eps
        self.flat -= step_size * self.m / denom


def adam_step(state: Adam, params=None, grads=None):
    """Functional wrapper: optionally load ``grads`` then take one Adam step."""
    if grads is not None:
        for p, g in zip(state.params, grads):
            p.grad[...] = g
    state.step()
    return [p.value for p in state.params]


def grad_check(model: Module, x: np.ndarray, loss_fn, h: float = 1e-5,
               max_params: int = 20000, check_input: bool = True, args: tuple = (),
               floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(y)`` must return ``(loss, dloss/dy)``.  The model's
    forward/backward are used for the analytic side; ``args`` are passed to
    ``forward`` after the input (e.g. a timestep).  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; raising ``floor`` above round-off
    lets structurally-zero gradients (e.g. a bias feeding train-mode batch
    norm) pass.
    """
    if model.n_parameters() > max_params:
        raise ValueError(f"model has {model.n_parameters()} parameters, cap is {max_params}")

    model.zero_grad()
    y = model.forward(x, *args)
    _, dy = loss_fn(y)
    dx = model.backward(dy)

    def f():
        return loss_fn(model.forward(x, *args))[0]

    worst = 0.0
    # BN running stats must not drift while probing
    stats = [(m, m.running_mean.copy(), m.running_var.copy())
             for m in model.modules() if isinstance(m, BatchNorm)]

    def restore():
        for m, rm, rv in stats:
            m.running_mean[...] = rm
            m.running_var[...] = rv

    for p in model.parameters():
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            restore()
            flat[i] = old - h
            fm = f()
            restore()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    if check_input:
        xf = x.reshape(-1)
        for i in range(xf.size):
            old = xf[i]
            xf[i] = old + h
            fp = f()
            restore()
            xf[i] = old - h
            fm = f()
            restore()
            xf[i] = old
            num = (fp - fm) / (2 * h)
            a = dx.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst
