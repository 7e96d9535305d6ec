"""Denoiser training on an encoded minority matrix, and portable checkpoints.

A checkpoint on disk is a directory with ``meta.json`` and ``weights.bin``
(little-endian float64, concatenated in manifest order).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoisers import Denoiser, build_denoiser
from .diffusion import NoiseSchedule, linear_schedule, scaled_linear_schedule, simple_loss
from .neuralcore import Adam, NonFiniteError

log = logging.getLogger(__name__)

FORMAT_MAGIC = "semres-ddpm-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(NonFiniteError):
    def __init__(self, iteration: int, msg: str = ""):
        super().__init__(f"training diverged at iteration {iteration}: {msg}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    iterations: int = 20000
    T: int = 1000
    batch_size: int | None = None  # None -> min(64, n)
    lr: float = 1e-3
    seed: int = 0
    arch: str = "semst"
    arch_config: dict = field(default_factory=dict)
    beta_start: float | None = None  # None -> 1e-4 * 1000/T
    beta_end: float | None = None  # None -> 0.02 * 1000/T

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two rows)")

    def schedule(self) -> NoiseSchedule:
        if self.beta_start is None and self.beta_end is None:
            return scaled_linear_schedule(self.T)
        base = scaled_linear_schedule(self.T)
        return linear_schedule(self.T,
                               base.beta_start if self.beta_start is None else self.beta_start,
                               base.beta_end if self.beta_end is None else self.beta_end)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(eq=False)
class Checkpoint:
    kind: str
    arch_config: dict
    state: list  # ordered (name, array) pairs: parameters then BN buffers
    schedule: dict
    seed: int
    final_loss: float
    normalizer: dict | None = None
    schema_fingerprint: str | None = None
    train_config: dict | None = None
    loss_trace: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        meta_eq = (self.kind, self.arch_config, self.schedule, self.seed, self.normalizer,
                   self.schema_fingerprint, self.train_config) == (
            other.kind, other.arch_config, other.schedule, other.seed, other.normalizer,
            other.schema_fingerprint, other.train_config)
        same_loss = (np.float64(self.final_loss).tobytes()
                     == np.float64(other.final_loss).tobytes())
        if not (meta_eq and same_loss and len(self.state) == len(other.state)):
            return False
        return all(na == nb and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for (na, a), (nb, b) in zip(self.state, other.state))

    @property
    def n_values(self) -> int:
        return sum(a.size for _, a in self.state)

    def build_schedule(self) -> NoiseSchedule:
        return linear_schedule(self.schedule["T"], self.schedule["beta_start"],
                               self.schedule["beta_end"])

    def build_denoiser(self) -> Denoiser:
        net = build_denoiser(self.kind, self.arch_config)
        net.load_state_dict(self.state)
        return net.eval()


def default_arch_config(arch: str, d_in: int, overrides: dict | None = None) -> dict:
    cfg = {"d_in": d_in}
    if arch == "semst":
        cfg.update(d_hidden=128, n_blocks=2, n_tokens=8, n_heads=2)
    elif arch == "mlp":
        cfg.update(hidden_widths=[128, 128])
    cfg.update(overrides or {})
    cfg["d_in"] = d_in
    return cfg


def train(minority_matrix: np.ndarray, config: TrainConfig, normalizer: dict | None = None,
          schema_fingerprint: str | None = None, callback=None) -> Checkpoint:
    """Fit a denoiser to ``minority_matrix`` with the simplified diffusion loss.

    Each iteration draws a minibatch of rows, one uniform step per row and
    fresh Gaussian noise, then takes one Adam step.  Fully determined by
    ``config.seed``.
    """
    X = np.asarray(minority_matrix, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two rows to train")
    if X.min() < -1e-12 or X.max() > 1 + 1e-12:
        raise ValueError("training matrix must lie in [0, 1]")
    batch = config.batch_size or min(64, n)
    replace = batch > n
    if replace:
        warnings.warn(f"batch_size {batch} > {n} rows; sampling with replacement", stacklevel=2)

    schedule = config.schedule()
    arch_cfg = default_arch_config(config.arch, d, config.arch_config)
    rng = np.random.default_rng(config.seed)
    init_seed = int(rng.integers(2**31))
    net = build_denoiser(config.arch, arch_cfg, seed=init_seed)
    net.train()
    opt = Adam(net.named_parameters(), lr=config.lr)

    trace = np.empty(config.iterations)
    for it in range(config.iterations):
        idx = rng.choice(n, size=batch, replace=replace)
        t = rng.integers(1, schedule.T + 1, size=batch)
        eps = rng.standard_normal((batch, d))
        try:
            loss, g = simple_loss(net, X[idx], t, eps, schedule, return_grad=True)
            opt.zero_grad()
            net.backward(g)
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDivergedError(it, str(exc)) from exc
        trace[it] = loss
        if callback is not None:
            callback(it, loss)
    log.debug("trained %s for %d steps, final loss %.4f", config.arch, config.iterations, trace[-1])

    return Checkpoint(
        kind=config.arch,
        arch_config=arch_cfg,
        state=[(name, arr.copy()) for name, arr in net.state_dict()],
        schedule=schedule.params(),
        seed=config.seed,
        final_loss=float(trace[-1]),
        normalizer=normalizer,
        schema_fingerprint=schema_fingerprint,
        train_config=config.to_dict(),
        loss_trace=trace,
    )


def smoothed(trace: np.ndarray, factor: float = 0.99) -> np.ndarray:
    """Exponential moving average used when reporting losses."""
    out = np.empty_like(trace)
    acc = trace[0]
    for i, v in enumerate(trace):
        acc = factor * acc + (1 - factor) * v if i else v
        out[i] = acc
    return out


def save(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = [{"name": n, "shape": list(a.shape)} for n, a in checkpoint.state]
    meta = {
        "format": FORMAT_MAGIC,
        "version": FORMAT_VERSION,
        "architecture": {"kind": checkpoint.kind, "config": checkpoint.arch_config},
        "schedule": checkpoint.schedule,
        "normalizer": checkpoint.normalizer,
        "schema_fingerprint": checkpoint.schema_fingerprint,
        "seed": checkpoint.seed,
        # repr-exact float survives the JSON roundtrip
        "final_loss": checkpoint.final_loss,
        "train_config": checkpoint.train_config,
        "n_values": checkpoint.n_values,
        "manifest": manifest,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in checkpoint.state)
    (path / "weights.bin").write_bytes(blob)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata in {path}: {exc}") from exc
    if meta.get("format") != FORMAT_MAGIC:
        raise CheckpointError(f"not a checkpoint (format tag {meta.get('format')!r})")
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
    manifest = meta["manifest"]
    declared = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in manifest)
    if declared != meta.get("n_values", declared):
        raise CheckpointError("manifest shapes disagree with declared value count")
    blob = (path / "weights.bin").read_bytes()
    if len(blob) % 8:
        raise CheckpointError("truncated weights file")
    have = len(blob) // 8
    if have != declared:
        raise CheckpointError(f"parameter count mismatch: meta declares {declared}, weights hold {have}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    state, off = [], 0
    for e in manifest:
        size = int(np.prod(e["shape"], dtype=np.int64))
        state.append((e["name"], flat[off:off + size].reshape(e["shape"]).copy()))
        off += size
    arch = meta["architecture"]
    ckpt = Checkpoint(kind=arch["kind"], arch_config=arch["config"], state=state,
                      schedule=meta["schedule"], seed=meta["seed"], final_loss=meta["final_loss"],
                      normalizer=meta.get("normalizer"),
                      schema_fingerprint=meta.get("schema_fingerprint"),
                      train_config=meta.get("train_config"))
    expected = build_denoiser(ckpt.kind, ckpt.arch_config).state_dict()
    if [n for n, _ in expected] != [n for n, _ in state] or \
            sum(a.size for _, a in expected) != declared:
        raise CheckpointError("parameter layout does not match the declared architecture")
    return ckpt
