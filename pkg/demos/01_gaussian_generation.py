"""Fit a diffusion model to a 2-D Gaussian blob and look at what comes out.

Runs in well under a minute on one CPU core.
"""
import numpy as np

from semres_ddpm import trainer
from semres_ddpm.diffusion import sample

rng = np.random.default_rng(100)
X = np.clip(0.5 + 0.15 * rng.standard_normal((500, 2)), 0, 1)  # the "minority class"
print("real     mean", X.mean(0).round(3), "std", X.std(0).round(3))

# desk-scale training: 100 diffusion steps, 3000 Adam iterations
cfg = trainer.TrainConfig(arch="semst", T=100, iterations=3000, seed=0,
                          arch_config={"d_hidden": 64, "n_blocks": 2})
ckpt = trainer.train(X, cfg)
sm = trainer.smoothed(ckpt.loss_trace)
print(f"loss: first {sm[0]:.3f}  last {sm[-1]:.3f}")

# ancestral sampling from pure noise
S = sample(ckpt.build_denoiser(), 2000, 2, ckpt.build_schedule(), np.random.default_rng(0))
print("sampled  mean", S.mean(0).round(3), "std", S.std(0).round(3))

# a crude text histogram of feature 0, real vs generated
edges = np.linspace(0, 1, 11)
hr = np.histogram(X[:, 0], edges)[0] / len(X)
hs = np.histogram(np.clip(S[:, 0], 0, 1), edges)[0] / len(S)
for lo, a, b in zip(edges, hr, hs):
    print(f"{lo:.1f} {'#' * int(100 * a):<30s} {'*' * int(100 * b)}")
