"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict, repeated in the terminal summary.
"""
import math
import time

import numpy as np

from semres_ddpm import harness, metrics, trainer
from semres_ddpm.dataio import KEEL_DATASETS, fit_normalizer, load_keel
from semres_ddpm.denoisers import (FCBlock, MLPDenoiser, MlpConfig, MultiHeadSelfAttention, SemstBlock,
                                   SemstConfig, SemstResNet, SoftThreshold)
from semres_ddpm.diffusion import linear_schedule, p_sample_step, q_sample, sample
from semres_ddpm.neuralcore import BatchNorm, Linear, Module, ReLU, Sigmoid, grad_check
from semres_ddpm.oversamplers import smote

from conftest import gaussian_fixture, linear_loss, report, weighted_sq_loss


class WithT(Module):
    def __init__(self, net, t):
        self.net, self.t = net, t

    def forward(self, x):
        return self.net.forward(x, self.t)

    def backward(self, dy):
        return self.net.backward(dy)


def _shuffle_bn(net, rng):
    for m in net.modules():
        if isinstance(m, BatchNorm):
            m.running_mean[...] = rng.normal(0, 0.3, m.d)
            m.running_var[...] = rng.uniform(0.5, 2.0, m.d)
            m.gamma.value[...] = rng.uniform(0.5, 1.5, m.d)
            m.beta.value[...] = rng.normal(0, 0.3, m.d)
    return net


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    cfg = SemstConfig(d_in=3, d_hidden=8, n_blocks=1, n_tokens=2, n_heads=2)
    cases = {
        "linear": (Linear(5, 3, rng), (4, 5), {}),
        "batchnorm_train": (BatchNorm(5), (6, 5), {}),
        "batchnorm_eval": (_shuffle_bn(BatchNorm(5), rng).eval(), (6, 5), {}),
        "relu": (ReLU(), (4, 5), {}),
        "sigmoid": (Sigmoid(), (4, 5), {}),
        "fc_block": (_shuffle_bn(FCBlock(6, 5, rng), rng).eval(), (4, 6), {}),
        "soft_threshold": (_shuffle_bn(SoftThreshold(5, rng), rng).eval(), (4, 5), {}),
        "attention": (MultiHeadSelfAttention(4, 4, 2, rng), (3, 16), {}),
        "semst_block": (_shuffle_bn(SemstBlock(SemstConfig(d_in=2, d_hidden=8, n_tokens=2, n_heads=2), rng),
                                    rng).eval(), (4, 8), {}),
        "semst_eval": (WithT(_shuffle_bn(SemstResNet(cfg, rng), rng).eval(), 7), (5, 3), {}),
        "semst_train": (WithT(SemstResNet(cfg, rng), rng.integers(1, 50, 6)), (6, 3), {"floor": 1e-5}),
        "mlp": (WithT(MLPDenoiser(MlpConfig(d_in=3, hidden_widths=[8, 6]), rng), 3), (4, 3), {}),
    }
    errs = {}
    for name, (mod, shape, kw) in cases.items():
        x = rng.uniform(-1, 1, shape) + (0.1 if name == "relu" else 0.0)
        loss = linear_loss(1) if name in ("fc_block", "semst_block") else weighted_sq_loss(1)
        errs[name] = grad_check(mod, x, loss, **kw)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed <= 1.0
    assert report(1, ok, f"{len(errs)} modules, worst {worst} rel err {errs[worst]:.2e}, {elapsed:.2f}s"), errs


class _Oracle:
    def __init__(self, eps):
        self.eps = eps

    def __call__(self, x, t):
        return self.eps


def test_criterion_2_diffusion_exactness():
    t0 = time.perf_counter()
    s1 = linear_schedule(1, 0.75, 0.75)
    hand = q_sample(np.array([[1.0]]), 1, np.array([[2.0]]), s1)[0, 0]
    ok_hand = abs(hand - 2.2320508) < 1e-7 and abs(hand - (0.5 + math.sqrt(0.75) * 2)) < 1e-9

    rng = np.random.default_rng(2)
    s = linear_schedule(100)
    S0, eps = rng.random((8, 3)), rng.standard_normal((8, 3))
    inv_err = np.max(np.abs(p_sample_step(_Oracle(eps), q_sample(S0, 1, eps, s), 1, s, rng) - S0))

    sl = linear_schedule()
    moments = []
    for t, x0 in [(1, 0.3), (300, 0.8), (1000, 0.5)]:
        e = np.random.default_rng(t).standard_normal((10_000, 1))
        St = q_sample(np.full((10_000, 1), x0), t, e, sl)
        ab = sl.alpha_bar[t - 1]
        sd = math.sqrt(1 - ab)
        moments.append(abs(St.mean() - math.sqrt(ab) * x0) < 4 * sd / 100
                       and abs(St.var() / (1 - ab) - 1) < 0.05)
    elapsed = time.perf_counter() - t0
    ok = ok_hand and inv_err < 1e-10 and all(moments) and elapsed < 5
    assert report(2, ok, f"hand {hand:.7f}, t=1 inversion err {inv_err:.1e}, "
                         f"moments {sum(moments)}/3 ok, {elapsed:.2f}s")


def test_criterion_3_desk_generation():
    t0 = time.process_time()
    X = gaussian_fixture(500, seed=100)
    cfg = trainer.TrainConfig(arch="semst", T=100, iterations=3000, seed=0,
                              arch_config={"d_hidden": 64, "n_blocks": 2})
    ckpt = trainer.train(X, cfg)
    S = sample(ckpt.build_denoiser(), 2000, 2, ckpt.build_schedule(), np.random.default_rng(0))
    mean_err = np.abs(S.mean(0) - 0.5) / 0.5
    std_err = np.abs(S.std(0) - 0.15) / 0.15
    elapsed = time.process_time() - t0
    ok = bool(np.all(mean_err <= 0.15) and np.all(std_err <= 0.20) and elapsed < 300)
    assert report(3, ok, f"mean err {mean_err.max():.3f} (<=0.15), std err {std_err.max():.3f} (<=0.20), "
                         f"{elapsed:.0f}s CPU")


BENCH_DATASETS = ["abalone9-18", "ecoli-0-vs-1", "yeast-2-vs-4", "newthyroid2", "haberman"]


def test_criterion_4_denoiser_direction():
    cfg = harness.ExperimentConfig(datasets=BENCH_DATASETS, diffusion=harness.desk_diffusion())
    rows = harness.run_denoise_bench(cfg)["results"]
    wins = sum(r["psnr_semst"] > r["psnr_mlp"] for r in rows)
    detail = ", ".join(f"{r['dataset']} {r['psnr_semst']:.2f}/{r['psnr_mlp']:.2f}" for r in rows)
    assert report(4, wins >= 4, f"SEMST wins {wins}/5 (SEMST/MLP dB: {detail})")


def test_criterion_5_statistics_oracle():
    datasets, methods, M = harness.load_table5()["F1"]
    found = None
    for label, cols in (("10 columns incl. NONE", list(range(len(methods)))),
                        ("9 columns excl. NONE", list(range(1, len(methods))))):
        rt = metrics.mean_ranks(M[:, cols], methods=[methods[c] for c in cols])
        r = dict(zip(rt.methods, rt.mean_ranks))
        if abs(r["Ours"] - 7.90) <= 0.05 and abs(r["CGAN-GP"] - 1.25) <= 0.05 \
                and max(r, key=r.get) == "Ours" and min(r, key=r.get) == "CGAN-GP":
            found = (label, rt)
            break
    cd = metrics.nemenyi_cd(10, 20)
    ok = found is not None and abs(cd - 3.029) <= 0.01
    detail = f"CD(10,20)={cd:.3f}"
    if found:
        chi2, p = metrics.friedman(found[1])
        ok = ok and p < 0.05
        r = dict(zip(found[1].methods, found[1].mean_ranks))
        detail = (f"convention: {found[0]}; Ours {r['Ours']:.3f}, CGAN-GP {r['CGAN-GP']:.3f}, "
                  f"chi2 {chi2:.2f}, p {p:.1e}, {detail}")
    assert report(5, ok, detail)


def _bf_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    tot = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return tot / (len(pos) * len(neg))


def _bf_counts(y, p):
    tp = sum(1 for a, b in zip(y, p) if a == 1 and b == 1)
    fn = sum(1 for a, b in zip(y, p) if a == 1 and b == 0)
    fp = sum(1 for a, b in zip(y, p) if a == 0 and b == 1)
    tn = sum(1 for a, b in zip(y, p) if a == 0 and b == 0)
    return tp, fn, fp, tn


def _bf_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (z - mb) for x, z in zip(a, b))
    return cov / math.sqrt(sum((x - ma) ** 2 for x in a) * sum((z - mb) ** 2 for z in b))


def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(6)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 21))
        y = np.r_[1, 0, rng.integers(0, 2, n - 2)]
        s = np.round(rng.random(n), 1)  # coarse grid forces ties
        pred = (s >= 0.5).astype(int)
        tp, fn, fp, tn = _bf_counts(y, pred)
        cm = metrics.confusion(y, pred)
        bf_f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        bf_g = math.sqrt(tp / (tp + fn) * tn / (tn + fp))
        A, B = rng.random((n, 3)), rng.random((n, 3))
        bf_mse = sum((A[i, j] - B[i, j]) ** 2 for i in range(n) for j in range(3)) / (3 * n)
        a, b = rng.normal(size=n), rng.normal(size=n)
        worst = max(worst, abs(metrics.f1(cm) - bf_f1), abs(metrics.g_mean(cm) - bf_g),
                    abs(metrics.auc(s, y) - _bf_auc(s, y)),
                    abs(metrics.psnr(A, B) - 10 * math.log10(1 / bf_mse)),
                    abs(metrics.pearson(a, b) - _bf_pearson(a, b)))
    elapsed = time.perf_counter() - t0
    assert report(6, worst < 1e-9 and elapsed < 5, f"100 instances, max abs diff {worst:.1e}, {elapsed:.2f}s")


def test_criterion_7_end_to_end_direction():
    t0 = time.process_time()
    cfg = harness.ExperimentConfig(datasets=["ecoli-0-vs-1", "yeast-2-vs-4"], methods=["none", "semres_ddpm"],
                                   classifiers=["gaussian_nb", "knn", "logistic_regression"], folds=10,
                                   diffusion=harness.desk_diffusion())
    table = harness.run_evaluate(cfg)
    elapsed = time.process_time() - t0
    gm = {}
    for d, m, c, f, name, v in table.records:
        if name == "g_mean":
            gm.setdefault((d, m), []).append(v)
    pooled = {m: np.mean([v for (d, mm), vs in gm.items() if mm == m for v in vs]) for m in cfg.methods}
    per = "; ".join(f"{d} {np.mean(gm[(d, 'semres_ddpm')]):.4f} vs {np.mean(gm[(d, 'none')]):.4f}"
                    for d in cfg.datasets)
    ok = not table.failures and pooled["semres_ddpm"] >= pooled["none"] and elapsed < 1200
    assert report(7, ok, f"G-mean pooled {pooled['semres_ddpm']:.4f} vs none {pooled['none']:.4f} "
                         f"({per}), {elapsed:.0f}s CPU")


def test_criterion_8_determinism(tmp_path):
    kw = dict(datasets=["newthyroid2", "glass-0-1-2-3-vs-4-5-6"], methods=["none", "smote", "adasyn", "semres_ddpm"],
              classifiers=["gaussian_nb", "knn", "decision_tree"], folds=3,
              diffusion={"T": 20, "iterations": 30})
    harness.run_evaluate(harness.ExperimentConfig(output_dir=str(tmp_path / "a"), **kw))
    again = harness.load_manifest(tmp_path / "a" / "manifest.json")
    again.output_dir = str(tmp_path / "b")
    harness.run_evaluate(again)
    same = (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    t1 = time.perf_counter()
    bad = []
    for name in KEEL_DATASETS:
        ds = load_keel(name)
        X = fit_normalizer(ds.minority_rows(), ds.schema).transform(ds.minority_rows())
        count = int((ds.y == 0).sum() - (ds.y == 1).sum())
        S = smote(X, count, k=5, seed=harness.derived_seed(0, name))
        # each synthetic row lies on a segment from a minority row to one of its
        # near neighbours (k + 3 candidates absorb distance ties)
        d2 = ((X ** 2).sum(1)[:, None] - 2 * X @ X.T + (X ** 2).sum(1)[None, :])
        np.fill_diagonal(d2, np.inf)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :min(8, len(X) - 1)]
        base = np.repeat(np.arange(len(X)), nn.shape[1])
        seg = X[nn.ravel()] - X[base]
        seg_sq = np.maximum((seg ** 2).sum(1), 1e-300)
        # squared distance to every segment via expanded products, then an exact
        # recomputation on the best segment for each row
        Xb = X[base]
        c_b = (Xb * seg).sum(1)
        n_b = (Xb ** 2).sum(1)
        d_ok = bool(np.all((S >= 0) & (S <= 1)))
        for lo in range(0, len(S), 256):
            R = S[lo:lo + 256]
            dot = R @ seg.T - c_b
            lam = np.clip(dot / seg_sq, 0, 1)
            off_sq = (R ** 2).sum(1)[:, None] - 2 * R @ Xb.T + n_b
            best = np.argmin(off_sq - 2 * lam * dot + lam ** 2 * seg_sq, axis=1)
            lb = lam[np.arange(len(R)), best][:, None]
            exact = ((R - Xb[best] - lb * seg[best]) ** 2).sum(1)
            d_ok = d_ok and bool(np.all(exact < 1e-18))
        if S.shape != (count, X.shape[1]) or not d_ok:
            bad.append(name)
    smote_s = time.perf_counter() - t1
    ok = same and not bad and smote_s < 10
    assert report(8, ok, f"byte-identical rerun {same}; SMOTE invariants hold on "
                         f"{len(KEEL_DATASETS) - len(bad)}/20 datasets in {smote_s:.2f}s"), bad
