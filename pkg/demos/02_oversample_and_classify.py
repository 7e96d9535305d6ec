"""Balance one imbalanced KEEL dataset three ways and score a classifier on each.

A single train/test split, so numbers are noisy; the evaluate subcommand does
the proper k-fold version.
"""

from semres_ddpm import classifiers, harness, metrics
from semres_ddpm.dataio import class_stats, load_keel, stratified_kfold
from semres_ddpm.oversamplers import OversampleRequest, balance

ds = load_keel("yeast-2-vs-4")
n_min, n_maj, ir = class_stats(ds)
print(f"{ds.name}: {n_min} minority, {n_maj} majority, IR {ir:.2f}")

plan = stratified_kfold(ds, 5, seed=0)
train, test = ds.subset(plan.train_index(0)), ds.subset(plan.test_index(0))

for method in ["none", "smote", "semres_ddpm"]:
    bal = balance(OversampleRequest(train, method, harness.desk_diffusion(), seed=0))
    model = classifiers.fit("gaussian_nb", bal.X, bal.y)
    # the test fold is encoded with the normalizer fitted on training minority rows only
    s = classifiers.score(model, bal.normalizer.transform(test.rows))
    cm = metrics.confusion(test.y, s >= 0.5)
    print(f"{method:12s} +{bal.n_synthetic:4d} rows  F1 {metrics.f1(cm):.3f}  "
          f"G-mean {metrics.g_mean(cm):.3f}  AUC {metrics.auc(s, test.y):.3f}")
