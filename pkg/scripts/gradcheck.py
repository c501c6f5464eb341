"""Compare each catalog model's input gradient with central differences."""

import numpy as np

from tapm.models import ARCHITECTURES, build_model
from tapm.tensor_core import relative_error

rng = np.random.default_rng(0)
for arch in ARCHITECTURES:
    clf = build_model(arch, (3, 12, 12), 4, seed=0)
    x = rng.uniform(size=(2, 3, 12, 12))
    vals = clf.forward(x)
    w = rng.normal(size=vals[clf.logits_node].shape)
    analytic = clf.vjp(vals, clf.logits_node, w)[clf.graph.node_id("x")].ravel()
    worst, h = 0.0, 1e-5
    for c in rng.choice(x.size, 100, replace=False):
        xp, xm = x.copy().ravel(), x.copy().ravel()
        xp[c] += h
        xm[c] -= h
        fp = np.sum(w * clf.logits(xp.reshape(x.shape)))
        fm = np.sum(w * clf.logits(xm.reshape(x.shape)))
        worst = max(worst, relative_error(analytic[c], (fp - fm) / (2 * h)))
    print(f"{arch:12s} max relative error {worst:.2e}")
