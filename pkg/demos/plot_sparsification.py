"""
Reading sparsification curves
=============================

Sparsification asks a simple question of an uncertainty map: if we throw
away the pixels it distrusts most, does the error on what is left go down?
This script builds one synthetic depth prediction and scores three
uncertainty maps against it: the oracle (the error itself), a noisy but
informative guess, and a constant map that carries no information.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from monouq.evaluation import per_pixel_errors, sparsification

out = Path("demo_output")
out.mkdir(exist_ok=True)

# a ground-truth depth map and a prediction whose error grows with distance
rng = np.random.default_rng(0)
gt = rng.uniform(2, 20, (64, 64))
pred = gt * np.exp(rng.normal(0, 0.02 * gt))

###############################################################################
# per_pixel_errors returns the contribution of each pixel to a metric, so the
# metric of any subset is the (root) mean of the kept contributions.

err = per_pixel_errors(pred, gt, "rmse")

candidates = {
    "oracle (the error)": err,
    "distance + noise": gt + rng.normal(0, 4, gt.shape),
    "constant": np.ones_like(gt),
}

fig, ax = plt.subplots(figsize=(5, 3.5))
for name, unc in candidates.items():
    res = sparsification(err, unc, metric="rmse")
    print(f"{name:20s} AUSE {res.ause:7.4f}   AURG {res.aurg:7.4f}")
    ax.plot(res.fractions, res.estimated_curve, label=name)
ax.plot(res.fractions, res.random_curve, "k--", label="no removal preference")
ax.set_xlabel("fraction of pixels removed")
ax.set_ylabel("RMSE of the rest")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(out / "sparsification.png", dpi=100)

###############################################################################
# The oracle has AUSE exactly 0 by definition.  The constant map has AURG
# exactly 0: with every pixel tied, removal is order-free and the remaining
# error equals the full-image error at each step.  The informative guess sits
# between the two, with a positive AURG (better than random) and a positive
# AUSE (worse than the oracle).
