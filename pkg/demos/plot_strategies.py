"""
Comparing uncertainty strategies on a toy stereo set
====================================================

A small end-to-end tour: render a synthetic stereo dataset, train a stereo
self-supervised depth network with three uncertainty strategies, and score
each one.

* ``post``: run the image and its mirror, uncertainty is the disagreement.
* ``log``:  an extra head predicts the log-variance of the photometric error.
* ``self``: a student network learns to reproduce the ``post`` teacher's
  depth and predicts how far off it is likely to be.

The runs below are deliberately short so the script finishes in a few
minutes; the numbers are illustrative, not converged.
"""

from pathlib import Path

from monouq import Experiment, StrategyConfig, TrainConfig, train
from monouq.datagen import SceneSpec, generate_dataset
from monouq.evaluation import DepthMetrics, aggregate_over_test_set, evaluate_image

out = Path("demo_output")
dataset = generate_dataset(SceneSpec(seed=0), 30)
print(f"{len(dataset)} samples, {len(dataset.train_indices)} for training")

###############################################################################
# ``train`` handles every strategy.  For ``self`` it first trains the
# ``post`` teacher in ``<out>/teacher`` and then the student.

EPOCHS = 15
for kind in ("post", "log", "self"):
    cfg = TrainConfig(strategy=StrategyConfig(kind), epochs=EPOCHS, lr=1e-3)
    train(cfg, dataset, out / kind)

###############################################################################
# Inference goes through ``Experiment``, which also counts network forwards:
# two for ``post`` (image and mirror), one for the head-based strategies.

print(f"{'strategy':8s} {'fwd':>3s} {'AbsRel':>7s} {'AURG abs_rel':>13s} {'AURG rmse':>10s}")
for kind in ("post", "log", "self"):
    exp = Experiment(out / kind)
    metrics, sparse = [], {"abs_rel": [], "rmse": []}
    for i in dataset.test_indices:
        exp.reset_counter()
        depth, unc = exp.infer(dataset.frame(i))
        m, s = evaluate_image(depth.values, dataset.depth[i], unc.values)
        metrics.append(m)
        for name in sparse:
            sparse[name].append(s[name])
    mean = DepthMetrics.mean(metrics)
    aurg = {name: aggregate_over_test_set(r).aurg for name, r in sparse.items()}
    print(f"{kind:8s} {exp.forward_count:3d} {mean.abs_rel:7.3f} {aurg['abs_rel']:13.4f} {aurg['rmse']:10.4f}")

###############################################################################
# The same pipeline is available from the shell, writing every step to its
# own directory with a replayable ``run_record.json``::
#
#     monouq generate-data --out data --count 50
#     monouq train --out runs/log --data data --strategy log --epochs 60 --lr 1e-3
#     monouq infer --out preds/log --experiment runs/log --data data
#     monouq sparsify --out sparse/log --predictions preds/log
#     monouq report --out report --inputs sparse/log
