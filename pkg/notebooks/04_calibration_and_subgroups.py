"""
Calibration and subgroup metrics
================================
"""

import numpy as np

from erohprf import metrics as M

rng = np.random.default_rng(0)
logits = rng.normal(0, 2, size=(200, 3))
labels = rng.integers(0, 3, size=200)
logits[np.arange(200), labels] += 1.5  # make the "model" better than chance
probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
sex = rng.choice(["F", "M"], size=200)

ps = M.PredictionSet(probs, labels, tuple(sex))
print(M.evaluate(ps).as_percent())

cfg = M.CalibrationConfig(bins=10)
for lo, hi, n, acc, conf in M.reliability_diagram(probs.max(axis=1), ps.predicted() == labels, cfg):
    print(f"({lo:.1f}, {hi:.1f}]  n={n:3d}  acc={acc:.2f}  conf={conf:.2f}")

sub = M.subgroup_report(ps, cfg=cfg)
for name, rep in sub.reports.items():
    print(name, rep.n_samples, f"ACC {rep.acc:.3f}  ECE {rep.ece:.3f}")

# head/tail split from training-set class frequencies
print(M.head_tail_groups(labels[:10], class_counts=[150, 12, 40], threshold=20))
