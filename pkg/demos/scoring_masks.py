"""
Scoring masks
=============

The five segmentation scores on small hand-made masks: overlap (Dice and
IoU), instance coverage (WCov), boundary agreement (BoundF) and pixel
error (RMSE).
"""

import numpy as np

from acmseg import metrics

# Ground truth with two instances: a 4x4 square and a 4x3 block.
gt = np.zeros((12, 12), int)
gt[0:4, 0:4] = 1
gt[8:12, 9:12] = 2

# The prediction covers half of the first instance and overshoots the second.
pred = np.zeros((12, 12), bool)
pred[0:4, 0:2] = True
pred[8:12, 7:12] = True

for name in metrics.METRIC_NAMES:
    print(f"{name:7s} {getattr(metrics, name)(gt, pred):.4f}")

# WCov weights each instance by its area: 16/28 * 8/16 + 12/28 * 12/20.
print("by hand", 16 / 28 * 8 / 16 + 12 / 28 * 12 / 20)

# BoundF counts boundary pixels within theta pixels of the other boundary.
for theta in (0.5, 1.0, 2.0, 3.0):
    print(f"BoundF at theta={theta}: {metrics.boundf(gt > 0, pred, theta):.4f}")

# Instances are 8-connected components.
labels, n = metrics.connected_components(pred)
print("predicted instances:", n)
