"""
Gradients through unrolled contour steps
========================================

Every contour step is recorded on the tape, so the soft Dice loss of the
final level set can be differentiated with respect to the initial level
set and both weight maps.  Here the tape gradients are compared with
central differences, first for the contour alone and then through a tiny
backbone.
"""

import numpy as np

from acmseg import acm, autodiff as ad, cli, training
from acmseg.acm import AcmConfig

# A 16x16 problem: noisy disk, perturbed circle start, random weight maps.
image, truth, phi0, lam1, lam2 = cli.acm_gradcheck_problem(size=16, seed=0)
cfg = AcmConfig(window_radius=3)


def loss(phi_init):
    phi = acm.evolve(phi_init, image, lam1, lam2, cfg, steps=5)
    return training.soft_dice_loss(acm.logits_from_levelset(phi), truth)


# One backward pass gives the gradient for every pixel of the initial level set.
tape = ad.Tape()
p = tape.variable(phi0)
g = tape.gradient(loss(p), [p])[0]
print("largest |dL/dphi0| at pixel", tuple(int(i) for i in np.unravel_index(np.abs(g).argmax(), g.shape)))

# Central differences in extended precision agree to many digits.
print(f"phi0 max relative error {ad.grad_check(loss, phi0, oracle_dtype=np.longdouble):.2e}")

# The same check through backbone and contour, on 1% of the network weights.
report = cli.gradcheck_e2e(steps=3, fraction=0.01)
print(f"end to end: {report['checked']} of {report['total']} weights, "
      f"max relative error {report['weights']:.2e}")
