"""
Evidential calibration in a few lines
=====================================

How logits become Dirichlet concentrations, and what the calibrated
loss rewards.
"""

import numpy as np

from care_reid.pec import (
    CalibrationParams,
    calibrated_probability,
    dirichlet_mean,
    ecl_loss,
    enll_loss,
    evidence_from_logits,
    kl_dirichlet_uniform,
)

###############################################################################
# Evidence is ``exp(z) + s`` with a learnable per-class smoothing ``s``.
# With ``s = 0`` and no prior the Dirichlet mean is the softmax.
z = np.array([2.0, 0.5, -1.0])
sharp = CalibrationParams.from_smoothing(np.zeros(3), kappa=0.0)
print("softmax-like mean:", dirichlet_mean(evidence_from_logits(z, sharp)).round(4))

###############################################################################
# Raising the shared smoothing pulls the calibrated score towards uniform.
for s in (0.0, 1.0, 10.0):
    params = CalibrationParams.from_smoothing(np.full(3, s), kappa=0.0)
    print(f"s={s:5.1f}", calibrated_probability(z, params).round(4))

###############################################################################
# With the unit prior (kappa = 1) the concentration sum measures total evidence.
# The KL term penalises evidence spent on classes other than the label.
params = CalibrationParams.initial(3)
confident = evidence_from_logits(np.array([[6.0, 0.0, 0.0]]), params)
hesitant = evidence_from_logits(np.array([[0.3, 0.2, 0.1]]), params)
for name, state in (("confident", confident), ("hesitant", hesitant)):
    print(f"{name:9s} S={state.s_total[0]:8.2f}  ENLL={enll_loss(state, [0]).value:.4f}"
          f"  KL={kl_dirichlet_uniform(state).value:.4f}  ECL={ecl_loss(state, [0], 0.5).value:.4f}")

###############################################################################
# A wrong confident label is expensive: ENLL grows with the evidence that
# sits on the other class.
print("confident, wrong label ENLL:", round(enll_loss(confident, [2]).value, 4))
