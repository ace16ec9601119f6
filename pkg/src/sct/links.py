"""Softplus link shared by marginal parameters and kernel hyperparameters.

Positive-constrained quantities are optimized on the unconstrained eta
scale with value = softplus(eta); the prior on eta is flat, so the link
contributes no density term.
"""

import numpy as np


def softplus(eta, xp=np):
    """log(1 + exp(eta)), overflow-safe on both ends."""
    eta = xp.asarray(eta)
    return xp.where(eta > 0, eta, 0.0) + xp.log1p(xp.exp(-xp.abs(eta)))


def softplus_inv(value, xp=np):
    """eta with softplus(eta) = value, for value > 0."""
    v = xp.asarray(value)
    # expm1 overflows past ~709; softplus is the identity there anyway
    safe = xp.minimum(v, 30.0)
    return xp.where(v > 30.0, v, xp.log(xp.expm1(safe)))
