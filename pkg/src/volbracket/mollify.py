"""Flat smooth step functions used by the collapse construction.

Everything here is built from one transition profile

    rho(t) = exp(-L/t) / (exp(-L/t) + exp(-L/(1-t)))

which is 0 at t <= 0, 1 at t >= 1, satisfies rho(t) + rho(1-t) = 1 and has all
derivatives vanishing at both ends.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

DEFAULT_LAMBDA = 30.0
# sharpness of the cutoffs lambda, sigma and the capsule bump
CUTOFF_LAMBDA = 1.0


def rho(t, lam: float = DEFAULT_LAMBDA):
    """Flat transition from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.asarray(t, dtype=np.float64)
    inner = (t > 0) & (t < 1)
    s = np.where(inner, t, 0.5)
    # lam/(1-s) - lam/s written over a common denominator: symmetric in s <-> 1-s
    with np.errstate(over="ignore", divide="ignore"):
        val = expit(lam * (2.0 * s - 1.0) / (s * (1.0 - s)))
    out = np.where(inner, val, np.where(t >= 1, 1.0, 0.0))
    return out if out.ndim else float(out)


def _inner_cutoff(t, lam):
    # flat at 0, exactly 1 on [1/2, 1]
    return rho(np.minimum(2.0 * np.asarray(t, dtype=np.float64), 1.0), lam)


def smoothstep_a(t, lam: float = DEFAULT_LAMBDA):
    """The reparametrisation ``a`` of ``[0, 1]``.

    ``a(t) = (t k(t) - 1) k(1 - t) + 1`` where ``k(t) = rho(min(2t, 1))``.
    ``a`` is the identity near 1/2 (to 1e-12 on [0.4, 0.6] for lam=30), is
    monotone, satisfies ``a(t) + a(1-t) = 1``, and is flat at both endpoints.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)) or np.any(np.isnan(t)):
        raise ValueError("smoothstep_a is defined on [0, 1] only")
    if lam <= 0:
        raise ValueError("lambda_cap must be positive")
    val = (t * _inner_cutoff(t, lam) - 1.0) * _inner_cutoff(1.0 - t, lam) + 1.0
    out = np.where(t == 0, 0.0, np.where(t == 1, 1.0, val))
    return out if out.ndim else float(out)


def cutoff(r, inner: float, outer: float, lam: float = CUTOFF_LAMBDA):
    """Smooth ramp: 0 for ``r <= inner``, 1 for ``r >= outer``."""
    return rho((np.asarray(r, dtype=np.float64) - inner) / (outer - inner), lam)


def smooth_ramp(t, width: float, lam: float = CUTOFF_LAMBDA):
    """Smooth stand-in for ``max(t, 0)``: 0 for t <= 0, t for t >= width.

    Satisfies ``t - width <= smooth_ramp(t) <= max(t, 0)``.
    """
    t = np.asarray(t, dtype=np.float64)
    return t * rho(t / width, lam)


def sigma_profile(r, n: int):
    """Plateau used by the full-cube contraction.

    0 on [0, 1/10], 1 on [1/9, sqrt(n) + 1], 0 on [sqrt(n) + 2, inf).
    """
    r = np.asarray(r, dtype=np.float64)
    top = math.sqrt(n) + 1.0
    return cutoff(r, 0.1, 1.0 / 9.0) * (1.0 - cutoff(r, top, top + 1.0))
