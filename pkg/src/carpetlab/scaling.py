"""Piecewise-power space-time scaling function and its associated rate function.

``Psi(r) = r**beta_L`` for ``r <= 1`` and ``r**beta`` for ``r > 1``;
``Phi(R, t) = sup_{s > 0} (R/s - t/Psi(s))`` controls off-diagonal heat
kernel decay.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar


@dataclass(frozen=True)
class ScalingFunction:
    beta_L: float = 2.0
    beta: float = 2.0

    def __post_init__(self):
        if self.beta_L < 2 or self.beta < 2:
            raise ValueError(f"exponents must be >= 2, got ({self.beta_L}, {self.beta})")

    @property
    def beta1(self) -> float:
        return min(self.beta_L, self.beta)

    @property
    def beta2(self) -> float:
        return max(self.beta_L, self.beta)

    def __call__(self, r):
        return psi(self, r)


def psi(sf: ScalingFunction, r):
    """Evaluate Psi at ``r`` (scalar or array)."""
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0):
        raise ValueError("psi requires r >= 0")
    out = np.where(r_arr <= 1.0, r_arr ** sf.beta_L, r_arr ** sf.beta)
    return float(out) if out.ndim == 0 else out


def psi_inv(sf: ScalingFunction, s):
    """Inverse of :func:`psi`."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("psi_inv requires s >= 0")
    out = np.where(s_arr <= 1.0, s_arr ** (1.0 / sf.beta_L), s_arr ** (1.0 / sf.beta))
    return float(out) if out.ndim == 0 else out


def _objective(sf: ScalingFunction, R: float, t: float, s: float) -> float:
    return R / s - t / psi(sf, s)


def _branch_candidate(R: float, t: float, beta: float, lo: float, hi: float) -> float:
    # R/s - t s^-beta is concave in u = 1/s, so the clipped stationary point is the branch max.
    s_star = (beta * t / R) ** (1.0 / (beta - 1.0))
    return min(max(s_star, lo), hi)


def phi(sf: ScalingFunction, R: float, t: float) -> float:
    """Rate function ``sup_{s>0} (R/s - t/Psi(s))``.

    Each power branch is maximised analytically; the kink at ``s = 1`` is
    always a candidate.  The value is never negative since the objective
    tends to 0 as ``s -> infinity``.
    """
    if t <= 0:
        raise ValueError("phi requires t > 0")
    if R < 0:
        raise ValueError("phi requires R >= 0")
    if R == 0:
        return 0.0
    candidates = [
        _branch_candidate(R, t, sf.beta_L, 1e-300, 1.0),
        _branch_candidate(R, t, sf.beta, 1.0, np.inf),
        1.0,
    ]
    best = max(_objective(sf, R, t, s) for s in candidates if np.isfinite(s))
    return max(best, 0.0)


def phi_grid(sf: ScalingFunction, R: float, t: float, points: int = 2000, eps: float = 1e-9) -> float:
    """Brute-force ``Phi`` by log-spaced search plus a bounded local refinement."""
    if t <= 0:
        raise ValueError("phi requires t > 0")
    if R == 0:
        return 0.0
    s = np.logspace(np.log10(1e-6 * R + eps), np.log10(1e6 * R + 1.0), points)
    s = np.union1d(s, [1.0])
    vals = R / s - t / psi(sf, s)
    k = int(np.argmax(vals))
    best = float(vals[k])
    lo, hi = s[max(k - 1, 0)], s[min(k + 1, len(s) - 1)]
    if hi > lo:
        res = minimize_scalar(
            lambda x: -_objective(sf, R, t, np.exp(x)),
            bounds=(np.log(lo), np.log(hi)),
            method="bounded",
            options={"xatol": 1e-12},
        )
        best = max(best, -float(res.fun))
    return max(best, 0.0)


def phi_asymptotic(sf: ScalingFunction, R: float, t: float) -> float:
    """Two-regime power-law profile ``(R**b / t)**(1/(b-1))`` with ``b`` chosen by ``t`` vs ``R``."""
    b = sf.beta_L if t <= R else sf.beta
    return (R**b / t) ** (1.0 / (b - 1.0))
