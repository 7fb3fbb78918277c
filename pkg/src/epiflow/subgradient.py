"""Gradient, metric slope and second variation of the energy.

With v = a + w, w = u_xx, the gradient is

    dE/du = d_xx [ 2 pi H(u_x) + ln v + (3/2) v^2 ],

projected onto the resolved band |k| <= dealias cutoff. The Hilbert branch collapses to
the multiplier -16 pi^4 |k|^3 on the coefficients of u. The nonlinear flux is evaluated
at the nodes as log1p(w/a) + 3 a w + (3/2) w^2, which differs from ln v + (3/2) v^2 by a
constant that the outer second derivative removes, and which stays relatively accurate
however small w becomes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .energy import ModelParams, curvature_values
from .spectral import GridSpec, Profile, SpectralField, coeff_norm

V_FLOOR = 1e-10

_PI2 = 4.0 * math.pi**2
_PI4 = 16.0 * math.pi**4


class DegenerateProfileError(ValueError):
    """u_xx + a is not bounded away from zero on the grid."""


@dataclass(frozen=True)
class SubgradientField:
    field: SpectralField
    slope: float
    min_v: float


def _check_v(w: np.ndarray, a: float) -> float:
    min_v = float(np.min(w)) + a
    if not min_v > V_FLOOR:
        raise DegenerateProfileError(f"min(u_xx + a) = {min_v:.3e} <= {V_FLOOR:g}")
    return min_v


def hilbert_branch_symbol(grid: GridSpec) -> np.ndarray:
    """Multiplier of u -> d_xx(2 pi H(u_x)) on the half spectrum."""
    return -_PI4 * grid.rk**3


def flux_values(w: np.ndarray, a: float) -> np.ndarray:
    """ln(v) + (3/2) v^2 up to an additive constant, at the nodes."""
    return np.log1p(w / a) + w * (3.0 * a + 1.5 * w)


def subgrad_coeffs(grid: GridSpec, coeffs: np.ndarray, a: float) -> tuple[np.ndarray, float]:
    """Gradient coefficients for state coefficients ``coeffs``; also returns min v."""
    k2 = _PI2 * grid.rk**2
    w = grid.to_values(-k2 * coeffs)
    min_v = _check_v(w, a)
    fc = grid.to_coeffs(flux_values(w, a))
    g = np.where(grid.dealias_mask, hilbert_branch_symbol(grid) * coeffs - k2 * fc, 0.0)
    g[0] = 0.0
    return g, min_v


def subgrad(u: Profile, p: ModelParams) -> SubgradientField:
    """Single-valued subdifferential of E at u."""
    g, min_v = subgrad_coeffs(u.grid, u.coeffs, p.a)
    field = SpectralField(u.grid, g)
    return SubgradientField(field=field, slope=coeff_norm(u.grid, g), min_v=min_v)


def slope_norm(u: Profile, p: ModelParams) -> float:
    """L2 norm of the gradient (metric slope of E at u)."""
    return subgrad(u, p).slope


def hessian_weight(u: Profile, p: ModelParams) -> np.ndarray:
    """Nodal values of Phi''(v) = 1/v + 3 v."""
    w = curvature_values(u)
    _check_v(w, p.a)
    v = p.a + w
    return 1.0 / v + 3.0 * v


def hessian_coeffs(grid: GridSpec, weight: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Second variation applied to direction coefficients ``d`` with nodal Phi'' ``weight``."""
    k2 = _PI2 * grid.rk**2
    dxx = grid.to_values(-k2 * d)
    fc = grid.to_coeffs(weight * dxx)
    out = np.where(grid.dealias_mask, hilbert_branch_symbol(grid) * d - k2 * fc, 0.0)
    out[0] = 0.0
    return out


def hessian_apply(u: Profile, direction: Profile, p: ModelParams) -> SpectralField:
    """d_xx[2 pi H(d_x) + (1/v + 3 v) d_xx], the linearization of subgrad at u."""
    u._check_grid(direction)
    return SpectralField(u.grid, hessian_coeffs(u.grid, hessian_weight(u, p), direction.coeffs))


def hessian_symbol_at_rest(grid: GridSpec, a: float) -> np.ndarray:
    """Eigenvalues 16 pi^4 ((3a + 1/a) k^4 - |k|^3) of the second variation at u = 0.

    Zero outside the resolved band, where the projected operator vanishes.
    """
    k = grid.rk
    return np.where(grid.dealias_mask, _PI4 * ((3.0 * a + 1.0 / a) * k**4 - k**3), 0.0)
