"""The epitaxial surface energy, its convex density and its a-priori bounds.

For a zero-mean periodic u with curvature field v = u_xx + a,

    E(u) = integral integral ln|sin(pi (x - y))| v(x) v(y) dy dx  +  integral Phi(v) dx,
    Phi(xi) = xi ln xi + xi^3 / 2   (xi > 0),   Phi(0) = 0,   Phi(xi) = +inf (xi < 0).

Energies are also reported as an excess over the flat state, E(u) - E(0), assembled
from pieces that are each O(|u|^2). Energy differences along a decaying trajectory are
taken from the excess so they keep full relative precision long after E(u) itself has
rounded to E(0).
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .spectral import LN2, GridMismatchError, GridSpec, Profile, kernel_symbol

SQRT3 = math.sqrt(3.0)
CONVEXITY_CONSTANT = SQRT3 - 2.0 * LN2

CONVEXITY_TOL = 1e-8
ORACLE_TOL = 1e-6


@dataclass(frozen=True)
class ModelParams:
    """Reference slope ``a`` and the convexity constants derived from it."""

    a: float = 1.0

    def __post_init__(self):
        if not (isinstance(self.a, (int, float)) and math.isfinite(self.a) and self.a > 0):
            raise ValueError(f"reference slope a must be a positive finite number, got {self.a!r}")

    @property
    def C(self) -> float:
        return CONVEXITY_CONSTANT

    @property
    def lam(self) -> float:
        """Convexity modulus lambda = 2C of E in L2."""
        return 2.0 * CONVEXITY_CONSTANT


def phi(xi):
    """Convex density Phi, extended by 0 at 0 and +inf on the negatives."""
    x = np.asarray(xi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)) + 0.5 * x**3, 0.0)
    out = np.where(x < 0, np.inf, out)
    return float(out) if out.ndim == 0 else out


def _require_positive(xi):
    x = np.asarray(xi, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("Phi' and Phi'' are defined only for positive arguments")
    return x


def phi_prime(xi):
    """Phi'(xi) = ln xi + 1 + 3 xi^2 / 2."""
    x = _require_positive(xi)
    out = np.log(x) + 1.0 + 1.5 * x**2
    return float(out) if out.ndim == 0 else out


def phi_second(xi):
    """Phi''(xi) = 1/xi + 3 xi, minimized at xi = 1/sqrt(3) with value 2 sqrt(3)."""
    x = _require_positive(xi)
    out = 1.0 / x + 3.0 * x
    return float(out) if out.ndim == 0 else out


def equilibrium_energy(a: float) -> float:
    """E(0) = a ln a + a^3/2 - a^2 ln 2."""
    return a * math.log(a) + 0.5 * a**3 - a * a * LN2


# Series of (1 + s) log1p(s) - s = sum_{m>=2} (-1)^m s^m / (m (m - 1)), highest power first.
_SERIES_TERMS = 32
_XLOGX_SERIES = np.array([(-1.0) ** m / (m * (m - 1)) for m in range(_SERIES_TERMS + 1, 1, -1)])


def xlogx_remainder(s):
    """(1 + s) log(1 + s) - s for s >= -1, accurate to relative precision near s = 0."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 0.25
    ss = np.where(small, s, 0.0)
    series = np.zeros_like(ss)
    for c in _XLOGX_SERIES:
        series = series * ss + c
    series = series * ss * ss
    with np.errstate(divide="ignore", invalid="ignore"):
        sl = np.where(small | (s <= -1.0), 0.5, s)
        direct = (1.0 + sl) * np.log1p(sl) - sl
    out = np.where(small, series, direct)
    return np.where(s == -1.0, 1.0, out)


def curvature_values(u: Profile) -> np.ndarray:
    """Nodal values of u_xx."""
    grid = u.grid
    return grid.to_values(-((2.0 * math.pi * grid.rk) ** 2) * u.coeffs)


def _kernel_excess_coeffs(grid: GridSpec, coeffs: np.ndarray) -> float:
    wc = -((2.0 * math.pi * grid.rk[1:]) ** 2) * coeffs[1:]
    sym = kernel_symbol(grid)[1:]
    return float(np.sum(grid.parseval_weights[1:] * sym * (wc.real**2 + wc.imag**2)))


def kernel_excess(u: Profile) -> float:
    """Double-integral term minus its flat-state value -a^2 ln 2 (always <= 0)."""
    return _kernel_excess_coeffs(u.grid, u.coeffs)


def phi_excess_density(w: np.ndarray, a: float) -> np.ndarray:
    """Phi(a + w) - Phi(a) - Phi'(a) w, evaluated without cancellation."""
    return a * xlogx_remainder(w / a) + w * w * (1.5 * a + 0.5 * w)


def energy_excess_coeffs(grid: GridSpec, coeffs: np.ndarray, a: float) -> float:
    """E - E(0) for the zero-mean state with half-spectrum ``coeffs``."""
    w = grid.to_values(-((2.0 * math.pi * grid.rk) ** 2) * coeffs)
    if np.min(w) + a < 0:
        return math.inf
    return _kernel_excess_coeffs(grid, coeffs) + float(np.mean(phi_excess_density(w, a)))


def energy_excess(u: Profile, p: ModelParams) -> float:
    """E(u) - E(0); +inf when u_xx + a is negative somewhere on the grid."""
    return energy_excess_coeffs(u.grid, u.coeffs, p.a)


@functools.total_ordering
@dataclass(frozen=True)
class EnergyReport:
    """Value of E with its two parts and the a-priori bounds on it."""

    total: float
    kernel_part: float
    phi_part: float
    lower_bound: float
    upper_bound: float
    min_v: float
    excess: float
    infinite: bool = False

    def _key(self):
        return (self.infinite, 0.0 if self.infinite else self.total)

    def __lt__(self, other):
        if not isinstance(other, EnergyReport):
            return NotImplemented
        return self._key() < other._key()

    @property
    def bounds_hold(self) -> bool:
        if self.min_v < 0:
            return True
        return self.lower_bound <= self.total <= self.upper_bound

    def to_dict(self) -> dict:
        def enc(x):
            return "infinity" if x == math.inf else x

        return {
            "total": enc(self.total),
            "kernel_part": self.kernel_part,
            "phi_part": enc(self.phi_part),
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "min_v": self.min_v,
            "excess": enc(self.excess),
            "infinite": self.infinite,
        }


def energy(u: Profile, p: ModelParams) -> EnergyReport:
    """Evaluate E(u) spectrally (kernel part) and by the rectangle rule (Phi part)."""
    a = p.a
    w = curvature_values(u)
    v = a + w
    min_v = float(np.min(v))
    sym0 = float(kernel_symbol(u.grid)[0])
    k_exc = kernel_excess(u)
    kernel_part = sym0 * a * a + k_exc
    l2sq = float(np.mean(v * v))
    l3cube = float(np.mean(np.abs(v) ** 3))
    lower = 0.5 * l3cube - 1.0 / math.e - 2.0 * LN2 * l2sq
    # sup over 0 < xi < 1 of xi ln xi is 0, so the upper bound carries no extra constant.
    upper = 0.5 * l3cube + (2.0 * LN2 + 1.0) * l2sq
    if min_v < 0:
        return EnergyReport(math.inf, kernel_part, math.inf, lower, upper, min_v, math.inf, True)
    p_exc = float(np.mean(phi_excess_density(w, a)))
    phi_part = float(phi(a)) + p_exc
    return EnergyReport(
        total=kernel_part + phi_part,
        kernel_part=kernel_part,
        phi_part=phi_part,
        lower_bound=lower,
        upper_bound=upper,
        min_v=min_v,
        excess=k_exc + p_exc,
    )


def convexity_gap(u: Profile, w: Profile, t: float, p: ModelParams) -> float:
    """(1-t) E(u) + t E(w) - C t (1-t) |u - w|^2 - E((1-t) u + t w).

    Nonnegative for every admissible pair when E is 2C-convex. Exactly zero at t = 0,
    t = 1 and for u = w.
    """
    if u.grid != w.grid:
        raise GridMismatchError(f"grid n={u.grid.n} vs n={w.grid.n}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    eu = energy_excess(u, p)
    ew = energy_excess(w, p)
    if math.isinf(eu) or math.isinf(ew):
        return math.inf
    if t == 0.0:
        mid = u
    elif t == 1.0:
        mid = w
    else:
        mid = Profile(u.grid, u.coeffs + t * (w.coeffs - u.coeffs))
    em = energy_excess(mid, p)
    d = w.coeffs - u.coeffs
    dist2 = float(np.sum(u.grid.parseval_weights * (d.real**2 + d.imag**2)))
    return (eu - em) + t * (ew - eu) - p.C * t * (1.0 - t) * dist2
