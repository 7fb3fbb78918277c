"""Brute-force references that never touch the Fourier series of the kernel.

Everything here works in physical space: singular quadrature for the log-sine kernel,
principal-value quadrature for the conjugate function, finite differences for Gateaux
derivatives. Profiles are evaluated off-grid by direct trigonometric sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .energy import ModelParams, phi
from .spectral import Profile


@dataclass(frozen=True)
class QuadratureSpec:
    """Quadrature resolution.

    ``m`` is the node count of the base rule (tanh-sinh nodes, midpoint panels, or
    Gauss-Legendre nodes for principal values). ``exclusion`` is the half-width of the
    excluded interval around the singularity for principal values.
    """

    m: int = 512
    rule: str = "tanh_sinh"
    exclusion: float = 1e-2

    def __post_init__(self):
        if self.rule not in ("tanh_sinh", "midpoint_offset"):
            raise ValueError(f"unknown quadrature rule {self.rule!r}")
        if self.m < 8:
            raise ValueError(f"panel count must be >= 8, got {self.m}")
        if not 0 < self.exclusion < 0.25:
            raise ValueError(f"exclusion must lie in (0, 1/4), got {self.exclusion}")


def richardson(values: Sequence[float], ratio: float, exponents: Sequence[int]) -> float:
    """Eliminate error terms h^p for p in ``exponents`` from values at h, h/r, h/r^2, ..."""
    vals = [float(v) for v in values]
    if len(vals) != len(exponents) + 1:
        raise ValueError("need one more value than eliminated exponents")
    for p in exponents:
        f = ratio**p
        vals = [(f * vals[i + 1] - vals[i]) / (f - 1.0) for i in range(len(vals) - 1)]
    return vals[0]


def _tanh_sinh_half(m: int, tmax: float = 4.0):
    """Nodes s in (0, 1/2) and weights for integrals over [0, 1/2].

    Returns s and its complement 1/2 - s, both computed without cancellation.
    """
    t = np.linspace(-tmax, tmax, m + 1)
    h = t[1] - t[0]
    u = 0.5 * math.pi * np.sinh(t)
    e = np.exp(-2.0 * np.abs(u))
    small = 0.5 * e / (1.0 + e)  # distance of the node from the nearer endpoint
    s = np.where(t < 0, small, 0.5 - small)
    comp = np.where(t < 0, 0.5 - small, small)
    wt = h * 0.25 * 0.5 * math.pi * np.cosh(t) / np.cosh(u) ** 2
    keep = (s > 0) & (comp > 0)
    return s[keep], comp[keep], wt[keep]


def _log_sin_pi(s: np.ndarray, comp: np.ndarray) -> np.ndarray:
    """ln sin(pi s) for s in (0, 1/2], using the complement near 1/2."""
    return np.where(s < 0.25, np.log(np.sin(math.pi * s)), np.log(np.cos(math.pi * comp)))


def _diag_panel(delta: float) -> float:
    """Closed form of the integral of ln sin(pi s) over (0, delta)."""
    return (
        delta * math.log(delta) - delta + delta * math.log(math.pi)
        - math.pi**2 * delta**3 / 18.0 - math.pi**4 * delta**5 / 900.0
    )


def _midpoint_log_kernel(func, x: float, m: int) -> float:
    s = (np.arange(m) + 0.5) / m
    vals = np.log(np.sin(math.pi * s)) * func(x - s)
    h = 1.0 / m
    inner_sum = h * float(np.sum(vals[1:-1]))
    diag = _diag_panel(h)
    return inner_sum + diag * float(func(np.array([x - s[0]]))[0]) + diag * float(func(np.array([x - s[-1]]))[0])


def quad_log_kernel(func: Callable[[np.ndarray], np.ndarray], x: float, q: QuadratureSpec = QuadratureSpec()) -> float:
    """Integral over y in (0, 1) of ln|sin(pi (x - y))| f(y), f vectorized and 1-periodic."""
    if q.rule == "midpoint_offset":
        # Error expansion in odd powers of the panel width.
        vals = [_midpoint_log_kernel(func, x, q.m * 2**j) for j in range(3)]
        return richardson(vals, 2.0, (1, 3))
    s, comp, wt = _tanh_sinh_half(q.m)
    # Fold s and 1 - s onto (0, 1/2): the kernel is even about both endpoints.
    return float(np.sum(wt * _log_sin_pi(s, comp) * (func(x - s) + func(x + s))))


def kernel_mass(q: QuadratureSpec = QuadratureSpec()) -> float:
    """Integral of -ln|sin(pi xi)| over (-1, 1)."""
    s, comp, wt = _tanh_sinh_half(q.m)
    return -4.0 * float(np.sum(wt * _log_sin_pi(s, comp)))


def curvature_function(u: Profile, a: float) -> Callable[[np.ndarray], np.ndarray]:
    """x -> a + u_xx(x) evaluated by direct trigonometric sums at arbitrary points."""
    grid = u.grid
    k = np.nonzero(u.coeffs)[0]
    k = k[k > 0]
    wc = -((2.0 * math.pi * k) ** 2) * u.coeffs[k]
    mult = np.where(k == grid.n // 2, 1.0, 2.0)

    def v(x):
        x = np.asarray(x, dtype=float)
        if k.size == 0:
            return np.full(x.shape, float(a))
        ph = 2.0 * math.pi * np.multiply.outer(x, k)
        return a + (np.cos(ph) * (mult * wc.real) - np.sin(ph) * (mult * wc.imag)).sum(axis=-1)

    return v


def quad_energy(u: Profile, p: ModelParams, q: QuadratureSpec = QuadratureSpec()) -> float:
    """E(u) by singular quadrature of the double integral plus nodal Phi quadrature."""
    v = curvature_function(u, p.a)
    vn = v(u.grid.nodes)
    if np.min(vn) < 0:
        return math.inf
    # The outer integrand is a trigonometric polynomial of degree below 2n.
    xs = np.arange(2 * u.grid.n) / (2 * u.grid.n)
    conv = np.array([quad_log_kernel(v, float(x), q) for x in xs])
    kernel = float(np.mean(v(xs) * conv))
    return kernel + float(np.mean(phi(vn)))


def pv_hilbert(func: Callable[[np.ndarray], np.ndarray], x: float, q: QuadratureSpec = QuadratureSpec(m=64, exclusion=1e-3)) -> float:
    """Principal value of the integral of f(x - y) cot(pi y) over the period.

    Folded to (eps, 1/2) with the odd kernel, integrated by Gauss-Legendre, and the
    excluded piece (odd in eps) removed by extrapolation over four halvings of eps.
    """
    nodes, weights = np.polynomial.legendre.leggauss(q.m)

    def folded(eps):
        y = eps + (0.5 - eps) * 0.5 * (nodes + 1.0)
        wy = (0.5 - eps) * 0.5 * weights
        return float(np.sum(wy * (func(x - y) - func(x + y)) / np.tan(math.pi * y)))

    vals = [folded(q.exclusion / 2**j) for j in range(4)]
    return richardson(vals, 2.0, (1, 3, 5))


def fd_gateaux(
    u: Profile,
    direction: Profile,
    eps: float,
    p: ModelParams,
    energy_fn: Callable[[Profile, ModelParams], float] | None = None,
) -> float:
    """Central difference (E(u + eps d) - E(u - eps d)) / (2 eps).

    ``energy_fn`` defaults to the quadrature energy.
    """
    fn = energy_fn or (lambda w, pp: quad_energy(w, pp))
    return (fn(u + eps * direction, p) - fn(u - eps * direction, p)) / (2.0 * eps)
