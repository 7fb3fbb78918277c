"""Fourier machinery on the periodic unit interval I = (0, 1).

A field is stored by its normalized half spectrum ``c_k = (1/n) sum_j f_j exp(-2 pi i k x_j)``
for ``k = 0 .. n/2`` (numpy ``rfft`` with ``norm="forward"``), so that

    f(x) = sum_{k=-n/2+1}^{n/2} f_k exp(2 pi i k x),     f_{-k} = conj(f_k).

The half spectrum is the canonical state; nodal values are derived from it. That makes
serialization of the coefficients an exact round trip.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

SPECTRAL_TOL = 1e-10
MEAN_TOL = 1e-12
ROUNDTRIP_TOL = 1e-12
MIN_NODES = 16

LN2 = math.log(2.0)

# Additive perturbation of the k = 0 kernel coefficient. Only the `check` command's
# negative-control hook sets this; a ContextVar keeps it local to the calling thread.
_kernel_offset: contextvars.ContextVar[float] = contextvars.ContextVar("kernel_offset", default=0.0)


class GridMismatchError(ValueError):
    """Two fields that must share a grid do not."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid with ``n`` nodes ``x_j = j/n`` on the unit interval."""

    n: int
    dealias_cutoff: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or isinstance(self.n, bool):
            raise TypeError(f"node count must be an integer, got {self.n!r}")
        if self.n < MIN_NODES or self.n % 2:
            raise ValueError(f"node count must be even and >= {MIN_NODES}, got {self.n}")
        if not 0 < self.dealias_cutoff <= self.n // 2:
            raise ValueError(f"dealias cutoff {self.dealias_cutoff} outside (0, {self.n // 2}]")

    @cached_property
    def nodes(self) -> np.ndarray:
        return _readonly(np.arange(self.n) / self.n)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, Nyquist reported as +n/2."""
        k = np.fft.fftfreq(self.n, d=1.0 / self.n).round().astype(int)
        k[self.n // 2] = self.n // 2
        return _readonly(k)

    @cached_property
    def rk(self) -> np.ndarray:
        """Nonnegative wavenumbers 0..n/2 of the half spectrum (float)."""
        return _readonly(np.arange(self.n // 2 + 1, dtype=float))

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        return _readonly(self.rk <= self.dealias_cutoff)

    @cached_property
    def parseval_weights(self) -> np.ndarray:
        """Weights turning half-spectrum products into L2 inner products."""
        w = np.full(self.n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return _readonly(w)

    def to_values(self, coeffs: np.ndarray) -> np.ndarray:
        return np.fft.irfft(coeffs, self.n, norm="forward")

    def to_coeffs(self, values: np.ndarray) -> np.ndarray:
        return np.fft.rfft(values, norm="forward")


def make_grid(n: int) -> GridSpec:
    """Grid with ``n`` nodes and the two-thirds dealiasing cutoff ``floor(n/3)``."""
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool):
        raise TypeError(f"node count must be an integer, got {n!r}")
    if n < MIN_NODES or n % 2:
        raise ValueError(f"node count must be even and >= {MIN_NODES}, got {n}")
    return GridSpec(int(n), int(n) // 3)


class SpectralField:
    """Real periodic field on a grid; immutable."""

    __slots__ = ("grid", "_coeffs", "_values")

    def __init__(self, grid: GridSpec, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=complex)
        if coeffs.shape != (grid.n // 2 + 1,):
            raise ValueError(f"expected {grid.n // 2 + 1} half-spectrum coefficients, got {coeffs.shape}")
        coeffs = np.array(coeffs)
        # Real field: the k = 0 and Nyquist coefficients carry no imaginary part.
        coeffs[0] = coeffs[0].real
        coeffs[-1] = coeffs[-1].real
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("field coefficients must be finite")
        coeffs.flags.writeable = False
        self.grid = grid
        self._coeffs = coeffs
        self._values = None

    @classmethod
    def from_values(cls, grid: GridSpec, values) -> "SpectralField":
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n,):
            raise ValueError(f"expected {grid.n} nodal values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        return cls(grid, grid.to_coeffs(values))

    @classmethod
    def from_function(cls, grid: GridSpec, func) -> "SpectralField":
        return cls.from_values(grid, func(np.asarray(grid.nodes)))

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            v = self.grid.to_values(self._coeffs)
            v.flags.writeable = False
            self._values = v
        return self._values

    @property
    def spectrum(self) -> np.ndarray:
        """Full Hermitian spectrum in FFT order (length n)."""
        n = self.grid.n
        full = np.empty(n, dtype=complex)
        full[: n // 2 + 1] = self._coeffs
        full[n // 2 + 1 :] = np.conj(self._coeffs[1 : n // 2][::-1])
        return full

    @property
    def mean(self) -> float:
        return float(self._coeffs[0].real)

    def _check_grid(self, other: "SpectralField"):
        if other.grid != self.grid:
            raise GridMismatchError(f"grid n={self.grid.n} vs n={other.grid.n}")

    def _combine(self, coeffs):
        return SpectralField(self.grid, coeffs)

    def __add__(self, other):
        if isinstance(other, SpectralField):
            self._check_grid(other)
            return self._combine(self._coeffs + other._coeffs)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, SpectralField):
            self._check_grid(other)
            return self._combine(self._coeffs - other._coeffs)
        return NotImplemented

    def __mul__(self, scalar):
        if isinstance(scalar, (int, float, np.floating, np.integer)):
            return self._combine(self._coeffs * float(scalar))
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return self._combine(-self._coeffs)

    def __repr__(self):
        return f"{type(self).__name__}(n={self.grid.n}, mean={self.mean:.3g})"


class Profile(SpectralField):
    """Zero-mean real periodic field: the state variable u."""

    __slots__ = ()

    def __init__(self, grid: GridSpec, coeffs: np.ndarray):
        coeffs = np.array(coeffs, dtype=complex)
        scale = max(1.0, float(np.max(np.abs(coeffs)))) if coeffs.size else 1.0
        if abs(coeffs[0]) > MEAN_TOL * scale:
            raise ValueError(f"profile must have zero mean, got mean {coeffs[0].real:.3e}")
        coeffs[0] = 0.0
        super().__init__(grid, coeffs)

    @classmethod
    def from_values(cls, grid: GridSpec, values, *, remove_mean: bool = False) -> "Profile":
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n,):
            raise ValueError(f"expected {grid.n} nodal values, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("profile values must be finite")
        coeffs = grid.to_coeffs(values)
        if remove_mean:
            coeffs[0] = 0.0
        return cls(grid, coeffs)

    @classmethod
    def from_function(cls, grid: GridSpec, func, *, remove_mean: bool = False) -> "Profile":
        return cls.from_values(grid, func(np.asarray(grid.nodes)), remove_mean=remove_mean)

    @classmethod
    def from_field(cls, field: SpectralField) -> "Profile":
        return cls(field.grid, field.coeffs)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Profile":
        return cls(grid, np.zeros(grid.n // 2 + 1, dtype=complex))

    def _combine(self, coeffs):
        return Profile(self.grid, coeffs)

    def band_limited(self, cutoff: int | None = None) -> "Profile":
        """Projection onto wavenumbers ``|k| <= cutoff`` (default: dealias cutoff)."""
        cutoff = self.grid.dealias_cutoff if cutoff is None else cutoff
        return Profile(self.grid, np.where(self.grid.rk <= cutoff, self._coeffs, 0.0))


def inner(f: SpectralField, g: SpectralField) -> float:
    """L2(I) inner product (exact for products of trigonometric polynomials on the grid)."""
    f._check_grid(g)
    w = f.grid.parseval_weights
    return float(np.sum(w * (f.coeffs.real * g.coeffs.real + f.coeffs.imag * g.coeffs.imag)))


def coeff_norm(grid: GridSpec, coeffs: np.ndarray) -> float:
    """L2 norm from half-spectrum coefficients, scaled so tiny fields do not underflow."""
    scale = float(np.max(np.abs(coeffs))) if coeffs.size else 0.0
    if scale == 0.0 or not math.isfinite(scale):
        return scale
    if scale < 1e-290:
        # Lift subnormal magnitudes before dividing so 1/scale cannot overflow.
        lift = 2.0**600
        coeffs, scale = coeffs * lift, scale * lift
        return coeff_norm(grid, coeffs) / lift
    c = coeffs / scale
    return scale * math.sqrt(float(np.sum(grid.parseval_weights * (c.real**2 + c.imag**2))))


def norm(f: SpectralField) -> float:
    return coeff_norm(f.grid, f.coeffs)


def derivative_symbol(grid: GridSpec, order: int) -> np.ndarray:
    """Half-spectrum multiplier of d^order/dx^order; Nyquist zeroed for odd order."""
    if order not in (1, 2, 3, 4):
        raise ValueError(f"derivative order must be 1..4, got {order}")
    sym = (2j * math.pi * grid.rk) ** order
    if order % 2:
        sym[-1] = 0.0
    return sym


def derivative(f: SpectralField, order: int) -> SpectralField:
    return SpectralField(f.grid, derivative_symbol(f.grid, order) * f.coeffs)


def hilbert_symbol(grid: GridSpec) -> np.ndarray:
    """Multiplier -i sgn(k) on the half spectrum; k = 0 and Nyquist map to zero."""
    sym = -1j * np.sign(grid.rk)
    sym[-1] = 0.0
    return sym


def hilbert(f: SpectralField) -> SpectralField:
    return SpectralField(f.grid, hilbert_symbol(f.grid) * f.coeffs)


def kernel_symbol(grid: GridSpec) -> np.ndarray:
    """Fourier coefficients of ln|sin(pi x)|: -ln 2 at k = 0 and -1/(2|k|) otherwise."""
    k = np.asarray(grid.rk)
    sym = np.empty_like(k)
    sym[0] = -LN2 + _kernel_offset.get()
    sym[1:] = -0.5 / k[1:]
    return sym


@contextlib.contextmanager
def perturbed_kernel(offset: float):
    """Shift the k = 0 kernel coefficient inside the block (negative-control hook)."""
    token = _kernel_offset.set(float(offset))
    try:
        yield
    finally:
        _kernel_offset.reset(token)


def log_kernel_convolve(f: SpectralField) -> SpectralField:
    """x -> integral over I of ln|sin(pi (x - y))| f(y) dy."""
    return SpectralField(f.grid, kernel_symbol(f.grid) * f.coeffs)


def _padded_values(f: SpectralField, m: int) -> np.ndarray:
    c = np.zeros(m // 2 + 1, dtype=complex)
    c[: f.grid.dealias_cutoff + 1] = f.coeffs[: f.grid.dealias_cutoff + 1]
    return np.fft.irfft(c, m, norm="forward")


def _truncate(grid: GridSpec, coeffs_fine: np.ndarray) -> np.ndarray:
    out = np.zeros(grid.n // 2 + 1, dtype=complex)
    kc = grid.dealias_cutoff
    out[: kc + 1] = coeffs_fine[: kc + 1]
    return out


def dealiased_product(f: SpectralField, g: SpectralField, *, pad: bool = False) -> SpectralField:
    """Product of the band-limited parts of f and g, projected onto ``|k| <= cutoff``.

    The two-thirds rule makes the nodal product exact after masking; ``pad`` evaluates
    on a 2n grid instead and must agree.
    """
    f._check_grid(g)
    grid = f.grid
    if pad:
        m = 2 * grid.n
        prod = _padded_values(f, m) * _padded_values(g, m)
        return SpectralField(grid, _truncate(grid, np.fft.rfft(prod, norm="forward")))
    mask = grid.dealias_mask
    fv = grid.to_values(np.where(mask, f.coeffs, 0.0))
    gv = grid.to_values(np.where(mask, g.coeffs, 0.0))
    return SpectralField(grid, np.where(mask, grid.to_coeffs(fv * gv), 0.0))


def dealiased_cube(f: SpectralField, *, pad: bool = True) -> SpectralField:
    """Cube of the band-limited part of f, projected onto ``|k| <= cutoff``.

    A cubic product of modes up to the cutoff reaches 3*cutoff, beyond what the
    two-thirds mask removes, so the default evaluates on a 2n grid.
    """
    grid = f.grid
    if pad:
        m = 2 * grid.n
        fv = _padded_values(f, m)
        return SpectralField(grid, _truncate(grid, np.fft.rfft(fv**3, norm="forward")))
    mask = grid.dealias_mask
    fv = grid.to_values(np.where(mask, f.coeffs, 0.0))
    return SpectralField(grid, np.where(mask, grid.to_coeffs(fv**3), 0.0))
