"""Pseudospectral minimizing-movement solver for a nonlocal epitaxial-growth gradient flow."""
from .energy import ModelParams, EnergyReport, energy, energy_excess, convexity_gap, phi, phi_prime, phi_second
from .spectral import GridSpec, Profile, SpectralField, make_grid
from .subgradient import DegenerateProfileError, SubgradientField, hessian_apply, slope_norm, subgrad

__all__ = [
    "DegenerateProfileError",
    "EnergyReport",
    "GridSpec",
    "ModelParams",
    "Profile",
    "SpectralField",
    "SubgradientField",
    "convexity_gap",
    "energy",
    "energy_excess",
    "hessian_apply",
    "make_grid",
    "phi",
    "phi_prime",
    "phi_second",
    "slope_norm",
    "subgrad",
]
