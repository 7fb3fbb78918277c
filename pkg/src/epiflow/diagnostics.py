"""Certificates for the quantitative statements about the flow, evaluated on trajectories.

Every check reads only the stored states and per-sample scalars of a Trajectory, so a
reloaded trajectory reproduces each certificate exactly. Energies enter through the
excess E - E(0), which keeps differences accurate after the state has decayed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .energy import ModelParams, convexity_gap, energy, energy_excess, equilibrium_energy
from .flow import Trajectory, random_profile, cosine_profile
from .oracle import QuadratureSpec, kernel_mass, quad_energy
from .spectral import LN2, GridSpec, Profile, coeff_norm, derivative, hilbert, norm

EVI_TOL = 1e-6
SLOPE_TOL = 1e-8
DECAY_TOL = 1e-8
RATE_SLACK = 0.05
IDENTITY_TOL = 1e-8
ISOMETRY_TOL = 1e-10
KERNEL_MASS_TOL = 1e-8
CONVEXITY_TOL = 1e-8
ORACLE_TOL = 1e-6
# Samples with |u|^2 below this are excluded from the decay-rate fit.
FIT_FLOOR = 1e-250

_PI2 = 4.0 * math.pi**2


class CertificateKind(str, Enum):
    EVI = "EVI"
    SLOPE_DECAY = "SlopeDecay"
    EXP_DECAY = "ExpDecay"
    POSITIVITY = "Positivity"
    IDENTITY = "Identity"
    CONVEXITY_PROBE = "ConvexityProbe"
    DIFF_QUOTIENT = "DiffQuotient"
    ORACLE_AGREEMENT = "OracleAgreement"


@dataclass
class Certificate:
    """Outcome of one check: passed iff worst_margin <= tolerance."""

    kind: CertificateKind
    passed: bool
    worst_margin: float
    tolerance: float
    details: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "pass": bool(self.passed),
            "worst_margin": _json_num(self.worst_margin),
            "tolerance": self.tolerance,
            "summary": {k: _json_value(v) for k, v in self.summary.items()},
            "details": {k: _json_value(v) for k, v in self.details.items()},
        }


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "infinity" if x > 0 else "-infinity"
    return x


def _json_value(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_json_value(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return _json_num(v)
    return v


def _make(kind, margins, tolerance, details=None, summary=None, extra_ok=True) -> Certificate:
    margins = np.asarray(margins, dtype=float)
    worst = float(np.max(margins)) if margins.size else -math.inf
    passed = bool(extra_ok) and worst <= tolerance
    return Certificate(kind, passed, worst, tolerance, details or {}, summary or {})


def _dist2(grid, x, y) -> float:
    return coeff_norm(grid, x - y) ** 2


# Trajectory checks ------------------------------------------------------------


def evi_dictionary(grid: GridSpec, a: float, size: int = 20, seed: int = 0) -> list[Profile]:
    """Admissible test profiles: the flat state, single cosines and random profiles."""
    tests = [Profile.zeros(grid)]
    rng = np.random.default_rng(seed)
    kc = grid.dealias_cutoff
    while len(tests) < size:
        if len(tests) % 3 == 1:
            tests.append(cosine_profile(grid, a, float(rng.uniform(-0.9, 0.9)), int(rng.integers(1, min(kc, 4) + 1))))
        else:
            tests.append(random_profile(grid, a, float(rng.uniform(0.05, 0.5)), int(rng.integers(1, kc + 1)), int(rng.integers(2**31))))
    return tests[:size]


def evi_check(traj: Trajectory, tests: list[Profile], p: ModelParams, tol: float | None = None) -> Certificate:
    """Discrete evolution variational inequality for every step and test profile:

    (|u1 - w|^2 - |u0 - w|^2) / (2 tau) + C |u1 - w|^2 <= E(w) - E(u1).
    """
    if len(traj) < 1:
        raise ValueError("trajectory has no stored states")
    grid = traj.grid
    e_tests = [energy_excess(w, p) for w in tests]
    scale = max([abs(energy(w, p).total) for w in tests] + [abs(traj.samples["E"][0])])
    tol = EVI_TOL * (1.0 + scale) if tol is None else tol
    excess = traj.samples["excess"]
    taus = traj.samples["tau"]
    per_step = []
    for n in range(len(traj) - 1):
        u0, u1 = traj.states[n].coeffs, traj.states[n + 1].coeffs
        tau = taus[n + 1]
        worst = -math.inf
        for w, ew in zip(tests, e_tests):
            d1 = _dist2(grid, u1, w.coeffs)
            # |u1-w|^2 - |u0-w|^2 = <u1 - u0, u1 + u0 - 2w>, without cancellation.
            a_, b_ = u1 - u0, u1 + u0 - 2.0 * w.coeffs
            diff = float(np.sum(grid.parseval_weights * (a_.real * b_.real + a_.imag * b_.imag)))
            lhs = diff / (2.0 * tau) + p.C * d1
            worst = max(worst, lhs - (ew - excess[n + 1]))
        per_step.append(worst)
    return _make(
        CertificateKind.EVI, per_step, tol,
        details={"t": traj.samples["t"][1:], "step_margin": per_step},
        summary={"n_tests": len(tests), "n_steps": len(per_step)},
    )


def slope_decay_check(traj: Trajectory, p: ModelParams, tol: float = SLOPE_TOL) -> Certificate:
    """exp(2 C t) |dE| nonincreasing, and t -> E(u(t)) convex on the sample grid."""
    t = traj.array("t")
    scaled = np.exp(2.0 * p.C * t) * traj.array("slope")
    prev = scaled[:-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        slope_margin = np.where(prev > 0, (scaled[1:] - prev) / np.where(prev > 0, prev, 1.0), np.where(scaled[1:] > 0, math.inf, 0.0))
    e = traj.array("excess")
    dd = np.diff(e) / np.diff(t) if t.size > 1 else np.array([])
    conv_margin = dd[:-1] - dd[1:] if dd.size > 1 else np.array([])
    margins = np.concatenate([slope_margin, conv_margin])
    return _make(
        CertificateKind.SLOPE_DECAY, margins, tol,
        details={"scaled_slope": scaled, "slope_margin": slope_margin, "convexity_margin": conv_margin},
        summary={
            "worst_slope_margin": float(np.max(slope_margin)) if slope_margin.size else None,
            "worst_convexity_margin": float(np.max(conv_margin)) if conv_margin.size else None,
        },
    )


def exp_decay_check(traj: Trajectory, p: ModelParams, tol: float = DECAY_TOL) -> Certificate:
    """|u(t)|^2 <= (E(u0) - E(0)) / C * exp(-4 C t), plus a fitted decay rate."""
    t = traj.array("t")
    l2sq = traj.array("l2_u") ** 2
    bound0 = traj.samples["excess"][0] / p.C
    margins = l2sq - bound0 * np.exp(-4.0 * p.C * t)
    keep = l2sq > FIT_FLOOR
    rate = None
    rate_ok = True
    target = -4.0 * p.C * (1.0 - RATE_SLACK)
    if np.count_nonzero(keep) >= 2 and np.ptp(t[keep]) > 0:
        rate = float(np.polyfit(t[keep], np.log(l2sq[keep]), 1)[0])
        rate_ok = rate <= target
    return _make(
        CertificateKind.EXP_DECAY, margins, tol,
        details={"l2_sq": l2sq, "margin": margins},
        summary={"fitted_rate": rate, "rate_threshold": target, "rate_ok": rate_ok,
                 "initial_bound": bound0, "fit_samples": int(np.count_nonzero(keep))},
        extra_ok=rate_ok,
    )


def compute_c0(a: float) -> float:
    """Threshold constant for |v|^2 in the slope-to-curvature estimate.

    With X = |v|^2 and mean v = a: |H(u_xx)|^2 = X - a^2, and for v >= 0 the variance of
    v^2 is at least X^2 (X - a^2) / a^2, so by Poincare |[v^2]_x|^2 >= 4 pi^2 X^2 (X - a^2) / a^2.
    The resulting quadratic threshold gives X - a^2 <= max(2a - a^2, 0), hence
    C0 = 4 pi^2 max(2a - a^2, 0).
    """
    return _PI2 * max(2.0 * a - a * a, 0.0)


def positivity_constants(a: float, h0: float) -> dict:
    """c* = a exp(-max(2 C0', 3 H0)) with C0' = max(C0, 2 sqrt(C0)) and C_{inf,2} = 1."""
    c0 = compute_c0(a)
    c0_eff = max(c0, 2.0 * math.sqrt(c0))
    exponent = max(2.0 * c0_eff, 3.0 * h0)
    return {
        "C0": c0,
        "C0_effective": c0_eff,
        "H0": h0,
        "C_inf_2": 1.0,
        "exponent": exponent,
        "binding_branch": "2*C0" if 2.0 * c0_eff >= 3.0 * h0 else "3*H0",
        "c_star": a * math.exp(-exponent),
    }


def _fine_values(u: Profile, factor: int = 4):
    """u_xx and u_xxx on a grid ``factor`` times finer (exact for the stored modes)."""
    grid = u.grid
    m = factor * grid.n
    k = grid.rk
    c = np.zeros(m // 2 + 1, dtype=complex)
    c[: k.size] = u.coeffs
    kf = np.arange(m // 2 + 1, dtype=float)
    w = np.fft.irfft(-((2 * math.pi * kf) ** 2) * c, m, norm="forward")
    wx = np.fft.irfft((2j * math.pi * kf) ** 3 * c, m, norm="forward")
    return w, wx


def log_gradient_norm(u: Profile, a: float) -> float:
    """|[ln v]_x| in L2, by v_x / v on a refined grid."""
    w, wx = _fine_values(u)
    v = a + w
    return math.sqrt(float(np.mean((wx / v) ** 2)))


def positivity_certificate(traj: Trajectory, p: ModelParams) -> Certificate:
    """min v(t_n) >= c* for all samples, with an a-posteriori bound reported alongside."""
    a = p.a
    consts = positivity_constants(a, traj.samples["slope"][0])
    c_star = consts["c_star"]
    min_v = traj.array("min_v")
    post, mean_ln = [], []
    for u in traj.states:
        w, _ = _fine_values(u)
        ml = float(np.mean(np.log(a + w)))
        mean_ln.append(ml)
        post.append(math.exp(ml - log_gradient_norm(u, a)))
    post = np.asarray(post)
    drop = (min_v[0] - float(np.min(min_v))) / min_v[0]
    return _make(
        CertificateKind.POSITIVITY, c_star - min_v, 0.0,
        details={"min_v": min_v, "a_posteriori_bound": post, "mean_ln_v": mean_ln},
        summary={
            **consts,
            "observed_min_v": float(np.min(min_v)),
            "initial_min_v": float(min_v[0]),
            "relative_drop_below_initial": max(drop, 0.0),
            "within_one_percent": bool(drop <= 0.01),
            "a_posteriori_holds": bool(np.all(min_v >= post * (1 - 1e-12))),
            "jensen_upper_mean_ln_v": math.log(a),
            "mean_ln_v_range": [float(np.min(mean_ln)), float(np.max(mean_ln))],
        },
    )


def diff_quotient_check(traj: Trajectory, p: ModelParams) -> Certificate:
    """max |(u_{n+1} - u_n) / tau_n| <= E(u0) + c0, c0 = 1/e + 2 ln 2 sup |v_n|^2."""
    dq = traj.array("dq_norm")[1:]
    # |v|^2 = a^2 + |u_xx|^2 for zero-mean u.
    sup_v2 = max(p.a**2 + norm(derivative(u, 2)) ** 2 for u in traj.states)
    c0 = 1.0 / math.e + 2.0 * LN2 * sup_v2
    bound = traj.samples["E"][0] + c0
    worst = float(np.max(dq)) if dq.size else 0.0
    return _make(
        CertificateKind.DIFF_QUOTIENT, [worst - bound], 0.0,
        details={"dq_norm": dq},
        summary={"max_dq": worst, "bound": bound, "c0": c0, "tightness": worst / bound if bound else None},
    )


def dissipation_report(traj: Trajectory) -> dict:
    """Fit K in |(E_{n+1} - E_n)/tau + slope(u_{n+1})^2| <= K tau over the steps."""
    if len(traj) < 2:
        return {"K_max": 0.0, "K_median": 0.0}
    e, s, tau = traj.array("excess"), traj.array("slope"), traj.array("tau")
    resid = np.abs(np.diff(e) / tau[1:] + s[1:] ** 2)
    ks = resid / tau[1:]
    return {"K_max": float(np.max(ks)), "K_median": float(np.median(ks)), "residual_max": float(np.max(resid))}


# Stateless checks ---------------------------------------------------------------


def identity_check(u: Profile, p: ModelParams, q: QuadratureSpec = QuadratureSpec()) -> Certificate:
    """Three-term flux expansion, Hilbert isometry and the kernel mass 2 ln 2.

    worst_margin is the largest error divided by its own tolerance; the certificate
    passes when it is at most 1.
    """
    a = p.a
    w, wx = _fine_values(u)
    v = a + w
    A = wx / v  # [ln v]_x
    B = 2.0 * v * wx  # [v^2]_x
    lhs = float(np.mean((A + 1.5 * B) ** 2))
    uxxx2 = norm(derivative(u, 3)) ** 2
    rhs = float(np.mean(A * A)) + 2.25 * float(np.mean(B * B)) + 6.0 * uxxx2
    flux_err = abs(lhs - rhs) / lhs if lhs > 0 else abs(rhs)
    uxx = derivative(u, 2)
    nu = norm(uxx)
    iso_err = abs(norm(hilbert(uxx)) - nu) / nu if nu > 0 else 0.0
    mass = kernel_mass(q)
    mass_err = abs(mass - 2.0 * LN2)
    ratios = [flux_err / IDENTITY_TOL, iso_err / ISOMETRY_TOL, mass_err / KERNEL_MASS_TOL]
    return _make(
        CertificateKind.IDENTITY, ratios, 1.0,
        summary={"flux_relative_error": flux_err, "isometry_relative_error": iso_err,
                 "kernel_mass": mass, "kernel_mass_error": mass_err, "flux_lhs": lhs, "flux_rhs": rhs},
    )


def convexity_probe(grid: GridSpec, p: ModelParams, n_triples: int = 1000, seed: int = 0) -> Certificate:
    """Sample convexity_gap over random admissible pairs and t in [0, 1]."""
    rng = np.random.default_rng(seed)
    kc = grid.dealias_cutoff
    margins = []
    for _ in range(n_triples):
        u = random_profile(grid, p.a, float(rng.uniform(0.0, 0.5)), int(rng.integers(1, kc + 1)), int(rng.integers(2**31)))
        w = random_profile(grid, p.a, float(rng.uniform(0.0, 0.5)), int(rng.integers(1, kc + 1)), int(rng.integers(2**31)))
        t = float(rng.uniform())
        scale = max(1.0, abs(energy(u, p).total), abs(energy(w, p).total))
        margins.append(-convexity_gap(u, w, t, p) / scale)
    return _make(CertificateKind.CONVEXITY_PROBE, margins, CONVEXITY_TOL,
                 details={"scaled_negative_gap": margins}, summary={"n_triples": n_triples})


def oracle_agreement(profiles: list[Profile], p: ModelParams, q: QuadratureSpec = QuadratureSpec()) -> Certificate:
    """Spectral energy against the quadrature energy, plus E(0) against its closed form."""
    errs = [abs(energy(u, p).total - quad_energy(u, p, q)) for u in profiles]
    grid = profiles[0].grid if profiles else None
    if grid is not None:
        errs.append(abs(energy(Profile.zeros(grid), p).total - equilibrium_energy(p.a)))
    return _make(CertificateKind.ORACLE_AGREEMENT, errs, ORACLE_TOL, details={"abs_error": errs})


def write_report(path, certificates: list[Certificate], *, config_hash: str, extra: dict | None = None,
                 timestamp: str | None = None) -> dict:
    """Serialize certificates; the timestamp lives under its own key."""
    rec = {
        "config_hash": config_hash,
        "all_pass": all(c.passed for c in certificates),
        "certificates": [c.to_dict() for c in certificates],
        **({k: _json_value(v) for k, v in (extra or {}).items()}),
        "generated_at": timestamp,
    }
    Path(path).write_text(json.dumps(rec, indent=1, allow_nan=False, sort_keys=False))
    return rec
