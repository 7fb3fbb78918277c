"""Time stepping: the proximal (minimizing-movement) scheme and an RK4 reference.

One proximal step solves

    w = argmin  |w - u|^2 / (2 tau) + E(w)

over zero-mean states in the resolved band. J is (1/tau + 2C)-strongly convex, so damped
Newton from w = u converges to the unique minimizer. Newton systems are solved matrix-free
by preconditioned conjugate gradients on the half spectrum.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .energy import ModelParams, energy, energy_excess_coeffs
from .spectral import GridSpec, Profile, coeff_norm, make_grid
from .subgradient import (
    V_FLOOR,
    DegenerateProfileError,
    hessian_coeffs,
    hessian_symbol_at_rest,
    slope_norm,
    subgrad_coeffs,
)

PROX_TOL = 1e-9
MAX_ITERS = 50
MAX_HALVINGS = 40
FRACTION_TO_BOUNDARY = 0.99
ARMIJO = 1e-4
CG_TOL = 1e-11
# Below this amplitude of u_xx / a the quadratic part of the flux is under 1e-100
# relative to the linear part.
LINEAR_REGIME = 1e-100
CG_MAXITER = 400
PROFILE_MARGIN = 0.05
# Real-axis extent of the RK4 stability region.
RK4_STABILITY = 2.785

_PI2 = 4.0 * math.pi**2
_PI4 = 16.0 * math.pi**4


class StepRejected(RuntimeError):
    """The inner Newton solve failed; the caller should shrink tau."""

    def __init__(self, reason: str, iterations: int = 0, residual: float = math.nan):
        super().__init__(f"{reason} (iterations={iterations}, residual={residual:.3e})")
        self.reason = reason
        self.iterations = iterations
        self.residual = residual


class InadmissibleProfileError(ValueError):
    """Initial data with u_xx + a not bounded away from zero."""


@dataclass(frozen=True)
class StepResult:
    next: Profile
    tau: float
    newton_iters: int
    prox_residual: float
    energy_drop: float
    min_v_next: float
    cg_iters: int = 0


def _pw_dot(grid: GridSpec, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(grid.parseval_weights * (x.real * y.real + x.imag * y.imag)))


def _pcg(grid, apply, b, precond, tol, maxiter):
    """Preconditioned CG for a symmetric positive operator on half-spectrum vectors."""
    scale = float(np.max(np.abs(b)))
    if scale == 0.0:
        return np.zeros_like(b), 0
    b = b / scale
    x = np.zeros_like(b)
    r = b.copy()
    z = r / precond
    p = z.copy()
    rz = _pw_dot(grid, r, z)
    bnorm = math.sqrt(_pw_dot(grid, b, b))
    for i in range(1, maxiter + 1):
        ap = apply(p)
        alpha = rz / _pw_dot(grid, p, ap)
        x += alpha * p
        r -= alpha * ap
        if math.sqrt(_pw_dot(grid, r, r)) <= tol * bnorm:
            return x * scale, i
        z = r / precond
        rz_new = _pw_dot(grid, r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x * scale, maxiter


def prox_step(
    u: Profile,
    tau: float,
    p: ModelParams,
    *,
    initial: Profile | None = None,
    tol: float = PROX_TOL,
    max_iters: int = MAX_ITERS,
) -> StepResult:
    """One minimizing-movement step of size ``tau`` from ``u``.

    Converged when |(w - u)/tau + dE(w)| <= tol * min(1/tau, |dE(u)|). Raises
    StepRejected when Newton does not converge or the energy would increase.
    """
    if not (math.isfinite(tau) and tau > 0):
        raise ValueError(f"tau must be positive and finite, got {tau}")
    grid, a = u.grid, p.a
    mask = grid.dealias_mask.copy()
    mask[0] = False
    uc = np.where(mask, u.coeffs, 0.0)
    g0, min_v0 = subgrad_coeffs(grid, uc, a)
    g0norm = coeff_norm(grid, g0)
    e_u = energy_excess_coeffs(grid, uc, a)
    if g0norm == 0.0 and initial is None:
        return StepResult(Profile(grid, uc), tau, 0, 0.0, 0.0, min_v0)
    target = tol * min(1.0 / tau, g0norm) if g0norm > 0 else tol / tau

    k2 = _PI2 * grid.rk**2
    if initial is None and float(np.max(np.abs(grid.to_values(k2 * uc)))) <= LINEAR_REGIME * a:
        # The flux is linear in u_xx to far below roundoff: solve the diagonal system.
        w = np.where(mask, uc / (1.0 + tau * hessian_symbol_at_rest(grid, a)), 0.0)
        gw, min_v = subgrad_coeffs(grid, w, a)
        rnorm = coeff_norm(grid, np.where(mask, (w - uc) / tau + gw, 0.0))
        drop = e_u - energy_excess_coeffs(grid, w, a)
        if not drop >= 0.0:
            raise StepRejected(f"energy increased by {-drop:.3e}", 0, rnorm)
        return StepResult(Profile(grid, w), tau, 0, rnorm, drop, min_v)
    hil = _PI4 * grid.rk**3

    def objective(c):
        e = energy_excess_coeffs(grid, c, a)
        return coeff_norm(grid, c - uc) ** 2 / (2.0 * tau) + e, e

    w = uc.copy() if initial is None else np.where(mask, initial.coeffs, 0.0)
    if initial is not None:
        subgrad_coeffs(grid, w, a)  # rejects an inadmissible guess
    j_w, _ = objective(w)
    cg_total = 0
    for it in range(max_iters + 1):
        gw, _ = subgrad_coeffs(grid, w, a)
        res = np.where(mask, (w - uc) / tau + gw, 0.0)
        rnorm = coeff_norm(grid, res)
        if rnorm <= target:
            break
        if it == max_iters:
            raise StepRejected("Newton iteration limit reached", it, rnorm)
        v = a + grid.to_values(-k2 * w)
        weight = 1.0 / v + 3.0 * v
        precond = np.where(mask, 1.0 / tau + float(np.mean(weight)) * _PI4 * grid.rk**4 - hil, 1.0)

        def apply(d):
            return d / tau + hessian_coeffs(grid, weight, d)

        step, n_cg = _pcg(grid, apply, -res, precond, CG_TOL, CG_MAXITER)
        step = np.where(mask, step, 0.0)
        cg_total += n_cg
        dv = grid.to_values(-k2 * step)
        neg = dv < 0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, float(np.min(FRACTION_TO_BOUNDARY * v[neg] / -dv[neg])))
        slope = _pw_dot(grid, res / max(rnorm, 1e-300), step) * max(rnorm, 1e-300)
        for _ in range(60):
            trial = w + alpha * step
            j_t, _ = objective(trial)
            slack = 8.0 * np.finfo(float).eps * (abs(j_w) + abs(e_u))
            if j_t <= j_w + ARMIJO * alpha * slope + slack:
                break
            alpha *= 0.5
        else:
            raise StepRejected("line search failed", it, rnorm)
        w, j_w = trial, j_t
    e_w = energy_excess_coeffs(grid, w, a)
    drop = e_u - e_w
    if not drop >= 0.0:
        raise StepRejected(f"energy increased by {-drop:.3e}", it, rnorm)
    min_v = float(np.min(a + grid.to_values(-k2 * w)))
    return StepResult(Profile(grid, w), tau, it, rnorm, drop, min_v, cg_total)


def explicit_step(u: Profile, tau: float, p: ModelParams) -> Profile:
    """Classical RK4 step for u_t = -dE/du."""
    grid, a = u.grid, p.a

    def rhs(c):
        return -subgrad_coeffs(grid, c, a)[0]

    c = u.coeffs
    k1 = rhs(c)
    k2 = rhs(c + 0.5 * tau * k1)
    k3 = rhs(c + 0.5 * tau * k2)
    k4 = rhs(c + tau * k3)
    return Profile(grid, c + tau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


class DenseRHS:
    """-dE/du on the resolved band as dense real matrices.

    The state is X = (Re c_1..c_K, Im c_1..c_K). Used by the long RK4 reference runs,
    where FFT call overhead dominates at small n. Agrees with subgrad to roundoff.
    """

    def __init__(self, grid: GridSpec, a: float):
        self.grid, self.a = grid, a
        kc = grid.dealias_cutoff
        k = np.arange(1, kc + 1, dtype=float)
        ph = 2.0 * math.pi * np.outer(grid.nodes, k)
        cos, sin = np.cos(ph), np.sin(ph)
        k2 = _PI2 * k**2
        # u_xx at the nodes from (Re c, Im c).
        self.to_w = np.hstack([-2.0 * k2 * cos, 2.0 * k2 * sin])
        # -d_xx of the projected flux, as (Re, Im) coefficients.
        n = grid.n
        self.from_flux = np.vstack([(k2[:, None] * cos.T) / n, (-k2[:, None] * sin.T) / n])
        self.lin = np.concatenate([_PI4 * k**3, _PI4 * k**3])
        self.kc = kc

    def pack(self, coeffs: np.ndarray) -> np.ndarray:
        c = coeffs[1 : self.kc + 1]
        return np.concatenate([c.real, c.imag])

    def unpack(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.n // 2 + 1, dtype=complex)
        out[1 : self.kc + 1] = x[: self.kc] + 1j * x[self.kc :]
        return out

    def min_v(self, x: np.ndarray) -> float:
        return self.a + float(np.min(self.to_w @ x))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        w = self.to_w @ x
        if np.min(w) + self.a <= V_FLOOR:
            raise DegenerateProfileError("u_xx + a reached zero during explicit integration")
        f = np.log1p(w / self.a) + w * (3.0 * self.a + 1.5 * w)
        return self.lin * x + self.from_flux @ f


def rk4_stable_step(u: Profile, p: ModelParams, safety: float = 0.9) -> float:
    """Step size well inside the RK4 stability region for the linearization at u."""
    w = u.grid.to_values(-_PI2 * u.grid.rk**2 * u.coeffs)
    v = p.a + w
    top = float(np.max(1.0 / v + 3.0 * v))
    kc = u.grid.dealias_cutoff
    return safety * RK4_STABILITY / (_PI4 * top * kc**4)


def integrate_rk4(u0: Profile, t_final: float, p: ModelParams, tau: float | None = None) -> Profile:
    """RK4 from 0 to t_final with a uniform step no larger than ``tau``."""
    if not t_final >= 0:
        raise ValueError("t_final must be nonnegative")
    if t_final == 0:
        return u0
    tau = tau or rk4_stable_step(u0, p)
    steps = max(1, math.ceil(t_final / tau))
    h = t_final / steps
    f = DenseRHS(u0.grid, p.a)
    x = f.pack(u0.coeffs)
    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Profile(u0.grid, f.unpack(x))


# Initial data ---------------------------------------------------------------


def _require_admissible(u: Profile, a: float, margin: float = 0.0) -> Profile:
    min_v = a + float(np.min(u.grid.to_values(-_PI2 * u.grid.rk**2 * u.coeffs)))
    if not min_v > max(margin * a, V_FLOOR):
        raise InadmissibleProfileError(f"initial profile violates v > 0 (min v = {min_v:.4g})")
    return u


def cosine_profile(grid: GridSpec, a: float, rho: float, k: int = 1) -> Profile:
    """u with u_xx + a = a (1 + rho cos(2 pi k x)); requires |rho| < 1."""
    if not abs(rho) < 1:
        raise InadmissibleProfileError(f"initial profile violates v > 0 (|rho| = {abs(rho)} >= 1)")
    if not (isinstance(k, int) and 1 <= k <= grid.dealias_cutoff):
        raise ValueError(f"mode k must be an integer in [1, {grid.dealias_cutoff}], got {k}")
    c = np.zeros(grid.n // 2 + 1, dtype=complex)
    c[k] = -a * rho / (2.0 * _PI2 * k * k)
    return _require_admissible(Profile(grid, c), a)


def random_profile(
    grid: GridSpec,
    a: float,
    amplitude: float,
    n_modes: int,
    seed: int,
    margin: float = PROFILE_MARGIN,
    max_draws: int = 100,
) -> Profile:
    """Random band-limited u with rms(u_xx) = amplitude * a, redrawn while min v <= margin * a."""
    if not 1 <= n_modes <= grid.dealias_cutoff:
        raise ValueError(f"n_modes must lie in [1, {grid.dealias_cutoff}], got {n_modes}")
    if not amplitude >= 0:
        raise ValueError("amplitude must be nonnegative")
    rng = np.random.default_rng(seed)
    k = np.arange(1, n_modes + 1)
    for _ in range(max_draws):
        wc = (rng.standard_normal(n_modes) + 1j * rng.standard_normal(n_modes)) / k
        wc *= amplitude * a / math.sqrt(2.0 * np.sum(np.abs(wc) ** 2))
        c = np.zeros(grid.n // 2 + 1, dtype=complex)
        c[1 : n_modes + 1] = -wc / (_PI2 * k**2)
        u = Profile(grid, c)
        try:
            return _require_admissible(u, a, margin)
        except InadmissibleProfileError:
            continue
    raise InadmissibleProfileError(f"initial profile violates v > 0 in {max_draws} draws")


# Trajectories ---------------------------------------------------------------


@dataclass(frozen=True)
class StepSchedule:
    """Fixed or adaptive step-size control."""

    t_final: float
    tau0: float = 1e-4
    tau_max: float = 1e-2
    growth: float = 1.2
    n_grow: int = 5
    adaptive: bool = True
    stop_slope: float = 0.0
    max_halvings: int = MAX_HALVINGS
    max_steps: int = 1_000_000
    checkpoint_times: tuple = ()

    def __post_init__(self):
        for name in ("t_final", "tau0", "tau_max", "growth"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val)):
                raise ValueError(f"{name} must be a finite number")
        if self.t_final < 0:
            raise ValueError("t_final must be nonnegative")
        if not 0 < self.tau0 <= self.tau_max:
            raise ValueError("need 0 < tau0 <= tau_max")
        if self.growth < 1:
            raise ValueError("growth factor must be >= 1")
        if self.n_grow < 1 or self.max_halvings < 0 or self.max_steps < 1:
            raise ValueError("n_grow, max_steps must be positive and max_halvings nonnegative")
        if self.stop_slope < 0:
            raise ValueError("stop_slope must be nonnegative")
        cps = tuple(float(c) for c in self.checkpoint_times)
        if any(not (0 <= c <= self.t_final) for c in cps):
            raise ValueError("checkpoint times must lie in [0, t_final]")
        object.__setattr__(self, "checkpoint_times", tuple(sorted(set(cps))))


SAMPLE_FIELDS = ("t", "tau", "E", "excess", "slope", "min_v", "l2_u", "dq_norm", "newton_iters", "energy_drop", "prox_residual")
CSV_FIELDS = ("t", "E", "slope", "min_v", "l2_u", "dq_norm")


@dataclass
class Trajectory:
    """Accepted states and per-sample scalars of one run."""

    grid: GridSpec
    params: ModelParams
    schedule: StepSchedule
    states: list = field(default_factory=list)
    samples: dict = field(default_factory=lambda: {k: [] for k in SAMPLE_FIELDS})
    aborted: bool = False
    abort_reason: str | None = None

    def record(self, u: Profile, t: float, step: StepResult | None):
        rep = energy(u, self.params)
        s = self.samples
        s["t"].append(float(t))
        s["E"].append(rep.total)
        s["excess"].append(rep.excess)
        s["slope"].append(slope_norm(u, self.params))
        s["min_v"].append(rep.min_v)
        s["l2_u"].append(coeff_norm(u.grid, u.coeffs))
        if step is None:
            for k in ("tau", "dq_norm", "newton_iters", "energy_drop", "prox_residual"):
                s[k].append(math.nan if k == "dq_norm" else 0)
        else:
            prev = self.states[-1]
            s["tau"].append(step.tau)
            s["dq_norm"].append(coeff_norm(u.grid, (u.coeffs - prev.coeffs) / step.tau))
            s["newton_iters"].append(step.newton_iters)
            s["energy_drop"].append(step.energy_drop)
            s["prox_residual"].append(step.prox_residual)
        self.states.append(u)

    def __len__(self):
        return len(self.states)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(self.samples[name], dtype=float)

    @property
    def times(self) -> np.ndarray:
        return self.array("t")

    def state_at(self, t: float) -> Profile:
        """Stored state at exactly time t."""
        idx = [i for i, ti in enumerate(self.samples["t"]) if ti == t]
        if not idx:
            raise KeyError(f"no stored state at t = {t}")
        return self.states[idx[0]]

    def checkpoints(self) -> dict:
        out = {}
        for c in self.schedule.checkpoint_times:
            try:
                out[c] = self.state_at(c)
            except KeyError:
                pass
        return out

    def write_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(CSV_FIELDS)
            for i in range(len(self)):
                wr.writerow([format(float(self.samples[k][i]), ".17g") for k in CSV_FIELDS])

    def to_dict(self) -> dict:
        def enc(x):
            return None if isinstance(x, float) and math.isnan(x) else x

        return {
            "n": self.grid.n,
            "a": self.params.a,
            "schedule": {**asdict(self.schedule), "checkpoint_times": list(self.schedule.checkpoint_times)},
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "samples": {k: [enc(x) for x in v] for k, v in self.samples.items()},
            "coeffs_re": [s.coeffs.real.tolist() for s in self.states],
            "coeffs_im": [s.coeffs.imag.tolist() for s in self.states],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), allow_nan=False))

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        grid = make_grid(int(d["n"]))
        sched = dict(d["schedule"])
        sched["checkpoint_times"] = tuple(sched["checkpoint_times"])
        traj = cls(grid, ModelParams(float(d["a"])), StepSchedule(**sched))
        traj.samples = {k: [math.nan if x is None else x for x in v] for k, v in d["samples"].items()}
        traj.states = [
            Profile(grid, np.asarray(re) + 1j * np.asarray(im)) for re, im in zip(d["coeffs_re"], d["coeffs_im"])
        ]
        traj.aborted = bool(d["aborted"])
        traj.abort_reason = d["abort_reason"]
        return traj

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evolve(u0: Profile, schedule: StepSchedule, p: ModelParams) -> Trajectory:
    """Advance u0 by proximal steps until t_final (or the slope drops below stop_slope).

    Step sizes are clipped so that every checkpoint time is hit exactly. On repeated
    rejection the run stops and the partial trajectory is flagged as aborted.
    """
    slope0 = slope_norm(u0, p)  # rejects degenerate initial data
    traj = Trajectory(u0.grid, p, schedule)
    traj.record(u0, 0.0, None)
    stops = [c for c in schedule.checkpoint_times if c > 0] + [schedule.t_final]
    t, u, tau = 0.0, u0, schedule.tau0
    accepted_since_growth = 0
    if slope0 < schedule.stop_slope:
        return traj
    while t < schedule.t_final:
        if len(traj) > schedule.max_steps:
            traj.aborted, traj.abort_reason = True, "step limit reached"
            break
        stop = next(s for s in stops if s > t)
        halvings = 0
        while True:
            h = min(tau, stop - t)
            landing = t + h >= stop or stop - (t + h) <= 1e-12 * max(stop, 1.0)
            if landing:
                h = stop - t
            try:
                res = prox_step(u, h, p)
                break
            except StepRejected as exc:
                halvings += 1
                if halvings > schedule.max_halvings:
                    traj.aborted, traj.abort_reason = True, f"step rejected at t={t}: {exc}"
                    return traj
                tau = 0.5 * h
        t = stop if landing else t + h
        u = res.next
        traj.record(u, t, res)
        if schedule.adaptive:
            accepted_since_growth += 1
            if accepted_since_growth >= schedule.n_grow:
                tau = min(tau * schedule.growth, schedule.tau_max)
                accepted_since_growth = 0
        if traj.samples["slope"][-1] < schedule.stop_slope:
            break
    return traj


# Checkpoints ----------------------------------------------------------------


def save_checkpoint(path, u: Profile, a: float, t: float) -> None:
    rec = {"n": u.grid.n, "a": a, "t": t, "re": u.coeffs.real.tolist(), "im": u.coeffs.imag.tolist()}
    Path(path).write_text(json.dumps(rec, allow_nan=False))


def load_checkpoint(path) -> tuple[Profile, float, float]:
    rec = json.loads(Path(path).read_text())
    grid = make_grid(int(rec["n"]))
    coeffs = np.asarray(rec["re"], dtype=float) + 1j * np.asarray(rec["im"], dtype=float)
    return Profile(grid, coeffs), float(rec["a"]), float(rec["t"])
