import json
import math

import numpy as np
import pytest

from conftest import random_profiles
from epiflow import flow
from epiflow.energy import ModelParams, energy_excess
from epiflow.flow import (
    CSV_FIELDS,
    DenseRHS,
    InadmissibleProfileError,
    StepRejected,
    StepSchedule,
    Trajectory,
    cosine_profile,
    evolve,
    explicit_step,
    integrate_rk4,
    load_checkpoint,
    prox_step,
    random_profile,
    rk4_stable_step,
    save_checkpoint,
)
from epiflow.spectral import Profile, coeff_norm, derivative, make_grid, norm
from epiflow.subgradient import DegenerateProfileError, hessian_symbol_at_rest, subgrad


def dist(u, w):
    return coeff_norm(u.grid, u.coeffs - w.coeffs)


class TestProx:
    def test_equilibrium_is_fixed(self, grid64, unit):
        r = prox_step(Profile.zeros(grid64), 1e-3, unit)
        assert np.all(r.next.coeffs == 0) and r.energy_drop == 0.0 and r.newton_iters == 0

    @pytest.mark.parametrize("tau", [0.0, -1e-3, math.inf, math.nan])
    def test_bad_tau(self, grid64, unit, tau):
        with pytest.raises(ValueError):
            prox_step(Profile.zeros(grid64), tau, unit)

    def test_residual_meets_target(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.5, 1)
        tau = 1e-3
        r = prox_step(u, tau, unit)
        g0 = norm(subgrad(u, unit).field)
        assert r.prox_residual <= flow.PROX_TOL * min(1 / tau, g0)
        # Optimality: (w - u)/tau = -dE(w).
        lhs = (r.next.coeffs - u.coeffs) / tau + subgrad(r.next, unit).field.coeffs
        assert coeff_norm(grid64, lhs) == pytest.approx(r.prox_residual, rel=1e-6, abs=1e-12)

    def test_first_order_consistency(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.3, 1)
        g = subgrad(u, unit).field
        gaps = []
        for tau in (1e-7, 1e-8):
            w = prox_step(u, tau, unit).next
            gaps.append(dist(w, u - tau * g))
        # The implicit step differs from explicit Euler at second order once tau is
        # small against the stiffest mode the nonlinearity excites.
        assert math.log10(gaps[0] / gaps[1]) == pytest.approx(2.0, abs=0.1)

    def test_drop_dominates_movement(self, grid64, unit):
        for u in random_profiles(grid64, 1.0, 5, 11, max_amp=0.4):
            for tau in (1e-6, 1e-4, 1e-2):
                r = prox_step(u, tau, unit)
                move = dist(r.next, u) ** 2 / (2 * tau)
                assert r.energy_drop >= move * (1 - 1e-6) - 1e-14
                assert r.energy_drop == pytest.approx(energy_excess(u, unit) - energy_excess(r.next, unit))
                assert r.min_v_next > 0

    def test_unique_from_other_guesses(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.5, 1)
        tau = 1e-3
        base = prox_step(u, tau, unit).next
        for guess in (Profile.zeros(grid64), 0.5 * u, cosine_profile(grid64, 1.0, 0.2, 2)):
            other = prox_step(u, tau, unit, initial=guess).next
            assert dist(other, base) <= 10 * flow.PROX_TOL * max(norm(base), 1e-300) + 1e-14

    def test_iteration_limit_rejects(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.5, 1)
        with pytest.raises(StepRejected) as exc:
            prox_step(u, 1e-2, unit, max_iters=0)
        assert exc.value.residual > 0

    def test_inadmissible_guess(self, grid64, unit):
        c = np.zeros(33, complex)
        c[1] = 0.05
        with pytest.raises(ValueError):
            prox_step(cosine_profile(grid64, 1.0, 0.3, 1), 1e-3, unit, initial=Profile(grid64, c))

    def test_linear_regime_is_exact_diagonal_solve(self, grid64, unit):
        u = 1e-120 * cosine_profile(grid64, 1.0, 0.3, 2)
        r = prox_step(u, 1e-3, unit)
        expected = u.coeffs[2] / (1 + 1e-3 * hessian_symbol_at_rest(grid64, 1.0)[2])
        assert r.next.coeffs[2] == pytest.approx(expected, rel=1e-14)
        assert r.energy_drop >= 0


class TestExplicit:
    def test_dense_rhs_matches_subgrad(self, grid64, unit):
        f = DenseRHS(grid64, 1.0)
        for u in random_profiles(grid64, 1.0, 5, 12):
            got = f.unpack(f(f.pack(u.coeffs)))
            ref = -subgrad(u, unit).field.coeffs
            assert np.max(np.abs(got - ref)) <= 1e-11 * np.max(np.abs(ref))
            assert f.min_v(f.pack(u.coeffs)) == pytest.approx(subgrad(u, unit).min_v, abs=1e-12)

    def test_rk4_step_matches_dense_path(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.3, 1)
        tau = rk4_stable_step(u, unit)
        a = explicit_step(u, tau, unit)
        b = integrate_rk4(u, tau, unit, tau)
        assert dist(a, b) <= 1e-12 * norm(u)

    def test_stability_threshold(self, grid64, unit):
        u = 1e-8 * random_profile(grid64, 1.0, 0.5, 21, 5)
        inside = rk4_stable_step(u, unit, safety=0.95)
        outside = rk4_stable_step(u, unit, safety=1.2)
        assert norm(integrate_rk4(u, 200 * inside, unit, inside)) < norm(u)
        try:
            grown = norm(integrate_rk4(u, 200 * outside, unit, outside)) / norm(u)
        except DegenerateProfileError:
            grown = math.inf
        assert grown > 1e3

    def test_zero_horizon(self, grid64, unit):
        u = cosine_profile(grid64, 1.0, 0.3, 1)
        assert integrate_rk4(u, 0.0, unit) is u
        with pytest.raises(ValueError):
            integrate_rk4(u, -1.0, unit)


class TestInitialData:
    def test_cosine(self, grid64):
        u = cosine_profile(grid64, 2.0, 0.4, 3)
        v = 2.0 + derivative(u, 2).values
        np.testing.assert_allclose(v, 2.0 * (1 + 0.4 * np.cos(6 * np.pi * grid64.nodes)), atol=1e-13)

    @pytest.mark.parametrize("rho", [1.0, 1.5, -1.2])
    def test_cosine_inadmissible(self, grid64, rho):
        with pytest.raises(InadmissibleProfileError, match="violates v > 0"):
            cosine_profile(grid64, 1.0, rho, 1)

    def test_cosine_mode_range(self, grid64):
        with pytest.raises(ValueError):
            cosine_profile(grid64, 1.0, 0.3, 22)

    def test_random_profile(self, grid64):
        u = random_profile(grid64, 1.5, 0.3, 8, 42)
        w = derivative(u, 2).values
        assert np.sqrt(np.mean(w**2)) == pytest.approx(0.3 * 1.5, rel=1e-12)
        assert np.all(u.coeffs[9:] == 0) and u.coeffs[0] == 0
        assert np.array_equal(u.coeffs, random_profile(grid64, 1.5, 0.3, 8, 42).coeffs)

    def test_random_profile_gives_up(self, grid64):
        with pytest.raises(InadmissibleProfileError):
            random_profile(grid64, 1.0, 5.0, 21, 0)


class TestSchedule:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(t_final=-1.0),
            dict(t_final=1.0, tau0=0.0),
            dict(t_final=1.0, tau0=0.1, tau_max=0.01),
            dict(t_final=1.0, growth=0.9),
            dict(t_final=1.0, n_grow=0),
            dict(t_final=1.0, stop_slope=-1.0),
            dict(t_final=1.0, checkpoint_times=(2.0,)),
            dict(t_final=math.nan),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            StepSchedule(**kw)

    def test_checkpoints_sorted(self):
        assert StepSchedule(1.0, checkpoint_times=(0.5, 0.25, 0.5)).checkpoint_times == (0.25, 0.5)


class TestEvolve:
    def test_hits_checkpoints_exactly(self, canonical_run):
        t = canonical_run.times
        assert 0.5 in t and 1.0 in t and t[-1] == 2.0
        assert np.all(np.diff(t) > 0)
        assert set(canonical_run.checkpoints()) == {0.5, 1.0}

    def test_energy_nonincreasing(self, canonical_run):
        assert np.all(np.diff(canonical_run.array("excess")) <= 0)
        assert np.all(canonical_run.array("energy_drop")[1:] >= 0)
        assert not canonical_run.aborted

    def test_first_sample(self, canonical_run):
        assert math.isnan(canonical_run.samples["dq_norm"][0])
        assert canonical_run.samples["tau"][0] == 0

    def test_fixed_steps(self, grid64, unit):
        u0 = cosine_profile(grid64, 1.0, 0.3, 1)
        traj = evolve(u0, StepSchedule(1e-3, tau0=2.5e-4, adaptive=False), unit)
        assert len(traj) == 5
        np.testing.assert_allclose(traj.times, [0, 2.5e-4, 5e-4, 7.5e-4, 1e-3], rtol=1e-12)

    def test_stop_slope(self, grid64, unit):
        u0 = cosine_profile(grid64, 1.0, 0.3, 1)
        traj = evolve(u0, StepSchedule(10.0, stop_slope=1.0), unit)
        assert traj.samples["slope"][-1] < 1.0 and traj.times[-1] < 10.0

    def test_zero_horizon(self, grid64, unit):
        traj = evolve(cosine_profile(grid64, 1.0, 0.3, 1), StepSchedule(0.0), unit)
        assert len(traj) == 1

    def test_abort_after_repeated_rejection(self, grid64, unit, monkeypatch):
        def always_reject(u, tau, p, **kw):
            raise StepRejected("forced", 0, 1.0)

        monkeypatch.setattr(flow, "prox_step", always_reject)
        traj = evolve(cosine_profile(grid64, 1.0, 0.3, 1), StepSchedule(1.0, max_halvings=3), unit)
        assert traj.aborted and "forced" in traj.abort_reason and len(traj) == 1

    def test_degenerate_initial_data(self, grid64, unit):
        c = np.zeros(33, complex)
        c[1] = 0.05
        with pytest.raises(ValueError):
            evolve(Profile(grid64, c), StepSchedule(1.0), unit)


class TestPersistence:
    def test_trajectory_roundtrip(self, tmp_path, grid64, unit):
        traj = evolve(cosine_profile(grid64, 1.0, 0.3, 1), StepSchedule(1e-2, checkpoint_times=(5e-3,)), unit)
        path = tmp_path / "t.json"
        traj.save(path)
        back = Trajectory.load(path)
        assert back.schedule == traj.schedule and back.params.a == 1.0
        for k in traj.samples:
            np.testing.assert_array_equal(back.array(k), traj.array(k))
        for s, r in zip(traj.states, back.states):
            assert np.array_equal(s.coeffs, r.coeffs)
        assert json.loads(path.read_text())["samples"]["dq_norm"][0] is None

    def test_csv(self, tmp_path, grid64, unit):
        traj = evolve(cosine_profile(grid64, 1.0, 0.3, 1), StepSchedule(1e-3), unit)
        path = tmp_path / "t.csv"
        traj.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_FIELDS)
        assert len(lines) == len(traj) + 1
        assert float(lines[1].split(",")[1]) == traj.samples["E"][0]

    def test_checkpoint_roundtrip(self, tmp_path, grid64):
        u = random_profile(grid64, 2.0, 0.3, 10, 3)
        save_checkpoint(tmp_path / "c.json", u, 2.0, 0.125)
        back, a, t = load_checkpoint(tmp_path / "c.json")
        assert np.array_equal(back.coeffs, u.coeffs) and a == 2.0 and t == 0.125
