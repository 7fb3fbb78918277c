import json
import math

import numpy as np
import pytest

from conftest import random_profiles
from epiflow.diagnostics import (
    Certificate,
    CertificateKind,
    compute_c0,
    convexity_probe,
    diff_quotient_check,
    dissipation_report,
    evi_check,
    evi_dictionary,
    exp_decay_check,
    identity_check,
    log_gradient_norm,
    oracle_agreement,
    positivity_certificate,
    positivity_constants,
    slope_decay_check,
    write_report,
)
from epiflow.energy import energy_excess
from epiflow.flow import StepSchedule, Trajectory, cosine_profile, evolve
from epiflow.spectral import Profile, perturbed_kernel
from epiflow.subgradient import slope_norm


def copy_traj(traj):
    return Trajectory.from_dict(traj.to_dict())


@pytest.fixture(scope="module")
def short_run(grid64, unit):
    u0 = cosine_profile(grid64, 1.0, 0.5, 1)
    return evolve(u0, StepSchedule(0.05, tau0=1e-3, adaptive=False), unit)


@pytest.fixture(scope="module")
def flat_run(grid64, unit):
    return evolve(Profile.zeros(grid64), StepSchedule(0.01, tau0=1e-3), unit)


class TestEquilibrium:
    def test_all_trajectory_checks_pass(self, flat_run, unit):
        tests = evi_dictionary(flat_run.grid, 1.0, 6, 0)
        for cert in (
            evi_check(flat_run, tests, unit),
            slope_decay_check(flat_run, unit),
            exp_decay_check(flat_run, unit),
            positivity_certificate(flat_run, unit),
        ):
            assert cert.passed, cert.kind
        assert diff_quotient_check(flat_run, unit).summary["max_dq"] == 0.0

    def test_identity_at_rest(self, grid64, unit):
        cert = identity_check(Profile.zeros(grid64), unit)
        assert cert.passed and cert.summary["flux_lhs"] == 0.0


class TestEVI:
    def test_dictionary(self, grid64):
        d = evi_dictionary(grid64, 1.0, 20, 3)
        assert len(d) == 20 and np.all(d[0].coeffs == 0)
        assert all(isinstance(w, Profile) for w in d)

    def test_holds_on_short_run(self, short_run, unit):
        cert = evi_check(short_run, evi_dictionary(short_run.grid, 1.0, 10, 1), unit)
        assert cert.passed and cert.summary["n_steps"] == len(short_run) - 1

    def test_detects_uphill_step(self, short_run, unit):
        bad = copy_traj(short_run)
        n = 3
        u0, u1 = bad.states[n], bad.states[n + 1]
        uphill = u0 - 20.0 * (u1 - u0)
        bad.states[n + 1] = uphill
        bad.samples["excess"][n + 1] = energy_excess(uphill, unit)
        cert = evi_check(bad, [Profile.zeros(bad.grid)], unit)
        assert not cert.passed and cert.worst_margin > cert.tolerance

    def test_empty(self, grid64, unit):
        with pytest.raises(ValueError):
            evi_check(Trajectory(grid64, unit, StepSchedule(1.0)), [], unit)


class TestSlopeAndDecay:
    def test_short_run(self, short_run, unit):
        assert slope_decay_check(short_run, unit).passed
        cert = exp_decay_check(short_run, unit)
        assert np.all(np.asarray(cert.details["margin"]) <= 0)

    def test_slope_spike_detected(self, short_run, unit):
        bad = copy_traj(short_run)
        bad.samples["slope"][4] = 1.01 * bad.samples["slope"][3]
        cert = slope_decay_check(bad, unit)
        assert not cert.passed and cert.summary["worst_slope_margin"] > 1e-3

    def test_energy_kink_detected(self, short_run, unit):
        bad = copy_traj(short_run)
        bad.samples["excess"][5] += 1e-4
        assert slope_decay_check(bad, unit).summary["worst_convexity_margin"] > 1e-8

    def test_decay_bound_violation(self, short_run, unit):
        bad = copy_traj(short_run)
        bad.samples["l2_u"][-1] = 1.0
        assert not exp_decay_check(bad, unit).passed


class TestPositivityConstants:
    @pytest.mark.parametrize("a,c0", [(1.0, 4 * math.pi**2), (0.5, 4 * math.pi**2 * 0.75), (2.0, 0.0), (3.0, 0.0)])
    def test_c0(self, a, c0):
        assert compute_c0(a) == pytest.approx(c0)

    def test_small_c0_uses_root(self):
        c = positivity_constants(1.99, 0.0)
        assert c["C0"] < 4 and c["C0_effective"] == pytest.approx(2 * math.sqrt(c["C0"]))

    def test_slope_enters_only_through_max(self, grid64, unit):
        h1 = slope_norm(cosine_profile(grid64, 1.0, 0.1, 1), unit)
        h2 = slope_norm(cosine_profile(grid64, 1.0, 0.3, 1), unit)
        assert h1 < h2 < 2 * compute_c0(1.0) / 3
        assert positivity_constants(1.0, h1)["c_star"] == positivity_constants(1.0, h2)["c_star"]

    def test_branches(self, grid128, unit):
        h_mild = slope_norm(cosine_profile(grid128, 1.0, 0.3, 1), unit)
        h_stress = slope_norm(cosine_profile(grid128, 1.0, 0.8, 1), unit)
        mild = positivity_constants(1.0, h_mild)
        stress = positivity_constants(1.0, h_stress)
        assert mild["binding_branch"] == "2*C0"
        assert stress["binding_branch"] == "3*H0"
        assert 0 < stress["c_star"] < mild["c_star"] < 1.0
        assert mild["c_star"] == pytest.approx(math.exp(-8 * math.pi**2))

    def test_log_gradient(self, grid64):
        u = cosine_profile(grid64, 1.0, 0.5, 1)
        x = np.arange(4096) / 4096
        v = 1 + 0.5 * np.cos(2 * np.pi * x)
        vx = -np.pi * np.sin(2 * np.pi * x)
        assert log_gradient_norm(u, 1.0) == pytest.approx(math.sqrt(np.mean((vx / v) ** 2)), rel=1e-10)

    def test_certificate_fields(self, short_run, unit):
        cert = positivity_certificate(short_run, unit)
        assert cert.passed and cert.summary["a_posteriori_holds"]
        assert cert.summary["within_one_percent"]
        # Jensen: mean ln v <= ln a = 0.
        assert max(cert.summary["mean_ln_v_range"]) <= 1e-15


class TestOtherChecks:
    def test_diff_quotient_bound(self, short_run, unit):
        cert = diff_quotient_check(short_run, unit)
        s = cert.summary
        assert s["c0"] > 1 / math.e
        assert cert.worst_margin == pytest.approx(s["max_dq"] - s["bound"])
        assert cert.passed == (s["max_dq"] <= s["bound"])

    def test_dissipation(self, short_run):
        rep = dissipation_report(short_run)
        assert math.isfinite(rep["K_max"]) and rep["K_median"] <= rep["K_max"]

    def test_identity_random(self, grid64, unit):
        for u in random_profiles(grid64, 1.0, 5, 30):
            cert = identity_check(u, unit)
            assert cert.passed and cert.worst_margin <= 1.0

    def test_convexity_probe(self, grid64, unit):
        cert = convexity_probe(grid64, unit, n_triples=30, seed=4)
        assert cert.passed and len(cert.details["scaled_negative_gap"]) == 30

    def test_oracle_agreement_and_negative_control(self, grid64, unit):
        profiles = [cosine_profile(grid64, 1.0, 0.4, 1)]
        assert oracle_agreement(profiles, unit).passed
        with perturbed_kernel(1e-3):
            assert not oracle_agreement(profiles, unit).passed


class TestReports:
    def test_reload_reproduces_certificates(self, short_run, unit, tmp_path):
        short_run.save(tmp_path / "t.json")
        back = Trajectory.load(tmp_path / "t.json")
        tests = evi_dictionary(short_run.grid, 1.0, 5, 2)
        for check in (slope_decay_check, exp_decay_check, positivity_certificate, diff_quotient_check):
            assert check(back, unit).to_dict() == check(short_run, unit).to_dict()
        assert evi_check(back, tests, unit).to_dict() == evi_check(short_run, tests, unit).to_dict()

    def test_write_report(self, tmp_path):
        certs = [
            Certificate(CertificateKind.EVI, True, -1.0, 1e-6),
            Certificate(CertificateKind.DIFF_QUOTIENT, False, math.inf, 0.0, summary={"x": math.nan}),
        ]
        rec = write_report(tmp_path / "r.json", certs, config_hash="abc", timestamp="now")
        back = json.loads((tmp_path / "r.json").read_text())
        assert back == rec
        assert back["all_pass"] is False and back["generated_at"] == "now"
        assert back["certificates"][1]["worst_margin"] == "infinity"
        assert back["certificates"][1]["summary"]["x"] is None
        assert back["certificates"][0]["kind"] == "EVI"
