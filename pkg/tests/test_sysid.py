"""Identification pipeline tests: PRBS structure, ARX least squares,
pole-placement gain synthesis and the closed-loop root audit."""

import numpy as np
import pytest

from valvelab.pi_control import PiGains, builtin_gains
from valvelab.sysid import (
    ArxFit,
    PiDesignSpec,
    PrbsConfig,
    _max_length_bits,
    arx_to_valve_params,
    closed_loop_poles,
    design_pi_gains,
    export_identification_csv,
    fit_arx,
    generate_prbs,
    load_identification_csv,
)
from valvelab.valve import builtin_valve, initial_state, step, step_linear, valve_variant


def simulate_linear(params, u, alpha0=0.0):
    """Pure AR-core rollout used as the exact-recovery oracle."""
    alpha = np.empty(u.size)
    alpha[0] = alpha0
    alpha[1] = step_linear(params, alpha0, u[0], 0.0)
    for t in range(2, u.size):
        alpha[t] = step_linear(params, alpha[t - 1], u[t - 1], u[t - 2])
    return alpha


class TestPrbs:
    def test_default_excitation_configuration(self):
        seq = generate_prbs(PrbsConfig(length=1022, center=16.0, amplitude=8.0, seed=0))
        assert seq.shape == (1022,)
        assert set(np.unique(seq)) == {8.0, 24.0}

    def test_zero_amplitude_constant(self):
        seq = generate_prbs(PrbsConfig(length=50, center=16.0, amplitude=0.0))
        assert np.all(seq == 16.0)

    def test_seed_determinism(self):
        cfg = PrbsConfig(length=300, seed=11)
        assert np.array_equal(generate_prbs(cfg), generate_prbs(cfg))
        other = generate_prbs(PrbsConfig(length=300, seed=12))
        assert not np.array_equal(generate_prbs(cfg), other)

    def test_level_bounds_enforced(self):
        with pytest.raises(ValueError):
            PrbsConfig(length=10, center=5.0, amplitude=8.0)  # low level < 0
        with pytest.raises(ValueError):
            PrbsConfig(length=10, center=95.0, amplitude=8.0)  # high level > 100
        with pytest.raises(ValueError):
            PrbsConfig(length=0)

    def test_maximal_period(self):
        # order-10 register: period exactly 1023, no divisor period
        bits = _max_length_bits(10, state=0b1, count=2046)
        assert np.array_equal(bits[:1023], bits[1023:])
        for p in (1, 3, 11, 31, 33, 93, 341):
            tiled = np.tile(bits[:p], 1023 // p)
            assert not np.array_equal(tiled, bits[:1023]), f"period divides {p}"

    def test_one_period_balance(self):
        # an m-sequence holds 2^(n-1) ones and 2^(n-1)-1 zeros per period
        seq = generate_prbs(PrbsConfig(length=1023, center=16.0, amplitude=8.0, seed=4))
        assert int(np.sum(seq == 24.0)) == 512
        assert int(np.sum(seq == 8.0)) == 511

    def test_rejects_bad_register_state(self):
        with pytest.raises(ValueError):
            _max_length_bits(10, state=0, count=5)
        with pytest.raises(ValueError):
            _max_length_bits(99, state=1, count=5)


class TestFitArx:
    def test_exact_recovery_valve2(self):
        v = builtin_valve("valve2")
        u = generate_prbs(PrbsConfig(length=1022, seed=3))
        alpha = simulate_linear(v, u)
        fit = fit_arx(u, alpha)
        assert fit.a == pytest.approx(0.74, rel=1e-9)
        assert fit.b1 == pytest.approx(-0.25, rel=1e-9)
        assert fit.b2 == pytest.approx(-0.41, rel=1e-9)
        assert fit.residual_rms < 1e-9

    def test_exact_recovery_all_valves(self):
        for name in ("valve1", "valve2", "valve3"):
            v = builtin_valve(name)
            u = generate_prbs(PrbsConfig(length=600, seed=8))
            alpha = simulate_linear(v, u, alpha0=40.0)
            fit = fit_arx(u, alpha)
            assert fit.a == pytest.approx(v.a, rel=1e-9), name
            assert fit.b1 == pytest.approx(v.b1, rel=1e-9), name
            assert fit.b2 == pytest.approx(v.b2, rel=1e-9), name

    def test_constant_input_rank_deficient(self):
        u = np.full(200, 16.0)
        v = builtin_valve("valve1")
        alpha = simulate_linear(v, u, alpha0=30.0)
        with pytest.raises(ValueError, match="rank-deficient"):
            fit_arx(u, alpha)

    def test_scale_consistency(self):
        v = builtin_valve("valve3")
        u = generate_prbs(PrbsConfig(length=400, seed=2))
        alpha = simulate_linear(v, u, alpha0=10.0)
        base = fit_arx(u, alpha)
        scaled = fit_arx(u, 3.5 * alpha)
        assert scaled.a == pytest.approx(base.a, rel=1e-9)
        assert scaled.b1 == pytest.approx(3.5 * base.b1, rel=1e-9)
        assert scaled.b2 == pytest.approx(3.5 * base.b2, rel=1e-9)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="10"):
            fit_arx(np.ones(5), np.ones(5))
        with pytest.raises(ValueError):
            fit_arx(np.ones(20), np.ones(19))

    def test_full_simulator_pipeline(self):
        # hysteresis + process noise on: biased but finite and sane
        v = builtin_valve("valve1")
        rng = np.random.default_rng(0)
        u = generate_prbs(PrbsConfig(length=1022, seed=0))
        state = initial_state(v)
        alpha = np.empty(u.size)
        for t in range(u.size):
            state = step(v, state, float(u[t]), rng)
            alpha[t] = state.alpha
        fit = fit_arx(u, alpha)
        assert np.isfinite([fit.a, fit.b1, fit.b2]).all()
        assert 0.0 < fit.residual_rms < 5.0

    def test_residual_nonnegative_invariant(self):
        with pytest.raises(ValueError):
            ArxFit(a=0.5, b1=-0.1, b2=-0.1, residual_rms=-1.0)


class TestDesign:
    FIT1 = ArxFit(a=0.78, b1=-0.18, b2=-0.23, residual_rms=0.0)

    def test_b1_zero_rejected(self):
        with pytest.raises(ValueError, match="b1"):
            design_pi_gains(ArxFit(a=0.5, b1=0.0, b2=-0.1, residual_rms=0.0))

    def test_coefficient_matching(self):
        # returned gains reproduce the targeted q^-1 and q^-2 coefficients
        spec = PiDesignSpec(zeta=1.0, t_rise=0.8, ts=0.05)
        with pytest.warns(UserWarning):
            g = design_pi_gains(self.FIT1, spec)
        p = np.exp(-2.2 / (1.0 * 0.8) * 0.05)
        a, b1, b2 = self.FIT1.a, self.FIT1.b1, self.FIT1.b2
        assert (-a - 1.0 + b1 * g.r0) == pytest.approx(-2.0 * p, abs=1e-10)
        assert (a + b1 * g.r1 + b2 * g.r0) == pytest.approx(p * p, abs=1e-10)

    def test_valve1_design_is_finite_but_unstable(self):
        # the two matched coefficients do not pin a double pole: the
        # unmatched constant term pushes one real root outside the unit
        # circle for these constants, and the synthesis must say so
        with pytest.warns(UserWarning, match="spectral radius"):
            g = design_pi_gains(self.FIT1, PiDesignSpec(zeta=1.0, t_rise=0.8, ts=0.05))
        assert np.isfinite([g.r0, g.r1]).all()
        radius = max(abs(z) for z in closed_loop_poles(self.FIT1, g))
        assert radius >= 1.0

    def test_stable_design_does_not_warn(self):
        import warnings as _w

        fit = ArxFit(a=0.74, b1=-0.25, b2=-0.41, residual_rms=0.0)
        with _w.catch_warnings():
            _w.simplefilter("error")
            g = design_pi_gains(fit, PiDesignSpec(zeta=1.0, t_rise=0.8, ts=0.05))
        radius = max(abs(z) for z in closed_loop_poles(fit, g))
        assert radius < 1.0

    def test_bounds_passthrough(self):
        with pytest.warns(UserWarning):
            g = design_pi_gains(self.FIT1, u_min=0.0, u_max=60.0)
        assert (g.u_min, g.u_max) == (0.0, 60.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PiDesignSpec(zeta=0.0)
        with pytest.raises(ValueError):
            PiDesignSpec(t_rise=-1.0)
        with pytest.raises(ValueError):
            PiDesignSpec(ts=0.0)


class TestPoles:
    def test_zero_gains_factorization(self):
        # open loop with the controller integrator: roots {a, 1, 0}
        fit = ArxFit(a=0.78, b1=-0.18, b2=-0.23, residual_rms=0.0)
        roots = closed_loop_poles(fit, PiGains(r0=0.0, r1=0.0, u_max=80.0))
        got = sorted(abs(z) for z in roots)
        assert got[0] == pytest.approx(0.0, abs=1e-12)
        assert got[1] == pytest.approx(0.78, abs=1e-12)
        assert got[2] == pytest.approx(1.0, abs=1e-12)

    def test_residual_small_at_roots(self):
        fit = ArxFit(a=0.83, b1=-0.11, b2=-0.23, residual_rms=0.0)
        g = builtin_gains(3)
        c = [1.0,
             -fit.a - 1.0 + fit.b1 * g.r0,
             fit.a + fit.b1 * g.r1 + fit.b2 * g.r0,
             fit.b2 * g.r1]
        for z in closed_loop_poles(fit, g):
            val = ((z + c[1]) * z + c[2]) * z + c[3]
            assert abs(val) < 1e-8

    def test_identified_gain_sets_are_stable(self):
        # the shipped (r0, r1) per valve give spectral radius < 1
        fits = {
            1: ArxFit(a=0.78, b1=-0.18, b2=-0.23, residual_rms=0.0),
            2: ArxFit(a=0.74, b1=-0.25, b2=-0.41, residual_rms=0.0),
            3: ArxFit(a=0.83, b1=-0.11, b2=-0.23, residual_rms=0.0),
        }
        for vid, fit in fits.items():
            roots = closed_loop_poles(fit, builtin_gains(vid))
            assert max(abs(z) for z in roots) < 1.0, vid

    def test_valve1_builtin_cubic_coefficients(self):
        # z^3 - 1.3696 z^2 + 0.975 z - 0.4209
        fit = ArxFit(a=0.78, b1=-0.18, b2=-0.23, residual_rms=0.0)
        g = builtin_gains(1)
        c1 = -fit.a - 1.0 + fit.b1 * g.r0
        c2 = fit.a + fit.b1 * g.r1 + fit.b2 * g.r0
        c3 = fit.b2 * g.r1
        assert c1 == pytest.approx(-1.3696, abs=1e-10)
        assert c2 == pytest.approx(0.975, abs=1e-10)
        assert c3 == pytest.approx(-0.4209, abs=1e-10)


class TestIo:
    def test_identification_csv_round_trip(self, tmp_path):
        p = tmp_path / "ident.csv"
        t = np.arange(5) * 0.05
        u = np.array([8.0, 24.0, 24.0, 8.0, 24.0])
        alpha = np.array([90.0, 88.1, 73.2, 60.0, 55.5])
        export_identification_csv(p, t, u, alpha)
        t2, u2, a2 = load_identification_csv(p)
        assert np.array_equal(t, t2)
        assert np.array_equal(u, u2)
        assert np.array_equal(alpha, a2)

    def test_csv_header_checked(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="columns"):
            load_identification_csv(p)

    def test_arx_to_valve_params(self):
        base = builtin_valve("valve1")
        fit = ArxFit(a=0.8, b1=-0.2, b2=-0.3, residual_rms=0.4)
        v = arx_to_valve_params(fit, base)
        assert (v.a, v.b1, v.b2) == (0.8, -0.2, -0.3)
        assert v.pwm_max == base.pwm_max
        # validation still applies
        bad = ArxFit(a=1.2, b1=-0.2, b2=-0.3, residual_rms=0.0)
        with pytest.raises(ValueError):
            arx_to_valve_params(bad, base)
