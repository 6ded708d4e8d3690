from __future__ import annotations

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from eventscan.lif import LifParams, NeuronState, peak_time, voltage
from eventscan.solver import (
    SolverConfig,
    SpikeSolution,
    bisection_iterate,
    bisection_solve,
    floor_derivative,
    newton_iterate,
    newton_solve,
    residual,
    solve,
    spike_time_vjp,
)

P = LifParams(tau_m=0.02, tau_s=0.01)
NEWTON = SolverConfig("newton")
BISECT = SolverConfig("bisection")
T_W5 = 0.006470142623148936  # -tau_m * ln((1 + sqrt(1/5)) / 2)


def oracle_root(v0, i0, t_hi, p=P, iters=60):
    """Plain float64 bisection with many more iterations than the solvers use."""
    lo, hi = 0.0, float(t_hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if voltage(v0, i0, mid, p) - p.v_th > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def bracket(v0, i0, p=P):
    return float(peak_time(v0, i0, p))


class TestConfig:
    def test_defaults(self):
        assert NEWTON.max_iters == 14 and BISECT.max_iters == 20
        assert NEWTON.deriv_floor == 0.01

    @pytest.mark.parametrize("kw", [{"method": "brent"}, {"max_iters": 0}, {"deriv_floor": 0.0}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestResidual:
    def test_on_threshold_start(self):
        val, _ = residual(NeuronState(1.0, 0.0), 0.0, P)
        assert val == 0.0

    def test_analytic_root(self):
        val, der = residual(NeuronState(0.0, 5.0), T_W5, P)
        assert abs(val) < 1e-14
        assert der == pytest.approx(80.9017, abs=1e-4)

    def test_derivative_matches_fd(self, rng):
        h = 1e-7
        for _ in range(100):
            s = NeuronState(rng.uniform(-1, 1), rng.uniform(-5, 5))
            t = rng.uniform(1e-4, 0.05)
            fd = (residual(s, t + h, P)[0] - residual(s, t - h, P)[0]) / (2 * h)
            assert residual(s, t, P)[1] == pytest.approx(fd, rel=1e-5, abs=1e-6)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            residual(NeuronState(0.0, 1.0), -1e-3, P)


class TestNewton:
    def test_analytic_case(self):
        sol = newton_solve(NeuronState(0.0, 5.0), bracket(0.0, 5.0), NEWTON, P)
        assert isinstance(sol, SpikeSolution)
        assert abs(sol.t_star - T_W5) <= 1e-7
        assert abs(sol.t_star - T_W5) <= 1e-15

    def test_grazing(self):
        i0 = 4.0004  # peak voltage 1.0001
        t_hi = bracket(0.0, i0)
        sol = newton_solve(NeuronState(0.0, i0), t_hi, NEWTON, P)
        assert 0.0 <= sol.t_star <= t_hi
        assert abs(sol.t_star - oracle_root(0.0, i0, t_hi)) <= 1e-7

    def test_starts_on_threshold(self):
        sol = newton_solve(NeuronState(1.0, 5.0), bracket(1.0, 5.0), NEWTON, P)
        assert sol.t_star == pytest.approx(0.0, abs=1e-12)

    def test_no_crossing_raises(self):
        with pytest.raises(ValueError):
            newton_solve(NeuronState(0.0, 3.0), bracket(0.0, 3.0), NEWTON, P)

    def test_bad_bracket_raises(self):
        with pytest.raises(ValueError):
            newton_solve(NeuronState(0.0, 5.0), np.inf, NEWTON, P)

    def test_iterates_stay_in_bracket(self, rng):
        v0 = rng.uniform(-0.5, 0.9, 500)
        i0 = rng.uniform(4, 50, 500)
        t_hi = peak_time(v0, i0, P)
        ok = np.isfinite(t_hi) & (voltage(v0, i0, t_hi, P) >= 1)
        for iters in range(1, 15):
            t = newton_iterate(v0[ok], i0[ok], t_hi[ok], P, iters)
            assert np.all((t >= 0) & (t <= t_hi[ok]))

    def test_float32_residual_within_gap(self):
        p32 = P.with_dtype("float32")
        gap = float(np.nextafter(np.float32(1), np.float32(2)) - np.float32(1))
        for w in (4.0004, 5.0, 20.0, 300.0):
            t_hi = bracket(0.0, w)
            sol = newton_solve(NeuronState(0.0, w), t_hi, NEWTON, p32)
            assert abs(sol.residual) <= gap


class TestBisection:
    def test_agrees_with_newton(self):
        s = NeuronState(0.0, 5.0)
        a = newton_solve(s, bracket(0.0, 5.0), NEWTON, P)
        b = bisection_solve(s, bracket(0.0, 5.0), BISECT, P)
        assert abs(a.t_star - b.t_star) <= 1e-7

    def test_constructed_midpoint(self):
        # choose the bracket so that the crossing sits exactly at half of it
        t_hi = 2 * T_W5
        t = bisection_iterate(0.0, 5.0, np.float64(t_hi), P, 20)
        assert abs(t - T_W5) <= t_hi * 2.0**-20

    def test_width_halves(self):
        lo, hi = 0.0, 0.01
        # replay the bracket updates to measure the final width
        for _ in range(20):
            mid = 0.5 * (lo + hi)
            if voltage(0.0, 5.0, mid, P) > 1:
                hi = mid
            else:
                lo = mid
        assert hi - lo == pytest.approx(0.01 * 2.0**-20, rel=1e-12)

    def test_invalid_bracket(self):
        with pytest.raises(ValueError):
            bisection_solve(NeuronState(1.0, 5.0), bracket(1.0, 5.0), BISECT, P)
        with pytest.raises(ValueError):
            bisection_solve(NeuronState(0.0, 5.0), 0.001, BISECT, P)

    def test_dispatch(self):
        s = NeuronState(0.0, 5.0)
        assert solve(s, bracket(0.0, 5.0), BISECT, P).t_star == bisection_solve(s, bracket(0.0, 5.0), BISECT, P).t_star


@given(st.floats(-0.8, 0.95), st.floats(2.0, 200.0))
def test_solvers_agree_and_hit_threshold(v0, i0):
    t_hi = peak_time(v0, i0, P)
    assume(np.isfinite(t_hi) and voltage(v0, i0, t_hi, P) > 1.0 + 1e-9)
    s = NeuronState(v0, i0)
    a = newton_solve(s, float(t_hi), NEWTON, P)
    b = bisection_solve(s, float(t_hi), BISECT, P)
    assert abs(a.t_star - b.t_star) <= 1e-7
    assert abs(a.residual) <= 2 * np.spacing(1.0)


@given(st.floats(-0.8, 0.95), st.floats(2.0, 200.0))
def test_rising_on_bracket(v0, i0):
    t_hi = peak_time(v0, i0, P)
    assume(np.isfinite(t_hi))
    t = np.linspace(0, t_hi, 200)
    assert np.all(np.diff(voltage(v0, i0, t, P)) >= -1e-15)


class TestVjp:
    def solve_at(self, v0, i0, th):
        p = LifParams(0.02, 0.01, v_th=th)
        return newton_solve(NeuronState(v0, i0), float(peak_time(v0, i0, p)), NEWTON, p).t_star

    def test_threshold_gradient(self):
        s = NeuronState(0.0, 5.0)
        sol = newton_solve(s, bracket(0.0, 5.0), NEWTON, P)
        _, _, g_th = spike_time_vjp(sol, s, P, 1.0)
        assert g_th == pytest.approx(0.012361, abs=1e-6)
        h = 1e-6
        fd = (self.solve_at(0.0, 5.0, 1 + h) - self.solve_at(0.0, 5.0, 1 - h)) / (2 * h)
        assert g_th == pytest.approx(fd, rel=1e-6)

    def test_current_gradient_negative(self):
        s = NeuronState(0.0, 5.0)
        sol = newton_solve(s, bracket(0.0, 5.0), NEWTON, P)
        _, g_i, _ = spike_time_vjp(sol, s, P, 1.0)
        assert g_i < 0

    def test_zero_upstream(self):
        s = NeuronState(0.0, 5.0)
        sol = newton_solve(s, bracket(0.0, 5.0), NEWTON, P)
        assert spike_time_vjp(sol, s, P, 0.0) == (0.0, 0.0, 0.0)

    def test_matches_fd_where_slope_large(self, rng):
        h = 1e-6
        checked = 0
        for _ in range(200):
            v0, i0 = rng.uniform(-0.5, 0.9), rng.uniform(4.5, 40)
            s = NeuronState(v0, i0)
            sol = newton_solve(s, bracket(v0, i0), NEWTON, P)
            if abs(sol.dR_dt) <= 10 * NEWTON.deriv_floor:
                continue
            g = spike_time_vjp(sol, s, P, 1.0)
            fd_v = (self.solve_at(v0 + h, i0, 1) - self.solve_at(v0 - h, i0, 1)) / (2 * h)
            fd_i = (self.solve_at(v0, i0 + h, 1) - self.solve_at(v0, i0 - h, 1)) / (2 * h)
            fd_t = (self.solve_at(v0, i0, 1 + h) - self.solve_at(v0, i0, 1 - h)) / (2 * h)
            for got, ref in zip(g, (fd_v, fd_i, fd_t)):
                assert got == pytest.approx(ref, rel=1e-4, abs=1e-9)
            checked += 1
        assert checked > 150

    def test_floor_preserves_sign(self):
        d = floor_derivative(np.array([-1e-5, 0.0, 1e-5, -3.0, 3.0]), 0.01)
        assert np.allclose(d, [-0.01, 0.01, 0.01, -3.0, 3.0])

    def test_floor_bounds_gradient(self):
        sol = SpikeSolution(0.001, 0.0, 1e-9)
        g = spike_time_vjp(sol, NeuronState(0.0, 5.0), P, 1.0)
        assert abs(g[2]) == pytest.approx(100.0)
