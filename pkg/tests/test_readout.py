from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from eventscan.engine import route_spikes
from eventscan.lif import LifParams, NeuronState, apply_spike, evolve, voltage
from eventscan.readout import (
    ReadoutParams,
    event_kernel,
    li_interval_integral,
    logits,
    logits_vjp,
    weighted_li_interval_integral,
)

P = LifParams(tau_m=0.02, tau_s=0.005)
R = ReadoutParams(tau_li=0.01, tau_max=0.02, temperature=1.0, n_cls=3)


def quad_weighted(v, i, a, b, p=P, r=R):
    val, _ = quad(lambda t: np.exp(-t / r.tau_li) * voltage(v, i, t - a, p), a, b, epsabs=0, epsrel=1e-11, limit=200)
    return val


def trace_integral(times, weights, p=P, r=R):
    """Piecewise quadrature of exp(-t/tau_li) V(t) over [0, tau_max]."""
    order = np.argsort(times, kind="stable")
    s, t, total = NeuronState(0.0, 0.0), 0.0, 0.0
    for k in order:
        a = min(times[k], r.tau_max)
        total += quad_weighted(s.v, s.i, t, a, p, r)
        s = evolve(s, a - t, p)
        t = a
        if times[k] < r.tau_max:
            s = apply_spike(s, weights[k])
    return total + quad_weighted(s.v, s.i, t, r.tau_max, p, r)


class TestParams:
    @pytest.mark.parametrize("kw", [{"tau_li": 0}, {"tau_max": -1}, {"temperature": 0}, {"n_cls": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ReadoutParams(**kw)


class TestIntervalIntegrals:
    def test_unweighted_single_exponential(self):
        val = li_interval_integral(NeuronState(1.0, 0.0), 0.0, 0.013, P)
        assert val == pytest.approx(0.02 * (1 - np.exp(-0.013 / 0.02)), rel=1e-14)

    def test_zero_length(self):
        assert li_interval_integral(NeuronState(0.4, 2.0), 0.01, 0.01, P) == 0.0
        assert weighted_li_interval_integral(NeuronState(0.4, 2.0), 0.01, 0.01, P, R) == 0.0

    def test_zero_state(self):
        assert weighted_li_interval_integral(NeuronState(0.0, 0.0), 0.0, 0.01, P, R) == 0.0

    def test_unweighted_matches_quad(self, rng):
        for _ in range(50):
            v, i, dt = rng.uniform(-1, 1), rng.uniform(-5, 5), rng.uniform(1e-5, 0.05)
            ref, _ = quad(lambda t: voltage(v, i, t, P), 0, dt, epsabs=0, epsrel=1e-11)
            assert li_interval_integral(NeuronState(v, i), 0.0, dt, P) == pytest.approx(ref, rel=1e-9, abs=1e-15)

    def test_weighted_matches_quad(self, rng):
        for _ in range(50):
            v, i = rng.uniform(-1, 1), rng.uniform(-5, 5)
            a = rng.uniform(0, 0.02)
            b = a + rng.uniform(1e-5, 0.03)
            got = weighted_li_interval_integral(NeuronState(v, i), a, b, P, R)
            assert got == pytest.approx(quad_weighted(v, i, a, b), rel=1e-9, abs=1e-15)

    def test_large_tau_li_limit(self):
        r = ReadoutParams(tau_li=1e6, tau_max=0.02)
        s = NeuronState(0.3, 2.0)
        assert weighted_li_interval_integral(s, 0.0, 0.015, P, r) == pytest.approx(
            li_interval_integral(s, 0.0, 0.015, P), rel=1e-4
        )

    def test_reversed_interval_rejected(self):
        with pytest.raises(ValueError):
            li_interval_integral(NeuronState(0, 1), 0.02, 0.01, P)
        with pytest.raises(ValueError):
            weighted_li_interval_integral(NeuronState(0, 1), -0.01, 0.01, P, R)

    @given(st.floats(-1, 1), st.floats(-5, 5), st.floats(0, 0.02), st.floats(0, 0.02), st.floats(0, 0.02))
    def test_additivity(self, v, i, a, d1, d2):
        s = NeuronState(v, i)
        whole = weighted_li_interval_integral(s, a, a + d1 + d2, P, R)
        first = weighted_li_interval_integral(s, a, a + d1, P, R)
        second = weighted_li_interval_integral(evolve(s, d1, P), a + d1, a + d1 + d2, P, R)
        assert whole == pytest.approx(first + second, rel=1e-10, abs=1e-16)

    def test_earlier_spike_counts_more(self):
        early, _ = event_kernel(np.array(0.002), P, R)
        late, _ = event_kernel(np.array(0.006), P, R)
        assert early > late > 0


class TestLogits:
    def test_no_input(self):
        q = route_spikes(np.full((2, 4, 1), np.inf), np.ones((3, 4)))
        assert np.array_equal(logits(q, P, R), np.zeros((2, 3)))

    def test_single_spike_into_class_zero(self):
        w = np.zeros((3, 1))
        w[0, 0] = 1.0
        out = logits(route_spikes(np.array([[[0.003]]]), w), P, R)
        assert out[0, 0] > 0 and np.all(out[0, 1:] == 0)

    def test_temperature_scales(self, rng):
        x = np.sort(rng.uniform(0, 0.03, (2, 5, 2)), -1)
        w = rng.normal(size=(3, 5))
        q = route_spikes(x, w)
        hot = ReadoutParams(R.tau_li, R.tau_max, 7.5, 3)
        assert np.allclose(logits(q, P, hot), 7.5 * logits(q, P, R), rtol=1e-14)

    @pytest.mark.parametrize("method", ["sklansky", "serial"])
    def test_matches_dense_trace(self, method, rng):
        x = np.sort(rng.uniform(0, 0.03, (2, 6, 3)), -1)
        x[0, 2, 1:] = np.inf
        w = rng.normal(size=(3, 6))
        d = rng.uniform(0, 0.005, (3, 6))
        q = route_spikes(x, w, d)
        out = logits(q, P, R, method)
        for b in range(2):
            for c in range(3):
                k = q.counts[b, c]
                ref = trace_integral(q.times[b, c, :k], q.weights[b, c, :k])
                assert out[b, c] == pytest.approx(ref, rel=1e-7, abs=1e-14)

    def test_linear_in_weights(self, rng):
        x = np.sort(rng.uniform(0, 0.03, (1, 4, 2)), -1)
        w = rng.normal(size=(3, 4))
        q = route_spikes(x, w)
        g, _ = event_kernel(np.broadcast_to(q.times, q.weights.shape), P, R)
        assert np.allclose(logits(q, P, R)[0], (g * q.weights).sum(-1)[0], rtol=1e-12, atol=1e-16)

    def test_vjp_matches_fd(self, rng):
        x = np.sort(rng.uniform(0, 0.025, (2, 5, 2)), -1)
        w = rng.normal(size=(3, 5))
        q = route_spikes(x, w, rng.uniform(0, 0.004, (3, 5)))
        g_logits = rng.normal(size=(2, 3))
        g_t, g_w = logits_vjp(q, P, R, g_logits)

        def objective(times, weights):
            q2 = type(q)(times, weights, q.counts, q.source)
            return float((g_logits * logits(q2, P, R)).sum())

        h = 1e-7
        for b, c, e in [(0, 0, 0), (1, 2, 3), (0, 1, 5), (1, 0, 9)]:
            if e >= q.counts[b, c]:
                continue
            tp, tm = q.times.copy(), q.times.copy()
            tp[b, c, e] += h
            tm[b, c, e] -= h
            fd_t = (objective(tp, q.weights) - objective(tm, q.weights)) / (2 * h)
            assert g_t[b, c, e] == pytest.approx(fd_t, rel=1e-5, abs=1e-9)
            wp, wm = q.weights.copy(), q.weights.copy()
            wp[b, c, e] += 1e-6
            wm[b, c, e] -= 1e-6
            fd_w = (objective(q.times, wp) - objective(q.times, wm)) / 2e-6
            assert g_w[b, c, e] == pytest.approx(fd_w, rel=1e-5, abs=1e-12)

    def test_events_after_horizon_ignored(self):
        w = np.ones((3, 1))
        out = logits(route_spikes(np.array([[[0.5]]]), w), P, R)
        assert np.all(out == 0)
        g_t, g_w = logits_vjp(route_spikes(np.array([[[0.5]]]), w), P, R, np.ones((1, 3)))
        assert np.all(g_t == 0) and np.all(g_w == 0)
