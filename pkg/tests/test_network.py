from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eventscan.engine import route_spikes
from eventscan.lif import LifParams
from eventscan.network import (
    LayerParams,
    Network,
    RegularizerConfig,
    cross_entropy,
    forward,
    gradients,
    merge_metrics,
    quantize_spike_times,
    softplus,
    softplus_grad,
    spike_count_regularizer,
)
from eventscan.readout import ReadoutParams
from eventscan.readout import logits as readout_logits
from eventscan.verify import random_net


class TestQuantize:
    def test_close_times_collide(self):
        assert np.allclose(quantize_spike_times([0.0021, 0.0027], 0.003), [0.003, 0.003])

    def test_half_rounds_up(self):
        assert quantize_spike_times([0.0045], 0.003)[0] == pytest.approx(0.006)

    def test_zero_is_identity(self):
        x = np.array([0.00123, np.inf])
        assert quantize_spike_times(x, 0.0) is not None
        assert np.array_equal(quantize_spike_times(x, 0.0), x)

    def test_missing_spikes_stay_missing(self):
        assert np.isinf(quantize_spike_times([np.inf], 0.001)[0])

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            quantize_spike_times([0.1], -0.001)

    @given(st.lists(st.floats(0, 0.2), min_size=1, max_size=20), st.sampled_from([1e-4, 2.5e-4, 1e-3, 5e-3]))
    def test_idempotent(self, xs, dt):
        once = quantize_spike_times(xs, dt)
        assert np.array_equal(quantize_spike_times(once, dt), once)

    @given(st.lists(st.floats(0, 0.2), min_size=1, max_size=20), st.sampled_from([1e-4, 1e-3, 5e-3]))
    def test_nearest_multiple(self, xs, dt):
        q = quantize_spike_times(xs, dt)
        assert np.all(np.abs(q - np.asarray(xs)) <= dt / 2 + 1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = cross_entropy(np.zeros((2, 3)), np.array([0, 2]))
        assert loss == pytest.approx(np.log(3))
        assert np.allclose(grad.sum(1), 0)

    def test_gradient_fd(self, rng):
        z = rng.normal(size=(4, 3))
        y = rng.integers(0, 3, 4)
        _, g = cross_entropy(z, y)
        h = 1e-6
        for idx in [(0, 0), (1, 2), (3, 1)]:
            zp, zm = z.copy(), z.copy()
            zp[idx] += h
            zm[idx] -= h
            fd = (cross_entropy(zp, y)[0] - cross_entropy(zm, y)[0]) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-6)

    def test_large_logits_stable(self):
        loss, _ = cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)


def reg_inputs(vmax, spiked, valid=None):
    vmax = np.asarray(vmax, float)[None, None]
    spiked = np.asarray(spiked, bool)[None, None]
    valid = np.ones_like(spiked) if valid is None else np.asarray(valid, bool)[None, None]
    return [vmax], [spiked], [valid]


class TestRegularizer:
    def test_on_target_is_zero(self):
        loss, grads = spike_count_regularizer(*reg_inputs([1.3, 0.5, 1.1], [1, 0, 1]), 1.0, RegularizerConfig(2.0, 1.0))
        assert loss == 0.0 and not grads[0].any()

    def test_silent_neuron_hand_value(self):
        loss, grads = spike_count_regularizer(*reg_inputs([0.4, 0.7], [0, 0]), 1.0, RegularizerConfig(2.0, 1.0))
        # gate 1, mean shortfall ((1 - 0.4) + (1 - 0.7)) / 2
        assert loss == pytest.approx(0.45)
        assert np.allclose(grads[0], [[[-0.5, -0.5]]])

    def test_overfiring_at_threshold(self):
        loss, _ = spike_count_regularizer(*reg_inputs([1.0] * 5, [1] * 5), 1.0, RegularizerConfig(2.0, 1.0))
        assert loss == 0.0

    def test_overfiring_hand_value(self):
        loss, _ = spike_count_regularizer(*reg_inputs([1.2, 1.4, 1.0, 0.3], [1, 1, 1, 0]), 1.0, RegularizerConfig(2.0, 1.0))
        # gate 3/2 - 1, mean excess (0.2 + 0.4 + 0) / 3
        assert loss == pytest.approx(0.5 * 0.2)

    def test_empty_sets_are_zero(self):
        loss, grads = spike_count_regularizer(*reg_inputs([0.0, 0.0], [0, 0], [0, 0]), 1.0, RegularizerConfig(2.0, 1.0))
        assert loss == 0.0 and np.isfinite(grads[0]).all()

    def test_gradient_fd(self, rng):
        vmax = rng.uniform(0.2, 1.8, (3, 4, 6))
        spiked = rng.random((3, 4, 6)) < 0.3
        valid = rng.random((3, 4, 6)) < 0.9
        cfg = RegularizerConfig(1.5, 1.0)
        _, g = spike_count_regularizer([vmax], [spiked], [valid], 1.0, cfg)
        h = 1e-7
        for idx in [(0, 0, 0), (1, 2, 3), (2, 3, 5), (0, 1, 4)]:
            vp, vm = vmax.copy(), vmax.copy()
            vp[idx] += h
            vm[idx] -= h
            fd = (spike_count_regularizer([vp], [spiked], [valid], 1.0, cfg)[0]
                  - spike_count_regularizer([vm], [spiked], [valid], 1.0, cfg)[0]) / (2 * h)
            assert g[0][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    @pytest.mark.parametrize("kw", [{"c_target": 0}, {"lambda_reg": -1}])
    def test_config_rejects(self, kw):
        with pytest.raises(ValueError):
            RegularizerConfig(**kw)


class TestLoss:
    def test_additivity(self, rng):
        net = random_net(rng)
        x = rng.uniform(0, 0.02, (3, net.n_inputs, 3))
        y = np.array([0, 1, 2])
        res = forward(net, x, y, RegularizerConfig(2.0, 0.3))
        assert res.loss == res.ce + 0.3 * res.reg

    def test_lambda_zero_matches_pure_ce(self, rng):
        net = random_net(rng)
        x = rng.uniform(0, 0.02, (3, net.n_inputs, 3))
        y = np.array([0, 1, 2])
        a = gradients(net, forward(net, x, y, RegularizerConfig(2.0, 0.0), record=True))
        b = gradients(net, forward(net, x, y, None, record=True))
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_engines_agree(self, rng):
        net = random_net(rng)
        x = rng.uniform(0, 0.02, (3, net.n_inputs, 3))
        y = np.array([0, 1, 2])
        reg = RegularizerConfig(2.0, 0.1)
        ga = gradients(net, forward(net, x, y, reg, record=True))
        net.engine = "serial"
        gb = gradients(net, forward(net, x, y, reg, record=True))
        for k in ga:
            assert np.allclose(ga[k], gb[k], rtol=1e-8, atol=1e-10)


class TestNetwork:
    def test_softplus(self):
        assert softplus(0.0, 5.0) == pytest.approx(np.log(2) / 5)
        assert softplus(1000.0, 5.0) == pytest.approx(1000.0)
        x = np.linspace(-3, 3, 7)
        fd = (softplus(x + 1e-7, 5.0) - softplus(x - 1e-7, 5.0)) / 2e-7
        assert np.allclose(softplus_grad(x, 5.0), fd, rtol=1e-6)

    def test_shape_checks(self):
        lif, r = LifParams(0.02, 0.005), ReadoutParams(n_cls=3)
        with pytest.raises(ValueError):
            Network([LayerParams(np.ones((4, 2))), LayerParams(np.ones((3, 5)))], lif, r, (2,))
        with pytest.raises(ValueError):
            Network([LayerParams(np.ones((4, 2))), LayerParams(np.ones((2, 4)))], lif, r, (2,))
        with pytest.raises(ValueError):
            LayerParams(np.ones((2, 2)), None, True)

    def test_metrics_merge(self, rng):
        net = random_net(rng)
        res = forward(net, rng.uniform(0, 0.02, (2, net.n_inputs, 3)))
        tot = merge_metrics(res.metrics)
        assert tot["received"] == sum(int(m.received.sum()) for m in res.metrics)
        assert 0 <= tot["fraction_consumed"] <= 1

    def test_quantized_forward_uses_grid(self, rng):
        net = random_net(rng, delays=False)
        x = rng.uniform(0, 0.02, (2, net.n_inputs, 3))
        a = forward(net, x, delta_t=0.001)
        b = forward(net, quantize_spike_times(x, 0.001), delta_t=0.001)
        assert np.array_equal(a.logits, b.logits)
        # the readout sees hidden spikes snapped to the grid
        h = quantize_spike_times(a.layers[-1].spike_times, 0.001)
        ref = readout_logits(route_spikes(h, net.layers[-1].weights), net.lif, net.readout)
        assert np.allclose(a.logits, ref, rtol=1e-12, atol=1e-15)
