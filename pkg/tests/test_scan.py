from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eventscan.lif import LifParams, NeuronState, apply_spike, evolve
from eventscan.scan import (
    AffineMap,
    DepthCounter,
    combine,
    fold,
    map_for_step,
    scan,
    scan_components,
)

P = LifParams(tau_m=0.02, tau_s=0.01)
METHODS = ("sklansky", "blelloch", "serial")


def random_maps(rng, shape):
    return AffineMap(
        rng.uniform(0.1, 1.0, shape),
        rng.normal(0, 0.5, shape),
        rng.uniform(0.1, 1.0, shape),
        rng.normal(0, 1, shape),
        rng.normal(0, 1, shape),
    )


def matrix_compose(a: AffineMap, b: AffineMap):
    """Direct 3x3 homogeneous-matrix product a o b."""
    def hom(m):
        out = np.eye(3)
        out[:2, :2] = m.matrix
        out[:2, 2] = m.offset
        return out

    return hom(a) @ hom(b)


finite = st.floats(-3, 3, allow_nan=False)
maps = st.builds(AffineMap, finite, finite, finite, finite, finite)


class TestAffineMap:
    def test_step_map_values(self):
        m = map_for_step(0.005, 1.0, P)
        assert np.allclose(m.matrix, [[np.exp(-0.25), np.exp(-0.25) - np.exp(-0.5)], [0, np.exp(-0.5)]], atol=1e-15)
        assert m.m00 == pytest.approx(0.778801, abs=1e-6)
        assert m.m01 == pytest.approx(0.17227012, abs=1e-8)
        assert m.m11 == pytest.approx(0.606531, abs=1e-6)
        assert np.allclose(m.offset, [0.0, 1.0])

    def test_zero_step_is_identity(self):
        m = map_for_step(0.0, 0.0, P)
        assert np.allclose(m.matrix, np.eye(2)) and np.allclose(m.offset, 0)

    def test_negative_dt_rejected(self):
        with pytest.raises(ValueError):
            map_for_step(-0.001, 1.0, P)

    def test_from_matrix_rejects_lower_left(self):
        with pytest.raises(ValueError):
            AffineMap.from_matrix([[1, 0], [0.5, 1]], [0, 0])

    @given(st.floats(-2, 2), st.floats(-5, 5), st.floats(0, 0.05), st.floats(-3, 3))
    def test_map_equals_evolve_then_spike(self, v, i, dt, w):
        out = map_for_step(dt, w, P)(NeuronState(v, i))
        ref = apply_spike(evolve(NeuronState(v, i), dt, P), w)
        assert out.v == pytest.approx(ref.v, abs=1e-12)
        assert out.i == pytest.approx(ref.i, abs=1e-12)


class TestCombine:
    @given(maps)
    def test_identity(self, f):
        e = AffineMap.identity()
        for g in (combine(e, f), combine(f, e)):
            assert np.allclose(g.components(), f.components(), atol=0)

    @given(maps, maps, maps)
    def test_associative(self, a, b, c):
        left = combine(combine(a, b), c)
        right = combine(a, combine(b, c))
        assert np.allclose(left.components(), right.components(), rtol=1e-12, atol=1e-12)

    @given(maps, maps)
    def test_matches_matrix_product(self, a, b):
        h = matrix_compose(a, b)
        g = combine(a, b)
        assert np.allclose(g.matrix, h[:2, :2], atol=1e-12)
        assert np.allclose(g.offset, h[:2, 2], atol=1e-12)

    def test_two_step_chain(self):
        f1 = map_for_step(0.002, 1.0, P)
        f2 = map_for_step(0.003, 0.5, P)
        out = combine(f2, f1)(NeuronState(0.0, 0.0))
        ref = apply_spike(evolve(apply_spike(evolve(NeuronState(0.0, 0.0), 0.002, P), 1.0), 0.003, P), 0.5)
        assert out.v == pytest.approx(ref.v, abs=1e-14)
        assert out.i == pytest.approx(ref.i, abs=1e-14)


class TestScan:
    @pytest.mark.parametrize("method", METHODS)
    def test_single_map(self, method, rng):
        m = random_maps(rng, (1,))
        out = scan(m, method)
        assert np.allclose(out.components(), m.components())

    @pytest.mark.parametrize("method", METHODS)
    def test_identities(self, method):
        e = AffineMap.identity((17,))
        out = scan(e, method)
        assert np.allclose(out.matrix, np.eye(2)[:, :, None])
        assert np.allclose(out.offset, 0)

    @pytest.mark.parametrize("method", METHODS)
    def test_matches_fold_states(self, method, rng):
        dts = rng.uniform(0, 0.01, 128)
        ws = rng.normal(0, 1, 128)
        maps_ = [map_for_step(d, w, P) for d, w in zip(dts, ws)]
        out = scan(maps_, method)
        s = NeuronState(0.0, 0.0)
        for k, m in enumerate(maps_):
            s = m(s)
            got = out[k](NeuronState(0.0, 0.0))
            assert got.v == pytest.approx(s.v, rel=1e-9, abs=1e-12)
            assert got.i == pytest.approx(s.i, rel=1e-9, abs=1e-12)

    @pytest.mark.parametrize("method", ("sklansky", "blelloch"))
    def test_batched_lengths(self, method, rng):
        for k in (1, 2, 3, 5, 8, 31, 64, 100, 129):
            comps = random_maps(rng, (4, k)).components()
            got = scan_components(list(comps), method)
            ref = scan_components(list(comps), "serial")
            for g, r in zip(got, ref):
                assert np.allclose(g, r, rtol=1e-12, atol=1e-12)

    def test_fold_is_last_prefix(self, rng):
        maps_ = [random_maps(rng, ()) for _ in range(9)]
        assert np.allclose(fold(maps_).components(), scan(maps_)[-1].components())

    @pytest.mark.parametrize("k", [1, 2, 7, 8, 9, 128, 1000])
    def test_sklansky_depth(self, k, rng):
        counter = DepthCounter()
        scan_components(list(random_maps(rng, (k,)).components()), "sklansky", counter)
        assert counter.rounds == int(np.ceil(np.log2(k)))

    def test_blelloch_depth_bound(self, rng):
        counter = DepthCounter()
        scan_components(list(random_maps(rng, (128,)).components()), "blelloch", counter)
        assert counter.rounds <= 2 * 7
        assert counter.combines <= 2 * 128

    def test_unknown_method(self, rng):
        with pytest.raises(ValueError):
            scan(random_maps(rng, (3,)), "bogus")

    def test_float32_preserved(self, rng):
        comps = [c.astype(np.float32) for c in random_maps(rng, (3, 10)).components()]
        out = scan_components(comps, "sklansky")
        assert all(c.dtype == np.float32 for c in out)
