"""Affine transition maps and inclusive prefix scans over them.

Between two events the state s = (V, I) advances as s -> M s + b with

    M = [[Cm, k (Cm - Cs)],      b = (0, w),
         [0,  Cs          ]]

where Cm = exp(-dt/tau_m), Cs = exp(-dt/tau_s), k = tau_s/(tau_m - tau_s) and
w is the weight of the event ending the gap.  Since M is upper triangular a
map is stored as five arrays (m00, m01, m11, b0, b1), which broadcast like any
numpy array; the last axis is the scan axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lif import LifParams, NeuronState, kernel


@dataclass(frozen=True)
class AffineMap:
    """Upper-triangular affine map s -> M s + b on (V, I) states."""

    m00: np.ndarray
    m01: np.ndarray
    m11: np.ndarray
    b0: np.ndarray
    b1: np.ndarray

    @classmethod
    def from_matrix(cls, m, b) -> "AffineMap":
        m = np.asarray(m, dtype=float)
        b = np.asarray(b, dtype=float)
        if m.shape != (2, 2) or b.shape != (2,):
            raise ValueError("expected a 2x2 matrix and a 2-vector")
        if m[1, 0] != 0:
            raise ValueError("lower-left entry must be zero")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
            raise ValueError("map entries must be finite")
        return cls(m[0, 0], m[0, 1], m[1, 1], b[0], b[1])

    @classmethod
    def identity(cls, shape=(), dtype=np.float64) -> "AffineMap":
        one = np.ones(shape, dtype)
        zero = np.zeros(shape, dtype)
        return cls(one, zero, one.copy(), zero.copy(), zero.copy())

    @property
    def matrix(self) -> np.ndarray:
        z = np.zeros_like(np.asarray(self.m00))
        return np.array([[self.m00, self.m01], [z, self.m11]])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.b0, self.b1])

    @property
    def shape(self) -> tuple:
        return np.broadcast_shapes(*(np.shape(c) for c in self.components()))

    def components(self) -> tuple:
        return self.m00, self.m01, self.m11, self.b0, self.b1

    def apply(self, v, i):
        """Apply to raw (v, i) arrays."""
        return self.m00 * v + self.m01 * i + self.b0, self.m11 * i + self.b1

    def __call__(self, state: NeuronState) -> NeuronState:
        v, i = self.apply(state.v, state.i)
        return NeuronState(v, i)

    def __getitem__(self, idx) -> "AffineMap":
        return AffineMap(*(np.broadcast_to(c, self.shape)[idx] for c in self.components()))


def step_coefficients(dt, p: LifParams):
    """(Cm, k(Cm - Cs), Cs) for gaps ``dt``; infinite gaps decay to zero."""
    dt = np.asarray(dt)
    return np.exp(-dt / p.tau_m), kernel(dt, p), np.exp(-dt / p.tau_s)


def map_for_step(dt, weight, p: LifParams) -> AffineMap:
    """Map that evolves by ``dt`` and then injects an event of ``weight``."""
    dt = np.asarray(dt, dtype=p.np_dtype)
    if np.any(dt < 0):
        raise ValueError("dt must be non-negative")
    cm, m01, cs = step_coefficients(dt, p)
    weight = np.asarray(weight, dtype=p.np_dtype)
    return AffineMap(cm, m01, cs, np.zeros_like(weight), weight)


def combine(later: AffineMap, earlier: AffineMap) -> AffineMap:
    """Composition ``later o earlier``: (M2 M1, M2 b1 + b2)."""
    return AffineMap(*_combine(later.components(), earlier.components()))


def _combine(a, b):
    p2, q2, r2, x2, y2 = a
    p1, q1, r1, x1, y1 = b
    return (
        p2 * p1,
        p2 * q1 + q2 * r1,
        r2 * r1,
        p2 * x1 + q2 * y1 + x2,
        r2 * y1 + y2,
    )


def _combine_into(a, b, tmp) -> None:
    """a <- a o b in place; ``tmp`` is scratch space shaped like a."""
    p2, q2, r2, x2, y2 = a
    p1, q1, r1, x1, y1 = b
    np.multiply(p2, x1, out=tmp)
    x2 += tmp
    np.multiply(q2, y1, out=tmp)
    x2 += tmp
    np.multiply(r2, y1, out=tmp)
    y2 += tmp
    q2 *= r1
    np.multiply(p2, q1, out=tmp)
    q2 += tmp
    p2 *= p1
    r2 *= r1


@dataclass
class DepthCounter:
    """Counts sequential combine rounds and total combine applications."""

    rounds: int = 0
    combines: int = 0
    history: list = field(default_factory=list)

    def add(self, rounds: int, combines: int) -> None:
        self.rounds += rounds
        self.combines += combines
        self.history.append(rounds)


def _ceil_log2(n: int) -> int:
    return max(0, int(n - 1).bit_length())


def _scan_sklansky(comps, counter):
    """Divide-and-conquer scan: ceil(log2 K) rounds of K/2 combines each."""
    k = comps[0].shape[-1]
    levels = _ceil_log2(k)
    width = 1 << levels
    lead = comps[0].shape[:-1]
    dt = np.result_type(*comps)
    ident = (1.0, 0.0, 1.0, 0.0, 0.0)
    padded = []
    for c, fill in zip(comps, ident):
        buf = np.full(lead + (width,), fill, dt)
        buf[..., :k] = c
        padded.append(buf)
    comps = padded
    tmp = np.empty(lead + (width // 2,), comps[0].dtype)
    for d in range(levels):
        half = 1 << d
        blocks = [c.reshape(lead + (width // (2 * half), 2, half)) for c in comps]
        low_last = [b[..., 0, -1:] for b in blocks]
        high = [b[..., 1, :] for b in blocks]
        _combine_into(high, low_last, tmp.reshape(high[0].shape))
    if counter is not None:
        counter.add(levels, levels * (width // 2))
    return [c[..., :k] for c in comps]


def _scan_blelloch(comps, counter):
    """Work-efficient up-sweep/down-sweep scan with inclusive output."""
    k = comps[0].shape[-1]
    levels = _ceil_log2(k)
    comps = [c.copy() for c in comps]
    rounds = 0
    combines = 0
    for d in range(levels):
        step = 1 << (d + 1)
        hi = np.arange(step - 1, k, step)
        if hi.size == 0:
            continue
        lo = hi - (step >> 1)
        new = _combine([c[..., hi] for c in comps], [c[..., lo] for c in comps])
        for c, n in zip(comps, new):
            c[..., hi] = n
        rounds += 1
        combines += hi.size
    for d in range(levels - 2, -1, -1):
        step = 1 << (d + 1)
        hi = np.arange(step + (step >> 1) - 1, k, step)
        if hi.size == 0:
            continue
        lo = hi - (step >> 1)
        new = _combine([c[..., hi] for c in comps], [c[..., lo] for c in comps])
        for c, n in zip(comps, new):
            c[..., hi] = n
        rounds += 1
        combines += hi.size
    if counter is not None:
        counter.add(rounds, combines)
    return comps


def _scan_serial(comps, counter):
    k = comps[0].shape[-1]
    out = [c.copy() for c in comps]
    for j in range(1, k):
        new = _combine([c[..., j] for c in out], [c[..., j - 1] for c in out])
        for c, n in zip(out, new):
            c[..., j] = n
    if counter is not None:
        counter.add(k - 1, k - 1)
    return out


_METHODS = {"sklansky": _scan_sklansky, "blelloch": _scan_blelloch, "serial": _scan_serial}


def scan_components(comps, method: str = "sklansky", counter: DepthCounter | None = None):
    """Inclusive scan on raw component arrays (scan axis last)."""
    if comps[0].shape[-1] < 1:
        raise ValueError("scan needs at least one map")
    try:
        fn = _METHODS[method]
    except KeyError:
        raise ValueError(f"unknown scan method {method!r}") from None
    shape = np.broadcast_shapes(*(c.shape for c in comps))
    comps = [np.broadcast_to(c, shape) for c in comps]
    return fn(comps, counter)


def scan(
    maps: AffineMap | Sequence[AffineMap],
    method: str = "sklansky",
    counter: DepthCounter | None = None,
):
    """Inclusive prefix composition: out[k] = maps[k] o ... o maps[0].

    ``maps`` is either a stacked AffineMap whose components carry the scan
    axis last, or a sequence of maps (a list of the same length is returned).
    """
    if isinstance(maps, AffineMap):
        comps = [np.atleast_1d(np.asarray(c, dtype=float)) for c in maps.components()]
        return AffineMap(*scan_components(comps, method, counter))
    maps = list(maps)
    if not maps:
        raise ValueError("scan needs at least one map")
    comps = [np.stack([np.asarray(c) for c in col], axis=-1) for col in zip(*(m.components() for m in maps))]
    out = scan_components(comps, method, counter)
    return [AffineMap(*(c[..., j] for c in out)) for j in range(len(maps))]


def fold(maps: Sequence[AffineMap]) -> AffineMap:
    """Left-to-right composition of a sequence, the reference for scan."""
    maps = list(maps)
    if not maps:
        raise ValueError("fold needs at least one map")
    acc = maps[0]
    for m in maps[1:]:
        acc = combine(m, acc)
    return acc
