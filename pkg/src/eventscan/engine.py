"""Event queues and the chunked forward pass of a LIF layer.

Every (instance, neuron) row owns a time-sorted queue of input events.  The
parallel path consumes a queue K events at a time: it builds one affine map
per inter-event gap, scans them so that every interval start state is known
at once, tests all intervals for a threshold crossing and commits only the
first crossing.  Work after that spike is discarded and the next chunk
resumes right after it, so the result matches the event-by-event serial
loop exactly.

Queues are dense arrays padded with +inf times and zero weights.  Rows are
processed data-parallel; a row only stays active while it has work left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lif import LifParams, NeuronState, spike_indicator
from .scan import DepthCounter, scan_components, step_coefficients
from .solver import SolverConfig, solve_unchecked


@dataclass(frozen=True)
class SpikeEvent:
    time: float
    weight: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.time) and self.time >= 0):
            raise ValueError("event time must be finite and non-negative")


@dataclass(frozen=True)
class EventQueue:
    """Time-sorted events of one neuron; ties keep insertion order."""

    events: tuple

    @classmethod
    def from_events(cls, events: Sequence[SpikeEvent]) -> "EventQueue":
        return cls(tuple(sorted(events, key=lambda e: e.time)))

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class EventQueues:
    """Padded event arrays for a (batch, neuron) block.

    ``times``, ``counts`` and ``source`` have a neuron axis of length 1 when
    all neurons of an instance see the same arrival times (no delays).
    """

    times: np.ndarray  # (B, Nq, E), +inf padded
    weights: np.ndarray  # (B, N, E), zero padded
    counts: np.ndarray  # (B, Nq)
    source: np.ndarray  # (B, Nq, E), flat source id, -1 for padding

    @property
    def shape(self) -> tuple:
        return self.weights.shape

    @property
    def shared(self) -> bool:
        return self.times.shape[1] == 1

    def neuron_counts(self) -> np.ndarray:
        return np.broadcast_to(self.counts, self.shape[:2])

    def row_times(self) -> np.ndarray:
        return np.broadcast_to(self.times, self.shape)

    @classmethod
    def from_queues(cls, queues: Sequence[Sequence[EventQueue]]) -> "EventQueues":
        """Build from a nested [instance][neuron] list of EventQueue."""
        b = len(queues)
        n = len(queues[0])
        e = max(1, max(len(q) for row in queues for q in row))
        times = np.full((b, n, e), np.inf)
        weights = np.zeros((b, n, e))
        source = np.full((b, n, e), -1, dtype=np.int64)
        counts = np.zeros((b, n), dtype=np.int64)
        for bi, row in enumerate(queues):
            for ni, q in enumerate(row):
                k = len(q)
                counts[bi, ni] = k
                times[bi, ni, :k] = [ev.time for ev in q.events]
                weights[bi, ni, :k] = [ev.weight for ev in q.events]
                source[bi, ni, :k] = np.arange(k)
        return cls(times, weights, counts, source)

    def batch_slice(self, sl: slice) -> "EventQueues":
        return EventQueues(self.times[sl], self.weights[sl], self.counts[sl], self.source[sl])

    def queue(self, b: int, n: int) -> EventQueue:
        nq = 0 if self.shared else n
        k = int(self.counts[b, nq])
        return EventQueue(
            tuple(SpikeEvent(float(t), float(w)) for t, w in zip(self.times[b, nq, :k], self.weights[b, n, :k]))
        )


@dataclass(frozen=True)
class ChunkPlan:
    """Chunk width, per-layer chunk budgets and per-layer spike caps."""

    chunk_size: int
    num_chunks: tuple
    spike_caps: tuple

    def __post_init__(self) -> None:
        if self.chunk_size < 1:
            raise ValueError("chunk size must be >= 1")
        if len(self.num_chunks) != len(self.spike_caps):
            raise ValueError("one chunk budget per layer expected")
        if any(c < 1 for c in self.num_chunks) or any(s < 1 for s in self.spike_caps):
            raise ValueError("chunk budgets and spike caps must be >= 1")

    def layer(self, i: int) -> tuple:
        return self.num_chunks[i], self.spike_caps[i]


def plan_chunks(n_input: int, k: int, s_max_per_layer: Sequence[int], layer_sizes: Sequence[int]) -> ChunkPlan:
    """Chunk budget per spiking layer.

    The first layer needs ceil(n_input / K) chunks to drain its queue plus
    one chunk per possible output spike.  Deeper layers receive at most
    s_max * n spikes from the previous layer.
    """
    s_max_per_layer = [int(s) for s in s_max_per_layer]
    layer_sizes = [int(n) for n in layer_sizes]
    if n_input < 1 or k < 1 or not s_max_per_layer or min(s_max_per_layer) < 1:
        raise ValueError("counts must be >= 1")
    if len(layer_sizes) < len(s_max_per_layer) or min(layer_sizes) < 1:
        raise ValueError("layer sizes must be >= 1 and cover every spiking layer")
    chunks = [-(-n_input // k) + s_max_per_layer[0]]
    for i in range(1, len(s_max_per_layer)):
        incoming = s_max_per_layer[i - 1] * layer_sizes[i - 1]
        chunks.append(-(-incoming // k) + s_max_per_layer[i])
    return ChunkPlan(k, tuple(chunks), tuple(s_max_per_layer))


def route_spikes(spike_times: np.ndarray, weights: np.ndarray, delays: np.ndarray | None = None) -> EventQueues:
    """Turn source spike trains into sorted event queues of the next layer.

    ``spike_times`` is (B, J, S) with +inf for missing spikes, ``weights`` and
    ``delays`` are (N, J).  Every (source spike, synapse) pair becomes one
    event at t + d with weight w.
    """
    spike_times = np.asarray(spike_times)
    weights = np.asarray(weights)
    b, j, s = spike_times.shape
    n = weights.shape[0]
    if weights.shape[1] != j:
        raise ValueError("weight matrix does not match the number of sources")
    flat = spike_times.reshape(b, j * s)
    src_neuron = np.repeat(np.arange(j), s)
    if delays is None:
        order = np.argsort(flat, axis=1, kind="stable")
        t_sorted = np.take_along_axis(flat, order, axis=1)
        counts = np.isfinite(t_sorted).sum(1)
        e = max(1, int(counts.max(initial=0)))
        t_sorted = t_sorted[:, :e]
        order = order[:, :e]
        valid = np.isfinite(t_sorted)
        w = weights.T[src_neuron[order]]  # (B, E, N)
        w = np.where(valid[..., None], w, 0.0).transpose(0, 2, 1)
        source = np.where(valid, order, -1)
        return EventQueues(t_sorted[:, None, :], np.ascontiguousarray(w), counts[:, None], source[:, None, :])
    delays = np.asarray(delays)
    if np.any(delays < 0):
        raise ValueError("delays must be non-negative")
    arrive = flat[:, None, :] + delays[:, src_neuron][None]  # (B, N, J*S)
    order = np.argsort(arrive, axis=2, kind="stable")
    t_sorted = np.take_along_axis(arrive, order, axis=2)
    counts = np.isfinite(t_sorted).sum(2)
    e = max(1, int(counts.max(initial=0)))
    t_sorted = t_sorted[:, :, :e]
    order = order[:, :, :e]
    valid = np.isfinite(t_sorted)
    w = weights[np.arange(n)[None, :, None], src_neuron[order]]
    w = np.where(valid, w, 0.0)
    source = np.where(valid, order, -1)
    return EventQueues(t_sorted, w, counts, source)


@dataclass
class WorkMetrics:
    """Per (instance, neuron) event accounting of one layer pass."""

    received: np.ndarray
    consumed: np.ndarray
    processed: np.ndarray
    output_spikes: np.ndarray
    capped: np.ndarray
    unfinished: np.ndarray
    combine_rounds: int = 0
    chunk_passes: int = 0

    @property
    def revisits(self) -> np.ndarray:
        return self.processed - self.consumed

    @property
    def fraction_consumed(self) -> float:
        total = int(self.received.sum())
        return 1.0 if total == 0 else float(self.consumed.sum()) / total

    @property
    def fraction_retained(self) -> float:
        total = int(self.processed.sum())
        return 1.0 if total == 0 else float(self.consumed.sum()) / total

    def record(self) -> dict:
        return {
            "received": int(self.received.sum()),
            "consumed": int(self.consumed.sum()),
            "processed": int(self.processed.sum()),
            "output_spikes": int(self.output_spikes.sum()),
            "capped": int(self.capped.sum()),
            "unfinished": int(self.unfinished.sum()),
            "fraction_consumed": self.fraction_consumed,
            "fraction_retained": self.fraction_retained,
            "combine_rounds": self.combine_rounds,
            "chunk_passes": self.chunk_passes,
        }


@dataclass
class LayerTrace:
    """Forward values kept for the backward pass.

    ``post_v``/``post_i`` hold the state right after each consumed event,
    ``spike_after`` the index of the last event consumed before each output
    spike (-1 when none).
    """

    queues: EventQueues
    post_v: np.ndarray  # (B, N, E)
    post_i: np.ndarray
    n_consumed: np.ndarray  # (B, N)
    spike_times: np.ndarray  # (B, N, S)
    spike_after: np.ndarray  # (B, N, S)
    n_spikes: np.ndarray  # (B, N)
    spike_current: np.ndarray | None = None  # (B, N, S), I at each spike

    def batch_slice(self, sl: slice) -> "LayerTrace":
        cur = None if self.spike_current is None else self.spike_current[sl]
        return LayerTrace(
            self.queues.batch_slice(sl), self.post_v[sl], self.post_i[sl], self.n_consumed[sl],
            self.spike_times[sl], self.spike_after[sl], self.n_spikes[sl], cur,
        )

    def spike_slopes(self, p: LifParams) -> np.ndarray:
        """dV/dt just before each output spike (NaN in empty slots)."""
        with np.errstate(invalid="ignore"):
            return np.where(np.isfinite(self.spike_times), (self.spike_current - p.v_th) / p.tau_m, np.nan)


@dataclass
class LayerResult:
    spike_times: np.ndarray
    metrics: WorkMetrics
    trace: LayerTrace = field(repr=False)


class _Rows:
    """Flattened row view of an EventQueues block in the working dtype."""

    def __init__(self, q: EventQueues, p: LifParams):
        b, n, e = q.shape
        self.b, self.n, self.e = b, n, e
        dt = p.np_dtype
        self.weights = np.ascontiguousarray(q.weights, dtype=dt).reshape(b * n, e)
        if q.shared:
            self.times = np.ascontiguousarray(q.times[:, 0, :], dtype=dt)
            self.time_row = np.repeat(np.arange(b), n)
            self.counts = np.repeat(q.counts[:, 0], n)
        else:
            self.times = np.ascontiguousarray(q.times, dtype=dt).reshape(b * n, e)
            self.time_row = np.arange(b * n)
            self.counts = q.counts.reshape(-1).astype(np.int64)


def _new_trace_arrays(r: int, e: int, s: int, dtype):
    return (
        np.zeros((r, e), dtype),
        np.zeros((r, e), dtype),
        np.full((r, s), np.inf, dtype),
        np.full((r, s), -2, np.int64),
    )


def _finish(
    q, rows, post_v, post_i, consumed, spikes, after, nspk, processed, capped, unfinished, rounds, passes, spk_cur
):
    b, n, e = rows.b, rows.n, rows.e
    shape = (b, n)
    s = spikes.shape[1]
    metrics = WorkMetrics(
        received=rows.counts.reshape(shape).copy(),
        consumed=consumed.reshape(shape),
        processed=processed.reshape(shape),
        output_spikes=nspk.reshape(shape),
        capped=capped.reshape(shape),
        unfinished=unfinished.reshape(shape),
        combine_rounds=rounds,
        chunk_passes=passes,
    )
    trace = LayerTrace(
        queues=q,
        post_v=post_v.reshape(b, n, e),
        post_i=post_i.reshape(b, n, e),
        n_consumed=consumed.reshape(shape),
        spike_times=spikes.reshape(b, n, s),
        spike_after=after.reshape(b, n, s),
        n_spikes=nspk.reshape(shape),
        spike_current=spk_cur.reshape(b, n, s),
    )
    return LayerResult(spikes.reshape(b, n, s), metrics, trace)


def _solve_crossing(v0, i0, dt, tp, cfg, p):
    inside = np.isfinite(tp) & (tp < dt)
    t_hi = np.where(inside, tp, dt)
    return solve_unchecked(v0, i0, t_hi, cfg, p)


def layer_forward(
    queues: EventQueues,
    p: LifParams,
    plan: ChunkPlan,
    cfg: SolverConfig,
    layer: int = 0,
    scan_method: str = "sklansky",
    counter: DepthCounter | None = None,
    trim: bool = True,
) -> LayerResult:
    """Chunked parallel forward pass of one LIF layer.

    Each pass takes up to K pending events per active row, scans their
    transition maps and commits at most one output spike per row.  With
    ``trim`` the chunk is narrowed to the widest pending queue when that is
    below K; the dropped columns would only be padding.
    """
    num_chunks, s_max = plan.layer(layer)
    k = plan.chunk_size
    dt_ = p.np_dtype
    rows = _Rows(queues, p)
    r, e = rows.b * rows.n, rows.e
    post_v, post_i, spikes, after = _new_trace_arrays(r, e, s_max, dt_)
    spk_cur = np.zeros((r, s_max), dt_)
    v = np.zeros(r, dt_)
    cur = np.zeros(r, dt_)
    t_now = np.zeros(r, dt_)
    ptr = np.zeros(r, np.int64)
    nspk = np.zeros(r, np.int64)
    processed = np.zeros(r, np.int64)
    done = np.zeros(r, bool)
    capped = np.zeros(r, bool)
    counter = counter if counter is not None else DepthCounter()
    rounds0 = counter.rounds
    passes = 0
    arange_k = np.arange(k)
    for _ in range(num_chunks):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        passes += 1
        remaining = rows.counts[act] - ptr[act]
        width = min(k, int(remaining.max()) + 1) if trim else k
        cols = arange_k[:width]
        idx = ptr[act, None] + cols
        inr = idx < rows.counts[act, None]
        idc = np.minimum(idx, e - 1)
        tk = np.where(inr, rows.times[rows.time_row[act, None], idc], np.inf).astype(dt_)
        wk = np.where(inr, rows.weights[act[:, None], idc], 0).astype(dt_)
        va, ia, ta = v[act], cur[act], t_now[act]
        prev = np.concatenate([ta[:, None], tk[:, :-1]], axis=1)
        with np.errstate(invalid="ignore"):
            gap = np.where(np.isinf(prev), 0, tk - prev).astype(dt_)
        cm, m01, cs = step_coefficients(gap, p)
        comps = scan_components([cm, m01, cs, np.zeros_like(wk), wk], scan_method, counter)
        vp = comps[0] * va[:, None] + comps[1] * ia[:, None] + comps[3]
        ip = comps[2] * ia[:, None] + comps[4]
        vs = np.concatenate([va[:, None], vp[:, :-1]], axis=1)
        is_ = np.concatenate([ia[:, None], ip[:, :-1]], axis=1)
        hit, tp = spike_indicator(vs, is_, gap, p)
        has = hit.any(1)
        first = np.argmax(hit, axis=1)
        nvalid = inr.sum(1)
        processed[act] += nvalid
        n_take = np.where(has, first, nvalid)
        take = cols[None, :] < n_take[:, None]
        ri, ci = np.nonzero(take)
        gi = act[ri]
        post_v[gi, ptr[gi] + ci] = vp[ri, ci]
        post_i[gi, ptr[gi] + ci] = ip[ri, ci]
        # rows without a spike advance to their last consumed event
        quiet = np.flatnonzero(~has)
        if quiet.size:
            q_rows = act[quiet]
            nv = nvalid[quiet]
            moved = nv > 0
            last = np.maximum(nv - 1, 0)
            v[q_rows] = np.where(moved, vp[quiet, last], va[quiet])
            cur[q_rows] = np.where(moved, ip[quiet, last], ia[quiet])
            t_now[q_rows] = np.where(moved, tk[quiet, last], ta[quiet])
            ptr[q_rows] += nv
            done[q_rows] = nv < width
        loud = np.flatnonzero(has)
        if loud.size:
            s_rows = act[loud]
            f = first[loud]
            v0 = vs[loud, f]
            i0 = is_[loud, f]
            u = _solve_crossing(v0, i0, gap[loud, f], tp[loud, f], cfg, p)
            t_star = prev[loud, f] + u
            slot = nspk[s_rows]
            spikes[s_rows, slot] = t_star
            after[s_rows, slot] = ptr[s_rows] + f - 1
            v[s_rows] = p.v_reset
            cur[s_rows] = i0 * np.exp(-u / p.tau_s)
            spk_cur[s_rows, slot] = cur[s_rows]
            t_now[s_rows] = t_star
            ptr[s_rows] += f
            nspk[s_rows] += 1
            hit_cap = nspk[s_rows] >= s_max
            done[s_rows] |= hit_cap
            capped[s_rows] |= hit_cap
    unfinished = ~done
    return _finish(
        queues, rows, post_v, post_i, ptr.copy(), spikes, after, nspk, processed, capped, unfinished,
        counter.rounds - rounds0, passes, spk_cur,
    )


def serial_forward(queues: EventQueues, p: LifParams, s_max: int, cfg: SolverConfig) -> LayerResult:
    """Event-by-event reference loop with the same cap and tie semantics.

    Rows are independent, so each step is vectorized across rows; the loop
    itself walks the events of all queues in order.
    """
    dt_ = p.np_dtype
    rows = _Rows(queues, p)
    r, e = rows.b * rows.n, rows.e
    post_v, post_i, spikes, after = _new_trace_arrays(r, e, s_max, dt_)
    spk_cur = np.zeros((r, s_max), dt_)
    v = np.zeros(r, dt_)
    cur = np.zeros(r, dt_)
    t_now = np.zeros(r, dt_)
    nspk = np.zeros(r, np.int64)
    consumed = np.zeros(r, np.int64)
    done = np.zeros(r, bool)
    capped = np.zeros(r, bool)
    all_rows = np.arange(r)
    for j in range(e + 1):
        live = all_rows[~done]
        if live.size == 0:
            break
        has_event = j < rows.counts[live]
        t_ev = np.full(live.size, np.inf, dt_)
        if j < e:
            t_ev[has_event] = rows.times[rows.time_row[live[has_event]], j]
        check = np.arange(live.size)
        while check.size:
            gi = live[check]
            gap = t_ev[check] - t_now[gi]
            hit, tp = spike_indicator(v[gi], cur[gi], gap, p)
            if not hit.any():
                break
            check = check[hit]
            gi = gi[hit]
            v0, i0 = v[gi], cur[gi]
            u = _solve_crossing(v0, i0, gap[hit], tp[hit], cfg, p)
            slot = nspk[gi]
            spikes[gi, slot] = t_now[gi] + u
            after[gi, slot] = j - 1
            t_now[gi] = t_now[gi] + u
            v[gi] = p.v_reset
            cur[gi] = i0 * np.exp(-u / p.tau_s)
            spk_cur[gi, slot] = cur[gi]
            nspk[gi] += 1
            hit_cap = nspk[gi] >= s_max
            done[gi] |= hit_cap
            capped[gi] |= hit_cap
            check = check[~hit_cap]
        step = live[has_event & ~done[live]]
        if step.size:
            te = rows.times[rows.time_row[step], j]
            gap = te - t_now[step]
            cm, m01, cs = step_coefficients(gap, p)
            v[step], cur[step] = cm * v[step] + m01 * cur[step], cs * cur[step] + rows.weights[step, j]
            t_now[step] = te
            post_v[step, j] = v[step]
            post_i[step, j] = cur[step]
            consumed[step] += 1
        done[live[~has_event]] = True
    unfinished = np.zeros(r, bool)
    return _finish(
        queues, rows, post_v, post_i, consumed, spikes, after, nspk, consumed.copy(), capped, unfinished, 0, e + 1,
        spk_cur,
    )


def process_chunk(
    state: NeuronState,
    t_now: float,
    chunk: Sequence[SpikeEvent],
    p: LifParams,
    cfg: SolverConfig,
    horizon: float | None = None,
):
    """One chunk step for a single neuron.

    Returns ``(new_state, t_new, spike_time or None, consumed)``.  When a
    ``horizon`` is given the gap from the last event to it is checked as
    well, and without a spike the state is evolved up to it.
    """
    state.check_finite()
    if state.v >= p.v_th:
        raise ValueError("state at chunk entry is already above threshold")
    times = np.array([ev.time for ev in chunk], dtype=float)
    weights = np.array([ev.weight for ev in chunk], dtype=float)
    if times.size and (np.any(np.diff(times) < 0) or times[0] < t_now):
        raise ValueError("chunk events must be sorted and not precede t_now")
    stops = times
    if horizon is not None:
        if horizon < (times[-1] if times.size else t_now):
            raise ValueError("horizon precedes the chunk")
        stops = np.append(times, horizon)
        weights = np.append(weights, 0.0)
    if stops.size == 0:
        return NeuronState(state.v, state.i), t_now, None, 0
    prev = np.concatenate([[t_now], stops[:-1]])
    gap = stops - prev
    cm, m01, cs = step_coefficients(gap, p)
    comps = scan_components([cm, m01, cs, np.zeros_like(weights), weights])
    vp = comps[0] * state.v + comps[1] * state.i + comps[3]
    ip = comps[2] * state.i + comps[4]
    vs = np.concatenate([[state.v], vp[:-1]])
    is_ = np.concatenate([[state.i], ip[:-1]])
    hit, tp = spike_indicator(vs, is_, gap, p)
    if hit.any():
        f = int(np.argmax(hit))
        u = float(_solve_crossing(vs[f], is_[f], gap[f], tp[f], cfg, p))
        t_star = float(prev[f] + u)
        new = NeuronState(p.v_reset, float(is_[f] * np.exp(-u / p.tau_s)))
        return new, t_star, t_star, min(f, times.size)
    return NeuronState(float(vp[-1]), float(ip[-1])), float(stops[-1]), None, int(times.size)
