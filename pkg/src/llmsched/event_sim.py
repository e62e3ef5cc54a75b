"""Query-level discrete-event execution of schedules and baseline policies.

Queries come from an unbounded closed-loop supply with lengths sampled from
the input/output PMFs; the first ``n_queries`` are tracked and the run ends
when all of them have finished. Output lengths are hidden from the policy.
"""
from __future__ import annotations

import csv
import heapq
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cost_model import ProfileTable, kv_cache_bytes, stage_time
from .schedule_core import InfeasibleError, PartialTpSpec, ScheduleConfig, Stage, memory_check, rra_stages
from .seqdist import LengthPMF, mean_length, sample_lengths
from .specs import ClusterSpec, ModelSpec


class SimulationError(RuntimeError):
    """Internal inconsistency such as a deadlock; ``trace`` holds recent events."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class SimPolicy:
    dynamic_adjust: bool = True
    threshold: float = 0.1
    warmup_frac: float = 0.1
    check_memory: bool = True

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")


@dataclass
class MeasuredStats:
    throughput: float
    token_rate: float
    latency_p50: float
    latency_p99: float
    latency_max: float
    mean_decode_batch: float
    batch_trace: list[float]
    busy_fraction: list[float]
    encode_spread: float
    decode_spread: float
    adjustments: int
    n_completed: int
    window: tuple[float, float]
    records: np.ndarray = field(repr=False, default=None)   # id, input_len, output_len, admit, finish
    details: dict = field(default_factory=dict, repr=False)

    @property
    def idle_fraction(self) -> list[float]:
        return [1.0 - b for b in self.busy_fraction]

    def to_dict(self) -> dict:
        return {
            "throughput": self.throughput, "token_rate": self.token_rate,
            "latency": {"p50": self.latency_p50, "p99": self.latency_p99, "max": self.latency_max},
            "mean_decode_batch": self.mean_decode_batch, "busy_fraction": self.busy_fraction,
            "encode_spread_p99": self.encode_spread, "decode_spread_p99": self.decode_spread,
            "adjustments": self.adjustments, "n_completed": self.n_completed, "window": list(self.window),
            "batch_trace_len": len(self.batch_trace),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "input_len", "output_len", "admit", "finish"])
            for row in self.records:
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3])), repr(float(row[4]))])


# -- query supply ------------------------------------------------------------

class QuerySource:
    """Closed-loop supply: ids are dense, lengths are pre-sampled in chunks."""

    CHUNK = 4096

    def __init__(self, pe: LengthPMF, pd: LengthPMF, rng: np.random.Generator):
        self.pe, self.pd, self.rng = pe, pd, rng
        self.input_len = np.empty(0, dtype=np.int64)
        self.output_len = np.empty(0, dtype=np.int64)
        self.admit = np.empty(0)
        self.finish = np.empty(0)
        self.emitted = np.empty(0, dtype=np.int64)
        self.next_id = 0
        self.deferred: deque[int] = deque()

    def _grow(self, need: int) -> None:
        while self.input_len.size < need:
            n = self.CHUNK
            self.input_len = np.concatenate([self.input_len, sample_lengths(self.pe, self.rng, n)])
            self.output_len = np.concatenate([self.output_len, sample_lengths(self.pd, self.rng, n)])
            self.admit = np.concatenate([self.admit, np.full(n, np.nan)])
            self.finish = np.concatenate([self.finish, np.full(n, np.nan)])
            self.emitted = np.concatenate([self.emitted, np.zeros(n, dtype=np.int64)])

    def take_one(self) -> int:
        if self.deferred:
            return self.deferred.popleft()
        qid = self.next_id
        self.next_id += 1
        self._grow(self.next_id)
        return qid

    def take(self, n: int) -> list[int]:
        return [self.take_one() for _ in range(n)]

    def put_back(self, ids) -> None:
        # returned queries go to the head of the line, in their original order
        for q in reversed(list(ids)):
            self.deferred.appendleft(q)


def fit_encode_workload(ids: list[int], source: QuerySource, target_tokens: float, threshold: float) -> list[int]:
    """Bring the batch's input-token sum into ``(1 +/- threshold) * target_tokens``.

    Tail queries are dropped (returned to the supply) or appended while doing
    so moves the sum closer to the target, so the batch count is not biased
    when single queries are larger than the band.
    """
    ids = list(ids)
    lo, hi = (1 - threshold) * target_tokens, (1 + threshold) * target_tokens
    total = int(source.input_len[ids].sum()) if ids else 0
    if total > hi:
        removed = []
        while total > hi and len(ids) > 1:
            last = int(source.input_len[ids[-1]])
            if abs(total - last - target_tokens) >= abs(total - target_tokens):
                break
            removed.append(ids.pop())
            total -= last
        source.put_back(reversed(removed))
        return ids
    while total < lo:
        nxt = source.take_one()
        size = int(source.input_len[nxt])
        if abs(total + size - target_tokens) >= abs(total - target_tokens):
            source.put_back([nxt])
            break
        ids.append(nxt)
        total += size
    return ids


def adjust_encoder_batch(b_e: int, b_d: float, decode_batch: float, threshold: float, min_batch: int = 1) -> int:
    """Next encoder batch: unchanged inside ``(1 +/- threshold) * b_d``, else corrected by the deficit."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    if abs(decode_batch - b_d) <= threshold * b_d:
        return b_e
    return max(min_batch, b_e + int(round(b_d - decode_batch)))


# -- helpers -----------------------------------------------------------------

def _spread_p99(groups: dict) -> float:
    """99th percentile of |t - mean| / mean within groups of comparable stage times."""
    devs = []
    for times in groups.values():
        if len(times) < 2:
            continue
        a = np.asarray(times)
        m = a.mean()
        if m > 0:
            devs.append(np.abs(a - m) / m)
    if not devs:
        return 0.0
    return float(np.percentile(np.concatenate(devs), 99))


class _Busy:
    def __init__(self, n: int):
        self.t = np.zeros(n)

    def add(self, k: int, dt: float) -> None:
        self.t[k] += dt

    def fractions(self, span: float) -> list[float]:
        if span <= 0:
            return [0.0] * len(self.t)
        return [float(min(1.0, x / span)) for x in self.t]


def _clamp(table: ProfileTable, b: float) -> float:
    return min(max(b, 1.0), table.max_batch)


def _decode_time(stages, table, batch: int, ctx: float) -> list[float]:
    b = _clamp(table, batch)
    return [stage_time(table, st.decode_layers, "decode", st.tp_degree, b, ctx) for st in stages]


def _encode_times(stages, table, ids, source) -> list[float]:
    b = _clamp(table, len(ids))
    ctx = float(source.input_len[ids].mean())
    return [stage_time(table, st.encode_layers, "encode", st.tp_degree, b, ctx) for st in stages]


def _kv_limit(stages, model: ModelSpec, cluster: ClusterSpec, config: ScheduleConfig, table, ctx):
    """Per-token KV budget: smallest (capacity - weights - activations) / per-token KV bytes over GPUs."""
    rep = memory_check(config, model, cluster, table, ctx)
    limit = math.inf
    by_gpu = {g.gpu: g for g in rep.per_gpu}
    for st in stages:
        dec_layers = sum(len(idx) for name, idx in st.layers if name == "decoder")
        per_token = kv_cache_bytes(model, dec_layers, 1, 1, st.tp_degree)
        if per_token <= 0:
            continue
        g = by_gpu[st.gpus[0]]
        limit = min(limit, (g.capacity - g.weights - g.activations) / per_token)
    return limit


def _finalize(source: QuerySource, n_tracked: int, policy: SimPolicy, batch_trace, mean_batch,
              busy: _Busy, span: float, enc_groups, dec_groups, adjustments) -> MeasuredStats:
    fin = source.finish[:source.next_id]
    done = np.isfinite(fin)
    warm = int(math.floor(policy.warmup_frac * n_tracked))
    tracked = np.arange(n_tracked)
    lat = (source.finish - source.admit)[tracked[warm:]]
    lat = lat[np.isfinite(lat)]
    if lat.size == 0:
        lat = np.array([np.nan])
    t_sorted = np.sort(fin[done])
    t_end = float(np.nanmax(source.finish[:n_tracked])) if np.any(np.isfinite(source.finish[:n_tracked])) else 0.0
    t_start = float(t_sorted[warm - 1]) if warm >= 1 and t_sorted.size >= warm else 0.0
    window = max(t_end - t_start, 1e-300)
    in_win = (fin > t_start) & (fin <= t_end) & done
    thr = float(in_win.sum()) / window
    tok = float(source.output_len[:source.next_id][in_win].sum()) / window
    ids = np.arange(source.next_id)
    rec = np.column_stack([ids, source.input_len[ids], source.output_len[ids],
                           source.admit[ids], source.finish[ids]])[:n_tracked]
    return MeasuredStats(
        throughput=thr, token_rate=tok,
        latency_p50=float(np.percentile(lat, 50)), latency_p99=float(np.percentile(lat, 99)),
        latency_max=float(np.max(lat)), mean_decode_batch=mean_batch, batch_trace=batch_trace,
        busy_fraction=busy.fractions(span), encode_spread=_spread_p99(enc_groups),
        decode_spread=_spread_p99(dec_groups), adjustments=adjustments, n_completed=int(done.sum()),
        window=(t_start, t_end), records=rec,
        details={"conservation": _conservation(source)})


def _conservation(source: QuerySource) -> dict:
    n = source.next_id
    admitted = np.isfinite(source.admit[:n])
    done = np.isfinite(source.finish[:n])
    emitted, out = source.emitted[:n], source.output_len[:n]
    return {"admitted": int(admitted.sum()), "completed": int(done.sum()),
            "in_flight": int((admitted & ~done).sum()),
            "emitted_match": bool(np.all(emitted[done] == out[done])),
            "emitted_within": bool(np.all(emitted <= out))}




def _warm_count(policy: SimPolicy, n_queries: int) -> int:
    return max(1, int(math.floor(policy.warmup_frac * n_queries)))


def _emit(src: QuerySource, active: np.ndarray, t: float, n_queries: int) -> tuple[np.ndarray, int]:
    """One token for every active query; finished ones leave the batch at ``t``."""
    src.emitted[active] += 1
    fin = src.emitted[active] >= src.output_len[active]
    if not fin.any():
        return active, 0
    done = active[fin]
    src.finish[done] = t
    return active[~fin], int(np.sum(done < n_queries))


def _tracked_done(src: QuerySource, n_queries: int) -> bool:
    return src.next_id >= n_queries and bool(np.all(np.isfinite(src.finish[:n_queries])))


def _micro_groups(ids: np.ndarray, n: int, lengths: np.ndarray) -> list[np.ndarray]:
    """Split an encode batch into ``n`` micro-batches of near-equal input tokens (greedy LPT)."""
    n = max(1, min(n, len(ids)))
    if n == 1:
        return [ids]
    order = np.argsort(-lengths[ids], kind="stable")
    load = [0] * n
    parts: list[list[int]] = [[] for _ in range(n)]
    for q in ids[order].tolist():
        j = min(range(n), key=lambda i: (load[i], len(parts[i])))
        parts[j].append(q)
        load[j] += int(lengths[q])
    return [np.asarray(sorted(p), dtype=np.int64) for p in parts if p]


# -- RRA ---------------------------------------------------------------------

def _run_rra(config, model, cluster, table, pe, pd, rng, n_queries, policy) -> MeasuredStats:
    src = QuerySource(pe, pd, rng)
    stages = config.stages
    P = len(stages)
    mean_in = mean_length(pe)
    busy = _Busy(P)
    enc_groups, dec_groups = defaultdict(list), defaultdict(list)
    batch_trace, phase_batches = [], []
    kv_limit = math.inf
    if policy.check_memory and cluster is not None:
        kv_limit = _kv_limit(stages, model, cluster, config, table, (pe.max_len, pd.max_len))
    active = np.empty(0, dtype=np.int64)
    t = 0.0
    adjustments = 0
    n_warm = _warm_count(policy, n_queries)
    warm_t = None
    n_done = 0
    max_phases = 100 * (n_queries + 10) * (pd.max_len // config.n_d + 1)

    for _ in range(max_phases):
        if _tracked_done(src, n_queries):
            break
        b = config.b_e
        if policy.dynamic_adjust:
            b2 = adjust_encoder_batch(config.b_e, config.b_d, active.size + config.b_e, policy.threshold,
                                      min_batch=0 if active.size else 1)
            if b2 != b:
                adjustments += 1
                b = b2
        new = src.take(b)
        if policy.dynamic_adjust and new:
            fitted = fit_encode_workload(new, src, b * mean_in, policy.threshold)
            if len(fitted) != len(new):
                adjustments += 1
            new = fitted
        new = np.asarray(new, dtype=np.int64)
        if new.size:
            # decode batch already over target: the phase runs without an encode pass
            src.admit[new] = t
            groups = _micro_groups(new, P, src.input_len)
            times = np.array([_encode_times(stages, table, g, src) for g in groups])
            _, ends = kernels.flow_shop(times, np.full(len(groups), t), np.full(P, t))
            busy.t += times.sum(axis=0)
            if warm_t is not None:
                for j, row in enumerate(times):
                    enc_groups[j].append(float(row.sum()))
            t = float(ends.max())
        active = np.concatenate([active, new])
        phase_batches.append((t, active.size))
        for u in range(1, config.n_d + 1):
            if active.size == 0:
                break
            ctx_tokens = src.input_len[active] + src.emitted[active]
            if ctx_tokens.sum() > kv_limit:
                raise InfeasibleError(f"KV cache overflow at t={t:.6g}s ({int(ctx_tokens.sum())} tokens)")
            dts = _decode_time(stages, table, active.size, float(ctx_tokens.mean()))
            busy.t += dts
            dt = float(sum(dts))
            if warm_t is not None:
                dec_groups[u].append(dt)
            batch_trace.append(active.size)
            t += dt
            active, k = _emit(src, active, t, n_queries)
            n_done += k
            if warm_t is None and n_done >= n_warm:
                warm_t = t
    else:
        raise SimulationError("RRA simulation exceeded its phase budget", {"t": t, "active": int(active.size)})
    steady = [b for ts, b in phase_batches if warm_t is not None and ts >= warm_t] or [b for _, b in phase_batches]
    stats = _finalize(src, n_queries, policy, batch_trace, float(np.mean(steady)), busy, t,
                      enc_groups, dec_groups, adjustments)
    stats.details |= {"phases": len(phase_batches), "steady_phases": len(steady), "phase_batches": steady}
    return stats


# -- WAA ---------------------------------------------------------------------

_ENC_DONE, _MB_DONE, _MB_READY = 0, 1, 2


def _run_waa(config, model, cluster, table, pe, pd, rng, n_queries, policy) -> MeasuredStats:
    src = QuerySource(pe, pd, rng)
    enc_stages, dec_stages = config.encode_stages, config.decode_stages
    Pe, Pd = len(enc_stages), len(dec_stages)
    M = config.n_micro
    mean_in = mean_length(pe)
    busy = _Busy(Pe + Pd)
    enc_groups, dec_groups = defaultdict(list), defaultdict(list)
    batch_trace: list[float] = []
    kv_limit = math.inf
    if policy.check_memory and cluster is not None:
        kv_limit = _kv_limit(dec_stages, model, cluster, config, table, (pe.max_len, pd.max_len))

    mbs = [np.empty(0, dtype=np.int64) for _ in range(M)]
    buffers: list[list[int]] = [[] for _ in range(M)]
    running = [False] * M
    enc_free = np.zeros(Pe)
    dec_free = [0.0] * Pd
    in_flight: list[int] = []       # sizes of encoder batches not yet handed over
    heap: list = []
    seq = 0
    t = 0.0
    adjustments = 0
    round_starts = 0
    owed = 0
    surplus = 0     # queries admitted beyond the requested counts by workload fitting
    n_warm = _warm_count(policy, n_queries)
    warm_t = None
    n_done = 0
    resident_samples: list[tuple[float, int]] = []
    trace: deque = deque(maxlen=50)

    def push(time, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (time, kind, seq, payload))
        seq += 1

    def resident() -> int:
        return sum(m.size for m in mbs) + sum(len(b) for b in buffers)

    def request(now: float) -> None:
        nonlocal adjustments, owed, surplus
        if len(in_flight) > Pe:
            owed += 1   # encoder saturated: serve the request once a batch leaves it
            return
        b = config.b_e
        if policy.dynamic_adjust:
            extra = sum(s - config.b_e for s in in_flight)
            b2 = adjust_encoder_batch(config.b_e, config.b_d, resident() + extra, policy.threshold, min_batch=0)
            if b2 > b and len(in_flight) >= Pe:
                b2 = b      # encoder pipeline already full: a larger batch only delays the queue
            if b2 != b:
                adjustments += 1
                b = b2
            want = b
            b = max(0, b - surplus)
            surplus -= want - b
            if b == 0:
                return      # decode side over target: skip this encoder batch
        ids = src.take(b)
        if policy.dynamic_adjust:
            fitted = fit_encode_workload(ids, src, b * mean_in, policy.threshold)
            if len(fitted) != len(ids):
                adjustments += 1
            surplus += len(fitted) - len(ids)
            ids = fitted
        ids = np.asarray(ids, dtype=np.int64)
        times = np.array([_encode_times(enc_stages, table, ids, src)])
        starts, ends = kernels.flow_shop(times, np.array([now]), enc_free)
        src.admit[ids] = starts[0, 0]
        busy.t[:Pe] += times[0]
        if warm_t is not None:
            enc_groups[0].append(float(times[0].sum()))
        in_flight.append(ids.size)
        push(float(ends[0, -1]), _ENC_DONE, ids)

    def start_round(m: int, now: float) -> None:
        nonlocal round_starts
        if buffers[m]:
            mbs[m] = np.concatenate([mbs[m], np.asarray(buffers[m], dtype=np.int64)])
            buffers[m] = []
        if mbs[m].size == 0:
            running[m] = False
            return
        running[m] = True
        round_starts += 1
        if round_starts % M == 0 or M == 1:
            request(now)
        ids = mbs[m]
        ctx_tokens = src.input_len[ids] + src.emitted[ids]
        if m == 0:
            total_ctx = sum(int((src.input_len[x] + src.emitted[x]).sum()) for x in mbs)
            if total_ctx > kv_limit:
                raise InfeasibleError(f"KV cache overflow at t={now:.6g}s ({total_ctx} tokens)")
            resident_samples.append((now, resident()))
        dts = _decode_time(dec_stages, table, ids.size, float(ctx_tokens.mean()))
        ready = now
        for k, dt in enumerate(dts):
            s = max(ready, dec_free[k])
            dec_free[k] = s + dt
            ready = s + dt
        busy.t[Pe:] += dts
        if warm_t is not None:
            dec_groups[0].append(float(sum(dts)))
        batch_trace.append(ids.size)
        push(ready, _MB_DONE, m)

    def assign(ids: np.ndarray) -> None:
        # least-loaded micro-batch first keeps micro-batch sizes level
        for q in ids.tolist():
            loads = [mbs[j].size + len(buffers[j]) for j in range(M)]
            buffers[int(np.argmin(loads))].append(q)

    push(0.0, _MB_READY, None)
    max_events = 200 * (n_queries + 10) * (pd.max_len + 1)
    for _ in range(max_events):
        if _tracked_done(src, n_queries):
            break
        if not heap:
            raise SimulationError("deadlock: no runnable event with unfinished queries", list(trace))
        t, kind, _, payload = heapq.heappop(heap)
        trace.append((t, kind))
        if kind == _ENC_DONE:
            in_flight.pop(0)
            if owed:
                owed -= 1
                request(t)
            assign(payload)
            for m in range(M):
                if not running[m] and buffers[m]:
                    start_round(m, t)
        elif kind == _MB_DONE:
            m = payload
            mbs[m], k = _emit(src, mbs[m], t, n_queries)
            n_done += k
            if warm_t is None and n_done >= n_warm:
                warm_t = t
            start_round(m, t)
        if not any(running) and not in_flight:
            # nothing decoding and nothing encoding: pull work so the pipeline cannot stall
            request(t)
    else:
        raise SimulationError("WAA simulation exceeded its event budget", list(trace))

    steady = [r for ts, r in resident_samples if warm_t is not None and ts >= warm_t] or [r for _, r in resident_samples]
    stats = _finalize(src, n_queries, policy, batch_trace, float(np.mean(steady)) if steady else 0.0,
                      busy, t, enc_groups, dec_groups, adjustments)
    stats.details |= {"rounds": round_starts}
    return stats


def run_event_sim(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec | None, table: ProfileTable,
                  pe: LengthPMF, pd: LengthPMF, seed: int = 42, n_queries: int = 2000,
                  policy: SimPolicy | None = None) -> MeasuredStats:
    """Execute ``config`` query by query. Deterministic for a given seed."""
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    policy = policy or SimPolicy()
    rng = np.random.default_rng(seed)
    if config.is_rra:
        return _run_rra(config, model, cluster, table, pe, pd, rng, n_queries, policy)
    return _run_waa(config, model, cluster, table, pe, pd, rng, n_queries, policy)


# -- baselines ---------------------------------------------------------------

def ft_layout(model: ModelSpec, cluster: ClusterSpec, table: ProfileTable) -> tuple[Stage, ...]:
    """Tensor parallel within a node (largest profiled degree that fits), pipeline across the rest."""
    tp = max(d for d in table.tp_degrees if d <= min(cluster.gpus_per_node, cluster.n_gpus)
             and cluster.n_gpus % d == 0)
    return rra_stages(model, cluster.n_gpus, PartialTpSpec(tp, cluster.n_gpus if tp > 1 else 0))


def ft_batch_latency(stages, table: ProfileTable, batch: int, mean_in: float, n_tokens: int) -> float:
    """Encode plus ``n_tokens`` full-batch decode iterations (dead slots included)."""
    P = len(stages)
    n_mb = max(1, min(P, batch))
    times = np.tile([stage_time(table, st.encode_layers, "encode", st.tp_degree, _clamp(table, batch / n_mb), mean_in)
                     for st in stages], (n_mb, 1))
    _, ends = kernels.flow_shop(times, np.zeros(n_mb), np.zeros(P))
    t = float(ends.max())
    for u in range(n_tokens):
        t += sum(_decode_time(stages, table, batch, mean_in + u))
    return t


def ft_latency_sweep(model: ModelSpec, cluster: ClusterSpec, table: ProfileTable, pe: LengthPMF, pd: LengthPMF,
                     batches=None) -> list[tuple[int, float]]:
    """Max-output-length latency of the FT baseline for a sweep of fixed batch sizes."""
    stages = ft_layout(model, cluster, table)
    if batches is None:
        batches = list(range(4, int(table.max_batch) + 1, 4))
    out = []
    for b in batches:
        cfg = ScheduleConfig("RRA", b, b, n_d=pd.max_len, stages=stages)
        rep = memory_check(cfg, model, cluster, table, (pe.max_len, pd.max_len))
        if not rep.fits:
            break
        out.append((b, ft_batch_latency(stages, table, b, mean_length(pe), pd.max_len)))
    return out


def derive_latency_bounds(model, cluster, table, pe, pd, percentiles=(10, 30, 70)) -> list[float]:
    """Latency bounds from the FT batch sweep: the given latency percentiles, then infinity."""
    lats = [lat for _, lat in ft_latency_sweep(model, cluster, table, pe, pd)]
    if not lats:
        raise InfeasibleError("no FT batch size fits in memory")
    return [float(np.percentile(lats, p)) for p in percentiles] + [math.inf]


def ft_batch_for_bound(model, cluster, table, pe, pd, bound: float) -> int | None:
    best = None
    for b, lat in ft_latency_sweep(model, cluster, table, pe, pd):
        if lat <= bound:
            best = b
    return best


def run_ft_baseline(model: ModelSpec, cluster: ClusterSpec, table: ProfileTable, pe: LengthPMF, pd: LengthPMF,
                    batch: int, seed: int = 42, n_queries: int = 2000,
                    policy: SimPolicy | None = None) -> MeasuredStats:
    """Static batches decoded until their longest query finishes; every slot pays every iteration."""
    policy = policy or SimPolicy(dynamic_adjust=False)
    rng = np.random.default_rng(seed)
    src = QuerySource(pe, pd, rng)
    stages = ft_layout(model, cluster, table)
    P = len(stages)
    busy = _Busy(P)
    dec_groups = defaultdict(list)
    trace: list[float] = []
    t = 0.0
    while not _tracked_done(src, n_queries):
        ids = np.asarray(src.take(batch), dtype=np.int64)
        src.admit[ids] = t
        groups = _micro_groups(ids, P, src.input_len)
        times = np.array([_encode_times(stages, table, g, src) for g in groups])
        _, ends = kernels.flow_shop(times, np.full(len(groups), t), np.full(P, t))
        busy.t += times.sum(axis=0)
        t = float(ends.max())
        mean_in = float(src.input_len[ids].mean())
        for u in range(int(src.output_len[ids].max())):
            dts = _decode_time(stages, table, batch, mean_in + u)
            busy.t += dts
            dec_groups[u].append(float(sum(dts)))
            t += float(sum(dts))
            trace.append(batch)
        src.emitted[ids] = src.output_len[ids]
        src.finish[ids] = t
    return _finalize(src, n_queries, policy, trace, float(batch), busy, t, {}, dec_groups, 0)


def run_iterlevel_baseline(model: ModelSpec, cluster: ClusterSpec, table: ProfileTable, pe: LengthPMF,
                           pd: LengthPMF, max_batch: int, seed: int = 42, n_queries: int = 2000,
                           max_admit_per_iter: int = 1, policy: SimPolicy | None = None) -> MeasuredStats:
    """Iteration-level batching: each iteration may encode new queries alongside the running decodes.

    The run starts from a full batch; with ``max_admit_per_iter=0`` it only drains.
    """
    policy = policy or SimPolicy(dynamic_adjust=False)
    rng = np.random.default_rng(seed)
    src = QuerySource(pe, pd, rng)
    stages = ft_layout(model, cluster, table)
    P = len(stages)
    busy = _Busy(P)
    trace: list[float] = []
    dec_groups = defaultdict(list)
    active = np.asarray(src.take(max_batch), dtype=np.int64)
    src.admit[active] = 0.0
    times = np.array([_encode_times(stages, table, g, src) for g in _micro_groups(active, P, src.input_len)])
    _, ends = kernels.flow_shop(times, np.zeros(len(times)), np.zeros(P))
    busy.t += times.sum(axis=0)
    t = float(ends.max())
    while not _tracked_done(src, n_queries):
        admit = min(max_admit_per_iter, max_batch - active.size)
        enc = np.zeros(P)
        new = np.empty(0, dtype=np.int64)
        if admit > 0:
            new = np.asarray(src.take(admit), dtype=np.int64)
            src.admit[new] = t
            enc = np.array(_encode_times(stages, table, new, src))
        if active.size == 0 and new.size == 0:
            break
        dts = np.zeros(P)
        if active.size:
            ctx = float((src.input_len[active] + src.emitted[active]).mean())
            dts = np.array(_decode_time(stages, table, active.size, ctx))
        it = enc + dts
        busy.t += it
        dec_groups[0].append(float(it.sum()))
        trace.append(active.size)
        t += float(it.sum())
        if active.size:
            active, _ = _emit(src, active, t, n_queries)
        active = np.concatenate([active, new])
    return _finalize(src, n_queries, policy, trace, float(np.mean(trace)) if trace else 0.0, busy, t,
                     {}, dec_groups, 0)
