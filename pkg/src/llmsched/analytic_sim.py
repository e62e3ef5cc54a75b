"""Expected-value execution timelines for RRA and WAA schedules.

Both simulators work on steady-state averages: per-iteration decode batches
follow from the completion distribution, per-query context from the
length-biased age distribution of queries resident in the decode batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .cost_model import ProfileTable, stage_time
from .schedule_core import (InfeasibleError, ScheduleConfig, Stage, memory_check,
                            rra_completion_fraction)
from .seqdist import (LengthPMF, PhaseCompletionPMF, completion_distribution, mean_length,
                      percentile_length, resident_pmf)
from .specs import ClusterSpec, ModelSpec

EMPTY_BATCH = 1e-9


@dataclass(frozen=True)
class Interval:
    gpu: int
    start: float
    end: float
    phase: str
    batch: float
    tag: str


@dataclass
class Estimate:
    throughput: float            # sequences / s
    latency: float               # s, for the target-length query
    target_len: int
    timeline: list[Interval] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def token_rate(self) -> float:
        return self.details.get("token_rate", float("nan"))

    def to_dict(self, with_timeline: bool = False) -> dict:
        d = {"throughput": self.throughput, "latency": self.latency, "target_len": self.target_len,
             "token_rate": self.token_rate, "details": self.details}
        if with_timeline:
            d["timeline"] = [vars(iv) for iv in self.timeline]
        return d


@dataclass(frozen=True)
class IterationPlan:
    """Expected decode workload per iteration ``u = 1..n_d`` of one RRA phase."""

    batches: np.ndarray          # b_u
    context: np.ndarray          # mean context tokens of an active query at u
    encode_workload: float       # b_e * mean input length (tokens)

    @property
    def n_d(self) -> int:
        return len(self.batches)

    @property
    def context_tokens(self) -> np.ndarray:
        return self.batches * self.context


def mean_active_age(pd: LengthPMF, n_d: int) -> np.ndarray:
    """E[tokens already emitted | active at iteration u] for u = 1..n_d.

    Each query of length S contributes one observation per phase it spans,
    with phase index j in 1..ceil(S/n_d); it is active at iteration u of phase
    j iff ``(j-1) n_d + u <= S`` and has then emitted ``(j-1) n_d + u - 1``.
    """
    S = pd.lengths.astype(float)[:, None]
    w = pd.weights[:, None]
    u = np.arange(1, n_d + 1, dtype=float)[None, :]
    K = np.ceil(S / n_d)
    c = np.where(S >= u, np.minimum(K, np.floor((S - u) / n_d) + 1), 0.0)   # active phases
    age_sum = n_d * c * (c - 1) / 2 + c * (u - 1)
    num = (w * age_sum).sum(axis=0)
    den = (w * c).sum(axis=0)
    return np.divide(num, den, out=np.zeros(n_d), where=den > 0)


def plan_rra_iterations(b_d: float, pc: PhaseCompletionPMF, pd: LengthPMF, pe: LengthPMF,
                        b_e: float | None = None) -> IterationPlan:
    done_before = np.concatenate(([0.0], np.cumsum(pc.as_array())[:-1]))
    batches = b_d * np.clip(1.0 - done_before, 0.0, 1.0)
    ctx = mean_length(pe) + mean_active_age(pd, pc.n_d)
    if b_e is None:
        b_e = b_d * float(pc.as_array().sum())
    return IterationPlan(batches, ctx, b_e * mean_length(pe))


def waa_mean_context(pe: LengthPMF, pd: LengthPMF) -> float:
    """Mean context of a decode-batch resident: input plus length-biased age."""
    s = pd.lengths.astype(float)
    mean_age = float(np.dot(pd.weights, s * (s - 1) / 2) / np.dot(pd.weights, s))
    return mean_length(pe) + mean_age


def _clamp_batch(table: ProfileTable, b: float) -> float:
    return min(max(b, 1.0), table.max_batch)


def _stage_intervals(stage: Stage, start: float, end: float, phase: str, batch: float, tag: str):
    return [Interval(g, start, end, phase, batch, tag) for g in stage.gpus]


def _check_memory(config, model, cluster, table, pe, pd):
    if cluster is None:
        return
    rep = memory_check(config, model, cluster, table, (pe.max_len, pd.max_len))
    if not rep.fits:
        raise InfeasibleError(f"schedule exceeds GPU memory on GPUs {rep.violations}", rep)


# -- RRA ---------------------------------------------------------------------

def rra_encode_times(config: ScheduleConfig, table: ProfileTable, b_e: float, mean_in: float) -> np.ndarray:
    """Stage times of each encode micro-batch; ``min(stages, b_e)`` equal micro-batches."""
    stages = config.stages
    m = max(1, min(len(stages), int(round(b_e))))
    mb = b_e / m
    row = [stage_time(table, st.encode_layers, "encode", st.tp_degree, _clamp_batch(table, mb), mean_in)
           for st in stages]
    return np.tile(row, (m, 1))


def rra_iteration_time(config: ScheduleConfig, table: ProfileTable, batch: float, context: float) -> float:
    if batch <= EMPTY_BATCH:
        return 0.0
    b = _clamp_batch(table, batch)
    return sum(stage_time(table, st.decode_layers, "decode", st.tp_degree, b, context) for st in config.stages)


def simulate_rra(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec | None, table: ProfileTable,
                 pe: LengthPMF, pd: LengthPMF, target_len: int | None = None,
                 with_timeline: bool = False) -> Estimate:
    if not config.is_rra:
        raise ValueError("simulate_rra needs an RRA schedule")
    _check_memory(config, model, cluster, table, pe, pd)
    if target_len is None:
        target_len = percentile_length(pd, 99)
    n_d = config.n_d
    f = rra_completion_fraction(pd, n_d)
    b_eff = config.b_e / f
    pc = completion_distribution(resident_pmf(pd, n_d), n_d)
    plan = plan_rra_iterations(b_eff, pc, pd, pe, b_e=config.b_e)
    mean_in = mean_length(pe)

    enc = rra_encode_times(config, table, config.b_e, mean_in)
    starts, ends = kernels.flow_shop(enc, np.zeros(enc.shape[0]), np.zeros(enc.shape[1]))
    enc_span = float(ends.max())
    iters = np.array([rra_iteration_time(config, table, b, c) for b, c in zip(plan.batches, plan.context)])
    cycle = enc_span + float(iters.sum())
    throughput = config.b_e / cycle

    est = Estimate(throughput, rra_latency(enc_span, iters, cycle, target_len), target_len, details={
        "strategy": "RRA", "cycle": cycle, "encode_span": enc_span, "iteration_times": iters.tolist(),
        "iteration_batches": plan.batches.tolist(), "iteration_context": plan.context.tolist(),
        "completion_fraction": f, "effective_decode_batch": b_eff,
        "token_rate": throughput * mean_length(pd),
    })
    if with_timeline:
        tl: list[Interval] = []
        n_mb = enc.shape[0]
        for j in range(n_mb):
            for k, st in enumerate(config.stages):
                tl += _stage_intervals(st, starts[j, k], ends[j, k], "encode", config.b_e / n_mb, f"enc{j}")
        t = enc_span
        for u, (b, c) in enumerate(zip(plan.batches, plan.context), 1):
            if b <= EMPTY_BATCH:
                continue
            for st in config.stages:
                dt = stage_time(table, st.decode_layers, "decode", st.tp_degree, _clamp_batch(table, b), c)
                tl += _stage_intervals(st, t, t + dt, "decode", b, f"it{u}")
                t += dt
        est.timeline = tl
    return est


def rra_latency(enc_span: float, iters: np.ndarray, cycle: float, s: int) -> float:
    """A length-``s`` query admitted at a phase start: full cycles, then encode and ``r`` iterations."""
    if s < 1:
        raise ValueError("target length must be >= 1")
    n_d = len(iters)
    k = math.ceil(s / n_d)
    r = s - (k - 1) * n_d
    return (k - 1) * cycle + enc_span + float(np.sum(iters[:r]))


# -- WAA ---------------------------------------------------------------------

def waa_encode_times(config: ScheduleConfig, table: ProfileTable, b_e: float, mean_in: float) -> np.ndarray:
    return np.array([stage_time(table, st.encode_layers, "encode", st.tp_degree, _clamp_batch(table, b_e), mean_in)
                     for st in config.encode_stages])


def waa_decode_times(config: ScheduleConfig, table: ProfileTable, b_d: float, context: float,
                     n_micro: int | None = None) -> np.ndarray:
    """(M, stages) decode stage times with ``b_d`` split evenly over ``M`` micro-batches."""
    m = n_micro or config.n_micro
    b = _clamp_batch(table, b_d / m)
    row = [stage_time(table, st.decode_layers, "decode", st.tp_degree, b, context) for st in config.decode_stages]
    return np.tile(row, (m, 1))


def cyclic_period(times: np.ndarray, n_rounds: int = 4) -> float:
    """Steady-state spacing of rounds for micro-batches cycling through the pipeline."""
    _, ends = kernels.cyclic_pipeline(times, n_rounds, 0.0)
    return float(ends[-1, -1, -1] - ends[-2, -1, -1])


def waa_token_makespan(config: ScheduleConfig, table: ProfileTable, pe: LengthPMF, n_tokens: int,
                       b_d: float | None = None, context: float | None = None) -> float:
    """Time from encode start until every micro-batch has produced ``n_tokens`` tokens."""
    mean_in = mean_length(pe)
    enc = waa_encode_times(config, table, config.b_e, mean_in)
    dec = waa_decode_times(config, table, b_d if b_d is not None else config.b_d,
                           context if context is not None else mean_in)
    _, ends = kernels.cyclic_pipeline(dec, n_tokens, float(enc.sum()))
    return float(ends[-1, -1, -1])


def simulate_waa(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec | None, table: ProfileTable,
                 pe: LengthPMF, pd: LengthPMF, target_len: int | None = None,
                 with_timeline: bool = False) -> Estimate:
    if config.is_rra:
        raise ValueError("simulate_waa needs a WAA schedule")
    if not config.encode_stages or not config.decode_stages:
        raise InfeasibleError("WAA needs at least one encode and one decode stage")
    _check_memory(config, model, cluster, table, pe, pd)
    if target_len is None:
        target_len = percentile_length(pd, 99)
    mean_in = mean_length(pe)
    ctx = waa_mean_context(pe, pd)
    enc = waa_encode_times(config, table, config.b_e, mean_in)
    enc_bottleneck = float(enc.max())

    resident = float(config.b_d)
    dec = waa_decode_times(config, table, resident, ctx)
    period = cyclic_period(dec)
    encoder_bound = enc_bottleneck > period
    if encoder_bound:
        # encoder cannot supply b_e per round: the decode batch settles where
        # rounds are faster, with resident = b_e * E[S] * period / enc_bottleneck
        for _ in range(50):
            resident_new = config.b_d * period / enc_bottleneck
            dec = waa_decode_times(config, table, resident_new, ctx)
            new_period = cyclic_period(dec)
            if abs(new_period - period) <= 1e-12 * period:
                break
            period, resident = new_period, resident_new
        throughput = config.b_e / enc_bottleneck
    else:
        throughput = config.b_e / period

    latency = float(enc.sum()) + period + target_len * period
    est = Estimate(throughput, latency, target_len, details={
        "strategy": config.strategy, "period": period, "encode_times": enc.tolist(),
        "encode_bottleneck": enc_bottleneck, "encoder_bound": encoder_bound,
        "decode_stage_times": dec[0].tolist(), "resident_batch": resident, "mean_context": ctx,
        "token_rate": throughput * mean_length(pd),
    })
    if with_timeline:
        est.timeline = _waa_timeline(config, enc, dec, rounds=2)
    return est


def _waa_timeline(config: ScheduleConfig, enc: np.ndarray, dec: np.ndarray, rounds: int) -> list[Interval]:
    tl: list[Interval] = []
    t = 0.0
    for st, dt in zip(config.encode_stages, enc):
        tl += _stage_intervals(st, t, t + dt, "encode", config.b_e, "enc")
        t += dt
    starts, ends = kernels.cyclic_pipeline(dec, rounds, t)
    m = dec.shape[0]
    for r in range(rounds):
        for j in range(m):
            for k, st in enumerate(config.decode_stages):
                tl += _stage_intervals(st, starts[r, j, k], ends[r, j, k], "decode", config.b_d / m, f"r{r}mb{j}")
    return tl


# -- dispatch ----------------------------------------------------------------

def simulate(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec | None, table: ProfileTable,
             pe: LengthPMF, pd: LengthPMF, target_len: int | None = None, with_timeline: bool = False) -> Estimate:
    fn = simulate_rra if config.is_rra else simulate_waa
    return fn(config, model, cluster, table, pe, pd, target_len, with_timeline)


def latency_for_length(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec | None,
                       table: ProfileTable, pe: LengthPMF, pd: LengthPMF, s_target: int) -> float:
    if s_target < 1:
        raise ValueError("s_target must be >= 1")
    est = simulate(config, model, cluster, table, pe, pd, target_len=s_target)
    return est.latency
