"""Branch-and-bound search for the highest-throughput schedule under a latency bound.

Variables live on integer grids. For every variable the search needs to know
which way throughput grows and which way latency grows; from those it reads
off, for any axis-aligned block, the corner with the highest throughput
(``upp``, an upper bound on throughput inside the block) and the corner with
the lowest latency (``lowr``, a lower bound on latency inside the block).
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .analytic_sim import Estimate, simulate
from .cost_model import ProfileTable
from .schedule_core import (InfeasibleError, PartialTpSpec, ScheduleConfig, make_rra_config,
                            make_waa_config, memory_check)
from .seqdist import LengthPMF, percentile_length
from .specs import ClusterSpec, ModelSpec

MAX_EXHAUSTIVE_POINTS = 1_000_000


@dataclass(frozen=True)
class Perf:
    latency: float
    thrput: float
    config: tuple = ()           # variable values (not indices)
    payload: object = field(default=None, compare=False, repr=False)


class InfeasibleBoundError(InfeasibleError):
    """No grid point meets the latency bound; ``perf`` is the lowest-latency corner."""

    def __init__(self, message: str, perf: Perf | None = None, detail=None):
        super().__init__(message, detail)
        self.perf = perf


@dataclass
class SearchSpec:
    grids: Sequence[Sequence[float]]
    latency_bound: float
    names: Sequence[str] = ()
    thr_dirs: Sequence[int] = ()     # +1: throughput grows with the value, -1: shrinks
    lat_dirs: Sequence[int] = ()     # same for latency
    eps_t: float | None = None       # absolute throughput tolerance; None -> 2% of incumbent
    eps_l: float | None = None       # absolute latency tolerance; None -> 2% of the bound

    def __post_init__(self):
        self.grids = [list(g) for g in self.grids]
        n = len(self.grids)
        if n == 0 or any(len(g) == 0 for g in self.grids):
            raise ValueError("every variable needs a non-empty grid")
        for g in self.grids:
            if any(b <= a for a, b in zip(g, g[1:])):
                raise ValueError("grids must be strictly increasing")
        self.names = list(self.names) or [f"x{i}" for i in range(n)]
        self.thr_dirs = list(self.thr_dirs) or [1] * n
        self.lat_dirs = list(self.lat_dirs) or list(self.thr_dirs)
        if not (len(self.names) == len(self.thr_dirs) == len(self.lat_dirs) == n):
            raise ValueError("names/directions must match the number of grids")
        if (self.eps_t is not None and self.eps_t < 0) or (self.eps_l is not None and self.eps_l < 0):
            raise ValueError("tolerances must be >= 0")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.grids)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    def values(self, idx: Sequence[int]) -> tuple:
        return tuple(self.grids[i][k] for i, k in enumerate(idx))

    def latency_tolerance(self) -> float:
        if self.eps_l is not None:
            return self.eps_l
        return 0.0 if math.isinf(self.latency_bound) else 0.02 * self.latency_bound

    def throughput_tolerance(self, incumbent: float) -> float:
        if self.eps_t is not None:
            return self.eps_t
        return 0.02 * incumbent if incumbent > 0 and math.isfinite(incumbent) else 0.0


@dataclass(frozen=True)
class Block:
    lo: tuple[int, ...]
    hi: tuple[int, ...]
    lowr: Perf | None = None
    upp: Perf | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def volume(self) -> int:
        return int(np.prod(self.dims))

    @property
    def is_point(self) -> bool:
        return self.lo == self.hi


@dataclass
class SearchResult:
    best: Perf
    evaluations: int
    grid_points: int
    trace: list = field(default_factory=list)
    pruned: list = field(default_factory=list)    # (lo, hi, reason, incumbent throughput)


class _Evaluator:
    """Memoizing wrapper that records the evaluation order."""

    def __init__(self, spec: SearchSpec, fn: Callable[[tuple], Perf]):
        self.spec, self.fn = spec, fn
        self.cache: dict[tuple, Perf] = {}
        self.order: list[tuple] = []

    def __call__(self, idx: tuple[int, ...]) -> Perf:
        if idx not in self.cache:
            vals = self.spec.values(idx)
            p = self.fn(vals)
            if not isinstance(p, Perf):
                lat, thr = p
                p = Perf(float(lat), float(thr), vals)
            elif p.config != vals:
                p = Perf(p.latency, p.thrput, vals, p.payload)
            self.cache[idx] = p
            self.order.append(idx)
        return self.cache[idx]


def _upp_corner(spec: SearchSpec, lo, hi) -> tuple[int, ...]:
    return tuple(h if d > 0 else l for l, h, d in zip(lo, hi, spec.thr_dirs))


def _lowr_corner(spec: SearchSpec, lo, hi) -> tuple[int, ...]:
    return tuple(l if d > 0 else h for l, h, d in zip(lo, hi, spec.lat_dirs))


def _with_bounds(spec: SearchSpec, ev: _Evaluator, lo, hi) -> Block:
    return Block(tuple(lo), tuple(hi), ev(_lowr_corner(spec, lo, hi)), ev(_upp_corner(spec, lo, hi)))


def _better(a: Perf, b: Perf | None) -> bool:
    if b is None:
        return True
    return a.thrput > b.thrput or (a.thrput == b.thrput and a.latency < b.latency)


def split_block(block: Block, spec: SearchSpec, perf_fn: Callable[[tuple[int, ...]], Perf],
                latency_bound: float | None = None) -> tuple[list[Block], list[Perf]]:
    """Split a block in two along one axis.

    For each axis ``i`` the probe corner is the throughput corner with axis
    ``i`` moved to its low-throughput end. The block is cut across the axis
    whose probe is the best feasible point; when no probe is feasible it is
    cut across its longest axis (ties go to the first axis). Returns the two
    children (without bounds) and the probe results, which the caller may use
    to update its incumbent. A single-point block is returned unchanged.
    """
    if block.is_point:
        return [block], []
    lb = spec.latency_bound if latency_bound is None else latency_bound
    upp = _upp_corner(spec, block.lo, block.hi)
    dims = block.dims
    probes: list[Perf] = []
    best_axis, best_perf = None, None
    for i in range(len(dims)):
        if dims[i] < 2:
            continue
        corner = list(upp)
        corner[i] = block.lo[i] if spec.thr_dirs[i] > 0 else block.hi[i]
        p = perf_fn(tuple(corner))
        probes.append(p)
        if p.latency < lb and (best_perf is None or p.thrput > best_perf.thrput):
            best_axis, best_perf = i, p
    if best_axis is None:
        longest = max(dims)
        best_axis = next(i for i, d in enumerate(dims) if d == longest)
    mid = (block.lo[best_axis] + block.hi[best_axis]) // 2
    hi1 = list(block.hi)
    hi1[best_axis] = mid
    lo2 = list(block.lo)
    lo2[best_axis] = mid + 1
    return [Block(block.lo, tuple(hi1)), Block(tuple(lo2), block.hi)], probes


def branch_and_bound(spec: SearchSpec, perf_fn: Callable[[tuple], Perf | tuple[float, float]],
                     incumbent: Perf | None = None) -> SearchResult:
    """Maximize throughput subject to ``latency < spec.latency_bound``.

    ``perf_fn`` takes a tuple of variable values. ``incumbent`` optionally
    seeds the search with a known feasible point (for example the answer at
    a tighter bound); it is returned unless something better is found.
    """
    ev = _Evaluator(spec, perf_fn)
    lb = spec.latency_bound
    eps_l = spec.latency_tolerance()
    lo0 = tuple(0 for _ in spec.grids)
    hi0 = tuple(n - 1 for n in spec.shape)
    best: Perf | None = incumbent if incumbent is not None and incumbent.latency < lb else None

    def consider(p: Perf) -> None:
        nonlocal best
        if p.latency < lb and _better(p, best):
            best = p

    # shortcut: the throughput corner of the whole space already meets the bound
    top = ev(_upp_corner(spec, lo0, hi0))
    consider(top)
    if top.latency < lb:
        return SearchResult(best, len(ev.order), spec.n_points, list(ev.order))

    root = _with_bounds(spec, ev, lo0, hi0)
    consider(root.lowr)
    if root.lowr.latency >= lb + eps_l:
        raise InfeasibleBoundError(
            f"lowest achievable latency {root.lowr.latency:.6g}s does not meet bound {lb:.6g}s", root.lowr)

    counter = itertools.count()
    queue: list = []
    pruned: list = []

    def push(b: Block) -> None:
        heapq.heappush(queue, (-b.lowr.thrput, -b.volume, next(counter), b))

    push(root)
    while queue:
        _, _, _, blk = heapq.heappop(queue)
        t_star = best.thrput if best is not None else -math.inf
        if blk.upp.thrput + spec.throughput_tolerance(t_star) < t_star:
            pruned.append((blk.lo, blk.hi, "throughput", t_star))
            continue
        children, probes = split_block(blk, spec, ev, lb)
        for p in probes:
            consider(p)
        for c in children:
            if c is blk:
                continue
            c = _with_bounds(spec, ev, c.lo, c.hi)
            consider(c.lowr)
            consider(c.upp)
            if c.lowr.latency >= lb + eps_l:
                pruned.append((c.lo, c.hi, "latency", None))
                continue            # nothing inside can meet the bound
            if c.upp.latency < lb or c.is_point:
                continue            # resolved: its best point is already an incumbent candidate
            t_star = best.thrput if best is not None else -math.inf
            if c.upp.thrput + spec.throughput_tolerance(t_star) < t_star:
                pruned.append((c.lo, c.hi, "throughput", t_star))
                continue
            push(c)

    if best is None:
        raise InfeasibleBoundError("no evaluated point meets the latency bound", root.lowr)
    return SearchResult(best, len(ev.order), spec.n_points, list(ev.order), pruned)


def exhaustive_search(spec: SearchSpec, perf_fn: Callable[[tuple], Perf | tuple[float, float]]) -> SearchResult:
    n = spec.n_points
    if n > MAX_EXHAUSTIVE_POINTS:
        raise ValueError(f"grid has {n} points; exhaustive search is limited to {MAX_EXHAUSTIVE_POINTS}")
    ev = _Evaluator(spec, perf_fn)
    best, fastest = None, None
    for idx in itertools.product(*(range(k) for k in spec.shape)):
        p = ev(idx)
        if fastest is None or p.latency < fastest.latency:
            fastest = p
        if p.latency < spec.latency_bound and _better(p, best):
            best = p
    if best is None:
        raise InfeasibleBoundError("no grid point meets the latency bound", fastest)
    return SearchResult(best, len(ev.order), n, list(ev.order))


# -- monotonicity audit ------------------------------------------------------

def tolerant_monotone_mask(values: Sequence[float], tol: float) -> np.ndarray:
    """Largest subset that is non-decreasing up to ``tol``; returns True for kept points.

    A subset is kept when every member is at least the maximum of the earlier
    members minus ``tol``. Points outside the largest such subset are the
    non-monotone ones, so a single spike flags just that point.
    """
    v = list(values)
    n = len(v)
    if n == 0:
        return np.zeros(0, dtype=bool)
    # state: peak index -> (length, members)
    states: dict[int, tuple[int, tuple[int, ...]]] = {}
    for j in range(n):
        new = dict(states)
        for p, (length, members) in states.items():
            if v[j] >= v[p] - tol:
                q = j if v[j] > v[p] else p
                cand = (length + 1, members + (j,))
                if q not in new or cand[0] > new[q][0]:
                    new[q] = cand
        if j not in new or new[j][0] < 1:
            new[j] = (1, (j,))
        states = new
    best = max(states.values(), key=lambda s: s[0])
    mask = np.zeros(n, dtype=bool)
    mask[list(best[1])] = True
    return mask


@dataclass
class AuditResult:
    var: str
    tolerances: list[float]
    latency_nonmonotone: list[float]      # fraction of sweep points per tolerance
    throughput_nonmonotone: list[float]
    n_points: int
    flagged: dict = field(default_factory=dict)   # tolerance -> list of (values, "latency"/"throughput")
    n_infeasible: int = 0                         # skipped points (latency not finite)

    def rows(self) -> list[dict]:
        return [{"var": self.var, "tolerance": t, "latency_pct": 100 * a, "throughput_pct": 100 * b}
                for t, a, b in zip(self.tolerances, self.latency_nonmonotone, self.throughput_nonmonotone)]


def monotonicity_audit(var: int | str, spec: SearchSpec, perf_fn: Callable[[tuple], Perf | tuple[float, float]],
                       tolerances: Sequence[float] = (0.02, 0.05, 0.10), reference_latency: float | None = None,
                       reference_throughput: float | None = None) -> AuditResult:
    """Fraction of sweep points that break the declared direction of ``var``.

    For every setting of the other variables, ``var`` is swept over its grid.
    Latency tolerance is a fraction of ``reference_latency`` (default: the
    spec's bound); throughput tolerance a fraction of ``reference_throughput``
    (default: the largest throughput seen). Points that do not fit in memory
    (infinite latency) cannot be measured and are left out of the counts.
    """
    i = spec.names.index(var) if isinstance(var, str) else int(var)
    ev = _Evaluator(spec, perf_fn)
    others = [range(n) for k, n in enumerate(spec.shape) if k != i]
    sweeps = []
    n_skipped = 0
    for rest in itertools.product(*others):
        line = []
        for k in range(spec.shape[i]):
            idx = list(rest)
            idx.insert(i, k)
            p = ev(tuple(idx))
            if math.isfinite(p.latency):
                line.append(p)
            else:
                n_skipped += 1
        if line:
            sweeps.append(line)
    ref_l = reference_latency if reference_latency is not None else spec.latency_bound
    ref_t = reference_throughput
    if ref_t is None:
        ref_t = max((p.thrput for line in sweeps for p in line), default=0.0)
    n_pts = sum(len(line) for line in sweeps)
    lat_frac, thr_frac, flagged = [], [], {}
    for tol in tolerances:
        bad_l = bad_t = 0
        marks = []
        for line in sweeps:
            lat = [p.latency * spec.lat_dirs[i] for p in line]
            thr = [p.thrput * spec.thr_dirs[i] for p in line]
            ml = tolerant_monotone_mask(lat, tol * ref_l)
            mt = tolerant_monotone_mask(thr, tol * ref_t)
            bad_l += int((~ml).sum())
            bad_t += int((~mt).sum())
            marks += [(line[k].config, "latency") for k in np.flatnonzero(~ml)]
            marks += [(line[k].config, "throughput") for k in np.flatnonzero(~mt)]
        lat_frac.append(bad_l / n_pts if n_pts else 0.0)
        thr_frac.append(bad_t / n_pts if n_pts else 0.0)
        flagged[tol] = marks
    return AuditResult(spec.names[i], list(tolerances), lat_frac, thr_frac, n_pts, flagged, n_skipped)


# -- schedule search ---------------------------------------------------------

def batch_grid(max_batch: int) -> list[int]:
    """1..16 by one, then multiples of four."""
    g = list(range(1, min(16, max_batch) + 1))
    g += list(range(20, max_batch + 1, 4))
    return g


@dataclass
class Problem:
    model: ModelSpec
    cluster: ClusterSpec
    table: ProfileTable
    pe: LengthPMF
    pd: LengthPMF
    target_pct: float = 99.0

    @property
    def target_len(self) -> int:
        return percentile_length(self.pd, self.target_pct)

    @property
    def max_context(self) -> tuple[int, int]:
        return (self.pe.max_len, self.pd.max_len)

    def fits(self, config: ScheduleConfig) -> bool:
        return memory_check(config, self.model, self.cluster, self.table, self.max_context).fits

    def evaluate(self, config: ScheduleConfig) -> Perf:
        """Analytic throughput always; latency is infinite when the schedule does not fit in memory.

        Keeping throughput defined past the memory limit leaves it monotone,
        and memory use grows in the same direction as latency.
        """
        est = simulate(config, self.model, None, self.table, self.pe, self.pd, self.target_len)
        lat = est.latency if self.fits(config) else math.inf
        return Perf(lat, est.throughput, (), (config, est))


def rra_config(problem: Problem, b_e: int, n_d: int, tp: PartialTpSpec) -> ScheduleConfig:
    return make_rra_config(problem.model, problem.cluster, problem.pd, int(b_e), int(n_d), tp)


def waa_config(problem: Problem, strategy: str, b_e: int, n_micro: int, tp: PartialTpSpec) -> ScheduleConfig:
    """WAA schedule; the micro-batch count is capped at the decoder depth of the chosen split."""
    args = (problem.model, problem.cluster, problem.table, problem.pe, problem.pd, int(b_e))
    cfg = make_waa_config(*args, int(n_micro), strategy, tp)
    depth = len(cfg.decode_stages)
    if cfg.n_micro > depth:
        # more micro-batches than decoder stages only lengthens the round
        cfg = make_waa_config(*args, depth, strategy, tp, n_enc=cfg.n_enc_gpus)
    return cfg


def _max_feasible_batch(fits: Callable[[int], bool], cap: int) -> int:
    """Largest b in [1, cap] with fits(b), assuming fits is monotone decreasing; 0 if none."""
    if not fits(1):
        return 0
    lo, hi = 1, cap
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def rra_search_spec(problem: Problem, latency_bound: float, tp: PartialTpSpec, eps_t=None, eps_l=None,
                    max_b_e: int = 512) -> SearchSpec | None:
    n_d_max = problem.pd.max_len
    cap = _max_feasible_batch(lambda b: problem.fits(rra_config(problem, b, n_d_max, tp)), max_b_e)
    if cap == 0:
        return None
    grid = batch_grid(cap)
    if grid[-1] < cap:
        grid.append(cap)
    return SearchSpec([grid, list(range(1, n_d_max + 1))], latency_bound, ("b_e", "n_d"),
                      thr_dirs=(1, -1), lat_dirs=(1, -1), eps_t=eps_t, eps_l=eps_l)


def waa_decode_depth(problem: Problem, tp: PartialTpSpec, strategy: str, b_e: int = 1) -> int:
    cfg = waa_config(problem, strategy, b_e, 1, tp)
    return len(cfg.decode_stages)


def waa_search_spec(problem: Problem, strategy: str, latency_bound: float, tp: PartialTpSpec, eps_t=None,
                    eps_l=None, max_b_e: int = 512) -> SearchSpec | None:
    try:
        cap = _max_feasible_batch(lambda b: problem.fits(waa_config(problem, strategy, b, 1, tp)), max_b_e)
    except InfeasibleError:
        return None
    if cap == 0:
        return None
    grid = batch_grid(cap)
    if grid[-1] < cap:
        grid.append(cap)
    # grid up to the deepest decoder any batch size gets; waa_config caps per point
    depth = max(waa_decode_depth(problem, tp, strategy, b) for b in grid)
    return SearchSpec([grid, list(range(1, depth + 1))], latency_bound, ("b_e", "n_micro"),
                      thr_dirs=(1, 1), lat_dirs=(1, -1), eps_t=eps_t, eps_l=eps_l)


def audit_search_spec(problem: Problem, strategy: str, latency_bound: float, tp_degree: int = 1,
                      max_b_e: int = 64) -> tuple[SearchSpec, Callable[[tuple], Perf]] | None:
    """Search space and perf function for the monotonicity audit.

    With ``tp_degree > 1`` the TP-applied GPU count becomes a third variable
    ("tp"); WAA then holds the micro-batch count at 1, since the useful range
    of that count depends on how many decoder stages TP leaves.
    """
    base = PartialTpSpec()
    if strategy == "RRA":
        spec = rra_search_spec(problem, latency_bound, base, max_b_e=max_b_e)
        make = lambda v, tp: rra_config(problem, v[0], v[1], tp)
    else:
        spec = waa_search_spec(problem, strategy, latency_bound, base, max_b_e=max_b_e)
        make = lambda v, tp: waa_config(problem, strategy, v[0], v[1], tp)
    if spec is None:
        return None
    if tp_degree <= 1:
        return spec, lambda v: problem.evaluate(make(v, base))
    n = problem.cluster.n_gpus - (0 if strategy == "RRA" else 1)
    applied = list(range(0, n - n % tp_degree + 1, tp_degree))
    grids = list(spec.grids)
    if strategy != "RRA":
        grids[1] = [1]
    # observed on the synthetic profiles: more TP GPUs raise throughput and cut latency
    spec = SearchSpec(grids + [applied], latency_bound, tuple(spec.names) + ("tp",),
                      thr_dirs=tuple(spec.thr_dirs) + (1,), lat_dirs=tuple(spec.lat_dirs) + (-1,))
    return spec, lambda v: problem.evaluate(make(v, PartialTpSpec(tp_degree, int(v[2]))))


@dataclass
class OptimizeResult:
    perf: Perf
    config: ScheduleConfig
    estimate: Estimate
    evaluations: int
    runs: list[dict]
    notes: list[str]

    def summary(self) -> dict:
        return {"throughput": self.perf.thrput, "latency": self.perf.latency, "evaluations": self.evaluations,
                **self.config.summary()}


def tp_options(problem: Problem, strategy: str, degrees: Iterable[int] | None = None) -> list[PartialTpSpec]:
    degrees = list(degrees) if degrees is not None else list(problem.table.tp_degrees)
    n = problem.cluster.n_gpus
    if strategy != "RRA":
        n = n - 1           # at least one GPU encodes
    out = [PartialTpSpec()]
    for d in degrees:
        if d < 2 or d > n:
            continue
        out += [PartialTpSpec(d, a) for a in range(d, n - n % d + 1, d)]
    return out


def optimize_all(problem: Problem, latency_bound: float, strategies: Sequence[str] = ("RRA", "WAA-C", "WAA-M"),
                 tp_degrees: Iterable[int] | None = None, eps_t: float | None = None, eps_l: float | None = None,
                 incumbent: OptimizeResult | None = None) -> OptimizeResult:
    """Best schedule over strategies, tensor-parallel degree and applied-GPU count."""
    notes: list[str] = []
    runs: list[dict] = []
    best: Perf | None = None
    total_evals = 0
    if problem.cluster.n_gpus < 2 and any(s != "RRA" for s in strategies):
        notes.append("WAA excluded: needs at least two GPUs")
        strategies = [s for s in strategies if s == "RRA"]
    seed = incumbent.perf if incumbent is not None and incumbent.perf.latency < latency_bound else None
    if seed is not None:
        best = seed
    failures = []
    for strategy in strategies:
        any_fit = False
        for tp in tp_options(problem, strategy, tp_degrees):
            if strategy == "RRA":
                spec = rra_search_spec(problem, latency_bound, tp, eps_t, eps_l)
                fn = (lambda tp_: lambda v: problem.evaluate(rra_config(problem, v[0], v[1], tp_)))(tp)
            else:
                spec = waa_search_spec(problem, strategy, latency_bound, tp, eps_t, eps_l)
                fn = (lambda tp_, s_: lambda v: problem.evaluate(waa_config(problem, s_, v[0], v[1], tp_)))(tp, strategy)
            if spec is None:
                continue
            any_fit = True
            try:
                res = branch_and_bound(spec, fn)
            except InfeasibleBoundError as exc:
                failures.append((strategy, tp, exc.perf))
                continue
            total_evals += res.evaluations
            runs.append({"strategy": strategy, "tp_degree": tp.degree, "tp_applied": tp.applied_gpus,
                         "throughput": res.best.thrput, "latency": res.best.latency,
                         "evaluations": res.evaluations, "grid_points": res.grid_points})
            if _better(res.best, best):
                best = res.best
        if not any_fit:
            notes.append(f"{strategy} excluded: no batch size fits in GPU memory")
    if best is None:
        lowest = min((p for *_, p in failures if p is not None), key=lambda p: p.latency, default=None)
        raise InfeasibleBoundError(f"no schedule meets latency bound {latency_bound:.6g}s", lowest,
                                   {"notes": notes, "failures": [(s, t.degree, t.applied_gpus) for s, t, _ in failures]})
    config, est = best.payload
    return OptimizeResult(best, config, est, total_evals, runs, notes)


def optimize_sweep(problem: Problem, bounds: Sequence[float], **kwargs) -> list[OptimizeResult | None]:
    """Optimize for each bound in increasing order, seeding each run with the previous answer."""
    out: list[OptimizeResult | None] = [None] * len(bounds)
    prev = None
    for k in sorted(range(len(bounds)), key=lambda k: bounds[k]):
        try:
            prev = optimize_all(problem, bounds[k], incumbent=prev, **kwargs)
        except InfeasibleBoundError:
            continue
        out[k] = prev
    return out
