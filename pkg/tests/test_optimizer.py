from __future__ import annotations

import itertools
import math

import pytest

from llmsched.event_sim import derive_latency_bounds
from llmsched.optimizer import (MAX_EXHAUSTIVE_POINTS, Block, InfeasibleBoundError, Perf, Problem, SearchSpec,
                                batch_grid, branch_and_bound, exhaustive_search, monotonicity_audit,
                                optimize_all, optimize_sweep, rra_config, split_block, tolerant_monotone_mask)
from llmsched.schedule_core import PartialTpSpec
from llmsched.specs import MODELS, ClusterSpec

from conftest import CLUSTER4, OPT, table_for, task
from oracles import monotone_objective


def sum_prod(v):
    x, y = v
    return Perf(float(x * y), float(x + y))


GRID10 = [list(range(1, 11))] * 2


def test_sum_product_example_matches_exhaustive():
    spec = SearchSpec(GRID10, 24.0, eps_t=0.0, eps_l=0.0)
    bb = branch_and_bound(spec, sum_prod)
    ex = exhaustive_search(spec, sum_prod)
    assert bb.best.thrput == ex.best.thrput == 12.0     # (2, 10): x*y = 20
    assert bb.best.latency < 24.0


def test_upper_corner_feasible_shortcut():
    spec = SearchSpec(GRID10, 101.0)
    res = branch_and_bound(spec, sum_prod)
    assert res.best.config == (10, 10)
    assert res.evaluations <= 2


def test_infeasible_bound_reports_lower_corner():
    spec = SearchSpec(GRID10, 0.5)
    with pytest.raises(InfeasibleBoundError) as bb:
        branch_and_bound(spec, sum_prod)
    assert bb.value.perf.config == (1, 1)
    with pytest.raises(InfeasibleBoundError):
        exhaustive_search(spec, sum_prod)


def test_exhaustive_refuses_huge_grids():
    spec = SearchSpec([list(range(MAX_EXHAUSTIVE_POINTS)), [1, 2]], 1.0)
    with pytest.raises(ValueError, match="points"):
        exhaustive_search(spec, sum_prod)


def test_spec_validation():
    with pytest.raises(ValueError):
        SearchSpec([[]], 1.0)
    with pytest.raises(ValueError):
        SearchSpec([[2, 1]], 1.0)
    with pytest.raises(ValueError):
        SearchSpec([[1, 2]], 1.0, eps_t=-1.0)


# -- split heuristic ---------------------------------------------------------

def _split(spec, block, table):
    def fn(idx):
        lat, thr = table(idx)
        return Perf(lat, thr, idx)
    return split_block(block, spec, fn)


def test_split_vertical_when_top_left_wins():
    spec = SearchSpec([list(range(8)), list(range(8))], 10.0)
    # top-left (x low, y high) feasible with more throughput than bottom-right
    table = lambda i: {(0, 7): (5.0, 9.0), (7, 0): (5.0, 4.0)}.get(i, (50.0, 1.0))
    (a, b), probes = _split(spec, Block((0, 0), (7, 7)), table)
    assert a.hi == (3, 7) and b.lo == (4, 0)
    assert len(probes) == 2


def test_split_horizontal_when_bottom_right_wins():
    spec = SearchSpec([list(range(8)), list(range(8))], 10.0)
    table = lambda i: {(0, 7): (5.0, 4.0), (7, 0): (5.0, 9.0)}.get(i, (50.0, 1.0))
    (a, b), _ = _split(spec, Block((0, 0), (7, 7)), table)
    assert a.hi == (7, 3) and b.lo == (0, 4)


def test_split_tie_goes_vertical():
    spec = SearchSpec([list(range(8)), list(range(8))], 10.0)
    table = lambda i: {(0, 7): (5.0, 4.0), (7, 0): (5.0, 4.0)}.get(i, (50.0, 1.0))
    (a, _), _ = _split(spec, Block((0, 0), (7, 7)), table)
    assert a.hi == (3, 7)


def test_split_longest_axis_when_nothing_feasible():
    spec = SearchSpec([list(range(8)), list(range(2))], 1.0)
    (a, b), _ = _split(spec, Block((0, 0), (7, 1)), lambda i: (50.0, 1.0))
    assert a.hi == (3, 1) and b.lo == (4, 0)


def test_split_one_by_two_gives_points():
    spec = SearchSpec([[1], [1, 2]], 1.0)
    (a, b), _ = _split(spec, Block((0, 0), (0, 1)), lambda i: (50.0, 1.0))
    assert a.is_point and b.is_point
    assert {a.lo, b.lo} == {(0, 0), (0, 1)}


def test_split_point_is_terminal():
    spec = SearchSpec([[1], [1]], 1.0)
    blk = Block((0, 0), (0, 0))
    children, probes = _split(spec, blk, lambda i: (50.0, 1.0))
    assert children == [blk] and probes == []


def test_children_partition_parent():
    spec = SearchSpec([list(range(5)), list(range(7)), list(range(3))], 1.0)
    blk = Block((0, 1, 0), (4, 6, 2))
    (a, b), _ = _split(spec, blk, lambda i: (50.0, 1.0))
    pts = lambda k: set(itertools.product(*(range(l, h + 1) for l, h in zip(k.lo, k.hi))))
    assert pts(a) | pts(b) == pts(blk) and not pts(a) & pts(b)


# -- synthetic objectives ----------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_matches_exhaustive_on_synthetic(seed):
    grids, td, ld, perf = monotone_objective(seed)
    lb = float(sorted(perf.L.ravel())[perf.L.size // 3])
    spec = SearchSpec(grids, lb, thr_dirs=td, lat_dirs=ld, eps_t=0.0, eps_l=0.0)
    bb = branch_and_bound(spec, perf)
    ex = exhaustive_search(spec, perf)
    assert bb.best.thrput == ex.best.thrput
    assert bb.best.latency < lb


@pytest.mark.parametrize("seed", range(10))
def test_pruning_is_sound(seed):
    grids, td, ld, perf = monotone_objective(100 + seed)
    lb = float(sorted(perf.L.ravel())[perf.L.size // 2])
    spec = SearchSpec(grids, lb, thr_dirs=td, lat_dirs=ld)
    res = branch_and_bound(spec, perf)
    eps_l = spec.latency_tolerance()
    for lo, hi, reason, t_star in res.pruned:
        pts = [perf(spec.values(idx)) for idx in itertools.product(*(range(l, h + 1) for l, h in zip(lo, hi)))]
        if reason == "latency":
            assert all(lat >= lb + eps_l for lat, _ in pts)
        else:
            assert all(thr <= t_star + spec.throughput_tolerance(t_star) for lat, thr in pts if lat < lb)


def test_evaluation_sequence_is_deterministic():
    grids, td, ld, perf = monotone_objective(7)
    lb = float(perf.L.mean())
    spec = SearchSpec(grids, lb, thr_dirs=td, lat_dirs=ld)
    a, b = branch_and_bound(spec, perf), branch_and_bound(spec, perf)
    assert a.trace == b.trace and a.best == b.best


def test_incumbent_is_kept_when_nothing_beats_it():
    spec = SearchSpec(GRID10, 24.0)
    seed = Perf(1.0, 1000.0, (0, 0))
    assert branch_and_bound(spec, sum_prod, incumbent=seed).best is seed


# -- audit -------------------------------------------------------------------

def test_tolerant_mask_flags_single_spike():
    mask = tolerant_monotone_mask([1, 2, 3, 10, 5, 6, 7], 0.5)
    assert mask.tolist() == [True, True, True, False, True, True, True]
    assert tolerant_monotone_mask([1, 2, 1.8, 3], 0.5).all()


def test_audit_strictly_monotone_is_clean():
    spec = SearchSpec(GRID10, 50.0)
    res = monotonicity_audit("x0", spec, sum_prod)
    assert res.latency_nonmonotone == [0.0, 0.0, 0.0]
    assert res.throughput_nonmonotone == [0.0, 0.0, 0.0]
    assert res.n_points == 100


def test_audit_flags_exactly_the_spike():
    def spiky(v):
        x, y = v
        thr = 30.0 if (x, y) == (4, 2) else float(x)
        return Perf(float(x), thr)

    spec = SearchSpec([list(range(1, 11)), [1, 2, 3]], 10.0)
    res = monotonicity_audit(0, spec, spiky, tolerances=(0.05,))
    assert res.flagged[0.05] == [((4, 2), "throughput")]
    assert res.throughput_nonmonotone == [pytest.approx(1 / 30)]
    assert res.latency_nonmonotone == [0.0]
    assert res.rows()[0]["throughput_pct"] == pytest.approx(100 / 30)


def test_audit_rra_batch_sweep_on_task_s(opt, cluster4, a40):
    t = task("S")
    problem = Problem(opt, cluster4, a40, t.pe, t.pd)
    bound = derive_latency_bounds(opt, cluster4, a40, t.pe, t.pd)[2]
    spec = SearchSpec([batch_grid(64), [4, 8, 16, 32, 64]], bound, ("b_e", "n_d"), thr_dirs=(1, -1),
                      lat_dirs=(1, -1))
    res = monotonicity_audit("b_e", spec, lambda v: problem.evaluate(rra_config(problem, v[0], v[1], PartialTpSpec())),
                             tolerances=(0.05,))
    assert res.latency_nonmonotone[0] <= 0.05
    assert res.throughput_nonmonotone[0] <= 0.05


# -- schedule search ---------------------------------------------------------

def test_simulator_grid_matches_exhaustive(opt, cluster4, a40):
    t = task("T")
    problem = Problem(opt, cluster4, a40, t.pe, t.pd)
    bound = derive_latency_bounds(opt, cluster4, a40, t.pe, t.pd)[2]
    spec = SearchSpec([batch_grid(32), list(range(1, 33))], bound, ("b_e", "n_d"), thr_dirs=(1, -1),
                      lat_dirs=(1, -1))
    fn = lambda v: problem.evaluate(rra_config(problem, v[0], v[1], PartialTpSpec()))
    bb = branch_and_bound(spec, fn)
    ex = exhaustive_search(spec, fn)
    assert bb.best.latency < bound
    assert bb.best.thrput >= ex.best.thrput - spec.throughput_tolerance(ex.best.thrput)
    assert bb.evaluations < ex.evaluations


def test_single_gpu_runs_rra_only():
    t = task("T")
    problem = Problem(OPT, ClusterSpec(1, 80e9), table_for(), t.pe, t.pd)
    res = optimize_all(problem, math.inf)
    assert res.config.strategy == "RRA"
    assert any("WAA excluded" in n for n in res.notes)
    assert all(r["strategy"] == "RRA" and r["tp_degree"] == 1 for r in res.runs)


def test_waa_excluded_when_model_does_not_fit_twice():
    t = task("T")
    model = MODELS["gpt3-101b"]
    problem = Problem(model, ClusterSpec(8, 48e9), table_for("a40", "gpt3-101b"), t.pe, t.pd)
    res = optimize_all(problem, math.inf, tp_degrees=[])
    assert res.config.strategy == "RRA"
    assert any(n.startswith("WAA-C excluded") for n in res.notes)
    assert any(n.startswith("WAA-M excluded") for n in res.notes)


def test_no_schedule_under_tiny_bound():
    t = task("T")
    problem = Problem(OPT, CLUSTER4, table_for(), t.pe, t.pd)
    with pytest.raises(InfeasibleBoundError) as exc:
        optimize_all(problem, 1e-4, tp_degrees=[])
    assert exc.value.perf is not None and exc.value.perf.latency > 1e-4


def test_relaxing_bound_never_lowers_throughput():
    t = task("T")
    problem = Problem(OPT, CLUSTER4, table_for(), t.pe, t.pd)
    bounds = derive_latency_bounds(OPT, CLUSTER4, table_for(), t.pe, t.pd)
    res = optimize_sweep(problem, bounds, strategies=("RRA",), tp_degrees=[4])
    thr = [r.perf.thrput for r in res]
    assert all(b >= a for a, b in zip(thr, thr[1:]))
    for r, lb in zip(res, bounds):
        assert r.perf.latency < lb
