"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

``--end-to-end`` also times an RRA event simulation in a subprocess per backend.
"""
from __future__ import annotations

import argparse
import importlib
import os
import subprocess
import sys
import timeit

import numpy as np

from llmsched import _kernels_py

E2E = """
import time
from llmsched import kernels
from llmsched.cost_model import synth_profile
from llmsched.event_sim import run_event_sim
from llmsched.schedule_core import make_rra_config
from llmsched.seqdist import load_task
from llmsched.specs import MODELS, ClusterSpec, CostParams
model, cluster = MODELS["opt-13b"], ClusterSpec(4, 48e9)
table = synth_profile(model, CostParams.a40())
t = load_task("S")
pe, pd = t.pe, t.pd
cfg = make_rra_config(model, cluster, pd, 16, 16)
start = time.perf_counter()
run_event_sim(cfg, model, cluster, table, pe, pd, n_queries=3000)
print(kernels.BACKEND, time.perf_counter() - start)
"""


def cases(rng: np.random.Generator):
    xs = np.sort(rng.uniform(0, 1000, 64))
    ys = rng.uniform(0, 1, 64)
    gx, gy = np.sort(rng.uniform(1, 512, 16)), np.sort(rng.uniform(1, 4096, 16))
    table = rng.uniform(0, 1, (16, 16))
    times = rng.uniform(0.01, 1.0, (64, 8))
    release = np.sort(rng.uniform(0, 10, 64))
    return {
        "interp1 x1000": lambda k: [k.interp1(xs, ys, float(x)) for x in np.linspace(0, 1000, 1000)],
        "interp2 x1000": lambda k: [k.interp2(gx, gy, table, 100.0 + x, 2000.0) for x in range(1000)],
        "flow_shop 64x8": lambda k: k.flow_shop(times, release, np.zeros(8)),
        "cyclic_pipeline 8x4 x200": lambda k: k.cyclic_pipeline(times[:8, :4], 200, 0.0),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    try:
        compiled = importlib.import_module("llmsched._kernels")
    except ImportError:
        print("compiled extension not built; only the fallback is timed")
        compiled = None
    print(f"{'kernel':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        py = min(timeit.repeat(lambda: fn(_kernels_py), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:28s} {py:10.3f}")
            continue
        cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {py:10.3f} {cy:10.3f} {py / cy:7.1f}x")
    if args.end_to_end:
        for flag in ("1", ""):
            env = dict(os.environ, LLMSCHED_PURE_PYTHON=flag)
            out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"event-sim RRA/S 3000 queries [{backend}]: {float(secs):.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
