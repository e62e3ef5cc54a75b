"""Sequence-length distributions and decode-phase completion statistics.

Lengths are positive integer token counts. A :class:`LengthPMF` is a sparse
probability mass function over lengths; a :class:`PhaseCompletionPMF` gives,
for a decode phase of ``n_d`` iterations, the probability that a query in the
running batch finishes at iteration ``U`` of that phase.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.stats import norm

PROB_FLOOR = 1e-12
SUM_TOL = 1e-9


class DistributionError(ValueError):
    """Invalid distribution parameters or PMF contents."""


def _sparsify(probs: Mapping[int, float]) -> dict[int, float]:
    kept = {int(k): float(v) for k, v in probs.items() if v >= PROB_FLOOR}
    total = math.fsum(kept.values())
    if total <= 0:
        raise DistributionError("PMF has no mass above the probability floor")
    return {k: v / total for k, v in sorted(kept.items())}


@dataclass(frozen=True, eq=True)
class LengthPMF:
    probs: Mapping[int, float]
    max_len: int
    _lengths: np.ndarray = field(init=False, repr=False, compare=False)
    _weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.max_len < 1:
            raise DistributionError(f"max_len must be >= 1, got {self.max_len}")
        if not self.probs:
            raise DistributionError("empty PMF")
        for k, v in self.probs.items():
            if not 1 <= k <= self.max_len:
                raise DistributionError(f"length {k} outside [1, {self.max_len}]")
            if v < 0 or not math.isfinite(v):
                raise DistributionError(f"invalid probability {v} for length {k}")
        total = math.fsum(self.probs.values())
        if abs(total - 1.0) > SUM_TOL:
            raise DistributionError(f"probabilities sum to {total}, not 1")
        keys = sorted(self.probs)
        object.__setattr__(self, "_lengths", np.array(keys, dtype=np.int64))
        object.__setattr__(self, "_weights", np.array([self.probs[k] for k in keys], dtype=float))

    @property
    def lengths(self) -> np.ndarray:
        return self._lengths

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def mean(self) -> float:
        return mean_length(self)

    def percentile(self, pct: float) -> int:
        return percentile_length(self, pct)

    def to_dict(self) -> dict:
        return {"kind": "pmf", "max_len": self.max_len,
                "probs": {str(k): v for k, v in self.probs.items()}}


@dataclass(frozen=True)
class PhaseCompletionPMF:
    """Completion probability per iteration index; total mass may be below 1."""

    probs: Mapping[int, float]
    n_d: int

    def __post_init__(self):
        if self.n_d < 1:
            raise DistributionError("n_d must be >= 1")
        for u, p in self.probs.items():
            if not 1 <= u <= self.n_d:
                raise DistributionError(f"iteration {u} outside [1, {self.n_d}]")
            if p < 0:
                raise DistributionError(f"negative probability at U={u}")
        if math.fsum(self.probs.values()) > 1.0 + SUM_TOL:
            raise DistributionError("completion mass exceeds 1")

    def as_array(self) -> np.ndarray:
        """Dense vector indexed by ``U - 1``."""
        out = np.zeros(self.n_d)
        for u, p in self.probs.items():
            out[u - 1] = p
        return out


def truncated_normal_pmf(mu: float, sigma: float, max_len: int) -> LengthPMF:
    """Discretize N(mu, sigma) onto [1, max_len] by integrating unit cells.

    Length ``k`` receives the continuous mass on ``(k - 0.5, k + 0.5]``; mass
    below 0.5 or above ``max_len + 0.5`` is cut and the rest renormalized.
    """
    if not sigma > 0:
        raise DistributionError(f"sigma must be positive, got {sigma}")
    if max_len < 1:
        raise DistributionError(f"max_len must be >= 1, got {max_len}")
    edges = np.arange(max_len + 1, dtype=float) + 0.5
    z = (edges - mu) / sigma
    # sf differences above the mean, cdf differences below: no cancellation in either tail
    cells = np.where(z[:-1] > 0,
                     norm.sf(z[:-1]) - norm.sf(z[1:]),
                     norm.cdf(z[1:]) - norm.cdf(z[:-1]))
    cells = np.clip(cells, 0.0, None)
    if cells.sum() <= 0:
        # all mass outside the window: collapse onto the nearest admissible length
        k = int(min(max(round(mu), 1), max_len))
        return LengthPMF({k: 1.0}, max_len)
    probs = {k + 1: float(p) for k, p in enumerate(cells)}
    return LengthPMF(_sparsify(probs), max_len)


def empirical_pmf(lengths: Iterable[int], max_len: int | None = None) -> LengthPMF:
    """Normalized histogram of observed lengths, clamped to ``max_len``."""
    arr = np.asarray(list(lengths), dtype=np.int64)
    if arr.size == 0:
        raise DistributionError("empirical_pmf needs at least one length")
    if (arr < 1).any():
        raise DistributionError("lengths must be >= 1")
    if max_len is None:
        max_len = int(arr.max())
    arr = np.minimum(arr, max_len)
    vals, counts = np.unique(arr, return_counts=True)
    total = counts.sum()
    return LengthPMF(_sparsify({int(v): c / total for v, c in zip(vals, counts)}), int(max_len))


def point_mass(length: int, max_len: int | None = None) -> LengthPMF:
    return LengthPMF({int(length): 1.0}, int(max_len or length))


def completion_conditional(s: int, n_d: int) -> dict[int, float]:
    """P(U | S=s) for a phase of ``n_d`` iterations (sparse, one entry)."""
    if s < 1 or n_d < 1:
        raise DistributionError("s and n_d must be >= 1")
    if s <= n_d:
        return {s: 1.0}
    return {1 + (s - 1) % n_d: 1.0 / math.ceil(s / n_d)}


def completion_distribution(pd: LengthPMF, n_d: int) -> PhaseCompletionPMF:
    """Mix :func:`completion_conditional` over the output-length PMF."""
    if n_d < 1:
        raise DistributionError("n_d must be >= 1")
    s = pd.lengths
    u = 1 + (s - 1) % n_d
    # ceil(s / n_d) == 1 whenever s <= n_d, so one expression covers both cases
    mass = pd.weights / np.ceil(s / n_d)
    dense = np.zeros(n_d)
    np.add.at(dense, u - 1, mass)
    return PhaseCompletionPMF({i + 1: float(p) for i, p in enumerate(dense) if p > 0}, n_d)


def expected_completion_fraction(pc: PhaseCompletionPMF) -> float:
    return math.fsum(pc.probs.values())


def phase_count(pd: LengthPMF, n_d: int) -> float:
    """Expected number of decode phases a query spans, E[ceil(S / n_d)]."""
    return float(np.dot(pd.weights, np.ceil(pd.lengths / n_d)))


def resident_pmf(pd: LengthPMF, n_d: int) -> LengthPMF:
    """Length mix of the decode batch at a phase boundary in steady state.

    A query of length S sits in ceil(S / n_d) consecutive phase-start batches,
    so long queries are over-represented relative to ``pd``.
    """
    w = pd.weights * np.ceil(pd.lengths / n_d)
    w = w / w.sum()
    return LengthPMF(_sparsify(dict(zip(pd.lengths.tolist(), w.tolist()))), pd.max_len)


def mean_length(pmf: LengthPMF) -> float:
    return float(np.dot(pmf.lengths, pmf.weights))


def percentile_length(pmf: LengthPMF, pct: float) -> int:
    """Smallest length whose CDF reaches ``pct`` percent."""
    if not 0 < pct <= 100:
        raise DistributionError(f"percentile must be in (0, 100], got {pct}")
    cdf = np.cumsum(pmf.weights)
    idx = int(np.searchsorted(cdf, pct / 100.0 - 1e-12, side="left"))
    return int(pmf.lengths[min(idx, len(cdf) - 1)])


def sample_length(pmf: LengthPMF, rng: np.random.Generator) -> int:
    return int(sample_lengths(pmf, rng, 1)[0])


def sample_lengths(pmf: LengthPMF, rng: np.random.Generator, n: int) -> np.ndarray:
    # inverse-CDF sampling; rng.choice renormalizes silently, this does not
    cdf = np.cumsum(pmf.weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return pmf.lengths[np.minimum(idx, len(cdf) - 1)]


def total_variation(a: LengthPMF, b: LengthPMF) -> float:
    keys = set(a.probs) | set(b.probs)
    return 0.5 * math.fsum(abs(a.probs.get(k, 0.0) - b.probs.get(k, 0.0)) for k in keys)


# -- file formats -----------------------------------------------------------

def distribution_from_dict(spec: Mapping) -> LengthPMF:
    kind = spec.get("kind")
    if kind == "trunc_normal":
        try:
            return truncated_normal_pmf(float(spec["mu"]), float(spec["sigma"]), int(spec["max_len"]))
        except KeyError as exc:
            raise DistributionError(f"trunc_normal spec missing field {exc}") from None
    if kind == "empirical":
        if "lengths" not in spec:
            raise DistributionError("empirical spec missing field 'lengths'")
        return empirical_pmf(spec["lengths"], spec.get("max_len"))
    if kind == "pmf":
        probs = {int(k): float(v) for k, v in spec["probs"].items()}
        return LengthPMF(_sparsify(probs), int(spec["max_len"]))
    raise DistributionError(f"unknown distribution kind {kind!r}")


def load_distribution(path: str | Path) -> LengthPMF:
    with open(path, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DistributionError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return distribution_from_dict(spec)


TASKS = ("S", "T", "G", "C1", "C2")


@dataclass(frozen=True)
class TaskPreset:
    name: str
    description: str
    input_spec: Mapping
    output_spec: Mapping
    output_p99: int

    @property
    def pe(self) -> LengthPMF:
        return distribution_from_dict(self.input_spec)

    @property
    def pd(self) -> LengthPMF:
        return distribution_from_dict(self.output_spec)


def load_task(name: str) -> TaskPreset:
    """Load one of the shipped workload presets (S, T, G, C1, C2)."""
    if name not in TASKS:
        raise DistributionError(f"unknown task {name!r}; choose from {', '.join(TASKS)}")
    raw = resources.files("llmsched.data.tasks").joinpath(f"{name}.json").read_text("utf-8")
    d = json.loads(raw)
    return TaskPreset(name, d["description"], d["input"], d["output"], int(d["output_p99"]))
