"""Per-layer execution-time tables and the analytic profiler that fills them.

A :class:`ProfileTable` stores, for every tensor-parallel degree:

* attention-kernel time over a (batch, context) grid, per phase,
* the rest of the layer (projections + FFN) over an input-size grid
  (batch x query tokens), per phase,
* all-reduce time for tensor-parallel groups and point-to-point time for
  pipeline handoffs, both over a message-size grid.

Lookups interpolate (bilinear for attention, linear elsewhere) and refuse to
extrapolate outside the profiled hull.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import kernels
from .specs import CostParams, ModelSpec

PHASES = ("encode", "decode")
DEFAULT_SYNC_PER_LAYER = {"encode": 2, "decode": 3}
PROFILE_FORMAT = "profile-v1"


class ProfileError(ValueError):
    """Malformed profile table or file."""


class OutOfRangeError(ValueError):
    """Lookup outside the profiled grid hull."""


class ProfileWarning(UserWarning):
    pass


def _geometric_grid(lo: float, hi: float) -> np.ndarray:
    """1, 2, 3, 4, 6, 8, 12, ... (powers of two and their 1.5x midpoints)."""
    pts = {float(lo), float(hi)}
    p = 1.0
    while p <= hi:
        for v in (p, 1.5 * p):
            if lo <= v <= hi and v == int(v):
                pts.add(float(v))
        p *= 2
    return np.array(sorted(pts))


@dataclass(frozen=True)
class GridSpec:
    max_batch: int = 2048
    max_context: int = 4096
    tp_degrees: tuple[int, ...] = (1, 2, 4)
    max_input_size: int = 1 << 22
    max_sync_bytes: float = float(1 << 32)

    def batch_grid(self) -> np.ndarray:
        return _geometric_grid(1, self.max_batch)

    def context_grid(self) -> np.ndarray:
        return _geometric_grid(1, self.max_context)

    def size_grid(self) -> np.ndarray:
        return _geometric_grid(1, self.max_input_size)

    def sync_grid(self) -> np.ndarray:
        return np.array([0.0] + [float(2 ** k) for k in range(0, int(math.log2(self.max_sync_bytes)) + 1)])


@dataclass(frozen=True)
class ProfileTable:
    tp_degrees: tuple[int, ...]
    batch_grid: np.ndarray
    context_grid: np.ndarray
    size_grid: np.ndarray
    sync_grid: np.ndarray
    attn: Mapping[str, np.ndarray]      # phase -> (tp, batch, context)
    ffn: Mapping[str, np.ndarray]       # phase -> (tp, size)
    tp_sync: np.ndarray                 # (tp, sync bytes)
    pp_sync: np.ndarray                 # (sync bytes,)
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        _validate(self)

    # -- convenience accessors ------------------------------------------------
    @property
    def hidden_size(self) -> int:
        return int(self.meta["model"]["hidden_size"])

    @property
    def act_bytes(self) -> int:
        return int(self.meta.get("act_bytes", 2))

    @property
    def sync_per_layer(self) -> Mapping[str, int]:
        return self.meta.get("sync_per_layer", DEFAULT_SYNC_PER_LAYER)

    @property
    def overlap_comm(self) -> bool:
        return bool(self.meta.get("overlap_comm", False))

    def tp_index(self, tp_degree: int) -> int:
        try:
            return self.tp_degrees.index(tp_degree)
        except ValueError:
            raise OutOfRangeError(f"tp_degree {tp_degree} not profiled (have {self.tp_degrees})") from None

    @property
    def max_batch(self) -> float:
        return float(self.batch_grid[-1])

    @property
    def max_context(self) -> float:
        return float(self.context_grid[-1])

    @property
    def max_input_size(self) -> float:
        return float(self.size_grid[-1])

    def __eq__(self, other):
        if not isinstance(other, ProfileTable):
            return NotImplemented
        return _to_json_obj(self) == _to_json_obj(other)

    __hash__ = None  # type: ignore[assignment]


def _strictly_increasing(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 1 or arr.size == 0:
        raise ProfileError(f"{name}: grid must be a non-empty 1-D array")
    if arr.size > 1 and not np.all(np.diff(arr) > 0):
        raise ProfileError(f"{name}: grid must be strictly increasing")


def _validate(t: ProfileTable) -> None:
    _strictly_increasing("batch_grid", t.batch_grid)
    _strictly_increasing("context_grid", t.context_grid)
    _strictly_increasing("size_grid", t.size_grid)
    _strictly_increasing("sync_grid", t.sync_grid)
    if list(t.tp_degrees) != sorted(set(t.tp_degrees)) or t.tp_degrees[0] < 1:
        raise ProfileError("tp_degrees must be strictly increasing positive integers")
    n_tp = len(t.tp_degrees)
    for phase in PHASES:
        if phase not in t.attn or phase not in t.ffn:
            raise ProfileError(f"missing phase {phase!r}")
        a, f = t.attn[phase], t.ffn[phase]
        if a.shape != (n_tp, t.batch_grid.size, t.context_grid.size):
            raise ProfileError(f"attn[{phase}]: shape {a.shape} does not match grids")
        if f.shape != (n_tp, t.size_grid.size):
            raise ProfileError(f"ffn[{phase}]: shape {f.shape} does not match grids")
        if not (np.all(np.isfinite(a)) and np.all(a > 0)):
            raise ProfileError(f"attn[{phase}]: times must be finite and > 0")
        if not (np.all(np.isfinite(f)) and np.all(f > 0)):
            raise ProfileError(f"ffn[{phase}]: times must be finite and > 0")
        if np.any(np.diff(a, axis=1) < 0) or np.any(np.diff(a, axis=2) < 0) or np.any(np.diff(f, axis=1) < 0):
            warnings.warn(f"profile phase {phase!r} is not monotone in batch/context/size; "
                          "interpolated times may be non-monotone", ProfileWarning, stacklevel=3)
    if t.tp_sync.shape != (n_tp, t.sync_grid.size):
        raise ProfileError(f"tp_sync: shape {t.tp_sync.shape} does not match grids")
    if t.pp_sync.shape != (t.sync_grid.size,):
        raise ProfileError(f"pp_sync: shape {t.pp_sync.shape} does not match grids")
    # sync may be zero (ideal link) but never negative
    if np.any(t.tp_sync < 0) or np.any(t.pp_sync < 0) or not np.all(np.isfinite(t.tp_sync)):
        raise ProfileError("sync times must be finite and >= 0")
    if "model" not in t.meta or "hidden_size" not in t.meta["model"]:
        raise ProfileError("meta.model.hidden_size is required")


# -- synthesis ---------------------------------------------------------------

def _roofline(flops, nbytes, params: CostParams, tp: int, kernels_launched: int):
    t = np.maximum(flops / params.flops_per_sec_per_gpu, nbytes / params.bytes_per_sec_hbm)
    return t / tp + kernels_launched * params.kernel_launch_overhead_sec


def synth_tp_sync(params: CostParams, tp: int, nbytes):
    if tp == 1:
        return np.zeros_like(np.asarray(nbytes, dtype=float))
    # ring all-reduce
    return params.tp_latency_sec + 2.0 * (tp - 1) / tp * np.asarray(nbytes, dtype=float) / params.tp_link_bytes_per_sec


def synth_pp_sync(params: CostParams, nbytes):
    return params.pp_latency_sec + np.asarray(nbytes, dtype=float) / params.pp_link_bytes_per_sec


def synth_profile(model: ModelSpec, params: CostParams, grid: GridSpec | None = None,
                  act_bytes: int = 2) -> ProfileTable:
    """Fill a profile table from a roofline model of one layer per phase.

    Each component costs ``max(flops / flop_rate, bytes / hbm_rate) / tp``
    plus a per-kernel launch overhead.
    """
    grid = grid or GridSpec()
    b = grid.batch_grid()
    c = grid.context_grid()
    n = grid.size_grid()
    sb = grid.sync_grid()
    h = float(model.hidden_size)
    B, C = np.meshgrid(b, c, indexing="ij")

    attn, ffn = {}, {}
    for phase in PHASES:
        q_tokens = C if phase == "encode" else np.ones_like(C)
        # QK^T and PV: 2 * (2 * q * ctx * h) flops per sequence
        a_flops = 4.0 * B * q_tokens * C * h
        if phase == "encode":
            a_bytes = 4.0 * B * C * h * act_bytes            # read Q, K, V; write context
        else:
            a_bytes = 2.0 * B * C * h * act_bytes + 2.0 * B * h * act_bytes  # KV cache scan
        p_layer = float(model.layer_params(phase))
        f_flops = 2.0 * p_layer * n
        f_bytes = p_layer * model.bytes_per_param + (4.0 * h + 2.0 * model.ffn_dim) * n * act_bytes
        attn[phase] = np.stack([_roofline(a_flops, a_bytes, params, tp, 2) for tp in grid.tp_degrees])
        ffn[phase] = np.stack([_roofline(f_flops, f_bytes, params, tp, 6) for tp in grid.tp_degrees])

    tp_sync = np.stack([synth_tp_sync(params, tp, sb) for tp in grid.tp_degrees])
    meta = {
        "model": model.to_dict(),
        "params": params.to_dict(),
        "act_bytes": act_bytes,
        "sync_per_layer": dict(DEFAULT_SYNC_PER_LAYER),
        "overlap_comm": False,
        "source": "synthetic-roofline",
    }
    return ProfileTable(tuple(grid.tp_degrees), b, c, n, sb, attn, ffn, tp_sync, synth_pp_sync(params, sb), meta)


# -- lookups -----------------------------------------------------------------

def _check_range(name: str, value: float, grid: np.ndarray) -> None:
    if not grid[0] - 1e-9 <= value <= grid[-1] + 1e-9:
        raise OutOfRangeError(f"{name}={value:g} outside profiled range [{grid[0]:g}, {grid[-1]:g}]")


def _clamped(value: float, grid: np.ndarray) -> float:
    return min(max(value, float(grid[0])), float(grid[-1]))


def query_tokens(phase: str, context_tokens: float) -> float:
    return context_tokens if phase == "encode" else 1.0


def attention_time(table: ProfileTable, phase: str, tp_degree: int, batch: float, context_tokens: float) -> float:
    _check_range("batch", batch, table.batch_grid)
    _check_range("context_tokens", context_tokens, table.context_grid)
    i = table.tp_index(tp_degree)
    return kernels.interp2(table.batch_grid, table.context_grid, table.attn[phase][i],
                           _clamped(batch, table.batch_grid), _clamped(context_tokens, table.context_grid))


def ffn_time(table: ProfileTable, phase: str, tp_degree: int, input_size: float) -> float:
    _check_range("input_size", input_size, table.size_grid)
    i = table.tp_index(tp_degree)
    return kernels.interp1(table.size_grid, table.ffn[phase][i], _clamped(input_size, table.size_grid))


def tp_sync_time(table: ProfileTable, tp_degree: int, nbytes: float) -> float:
    if tp_degree == 1:
        return 0.0
    _check_range("sync_bytes", nbytes, table.sync_grid)
    return kernels.interp1(table.sync_grid, table.tp_sync[table.tp_index(tp_degree)], nbytes)


def pp_sync_time(table: ProfileTable, nbytes: float) -> float:
    _check_range("sync_bytes", nbytes, table.sync_grid)
    return kernels.interp1(table.sync_grid, table.pp_sync, nbytes)


def activation_bytes(table: ProfileTable, phase: str, batch: float, context_tokens: float) -> float:
    return batch * query_tokens(phase, context_tokens) * table.hidden_size * table.act_bytes


def layer_compute_time(table: ProfileTable, phase: str, tp_degree: int, batch: float, context_tokens: float) -> float:
    """Attention plus the rest of the layer, without tensor-parallel synchronization."""
    size = batch * query_tokens(phase, context_tokens)
    return (attention_time(table, phase, tp_degree, batch, context_tokens)
            + ffn_time(table, phase, tp_degree, size))


def layer_time(table: ProfileTable, phase: str, tp_degree: int, batch: float, context_tokens: float) -> float:
    """Time of one layer of ``phase`` including its tensor-parallel all-reduces."""
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    compute = layer_compute_time(table, phase, tp_degree, batch, context_tokens)
    if tp_degree == 1:
        return compute
    nbytes = activation_bytes(table, phase, batch, context_tokens)
    return compute + table.sync_per_layer[phase] * tp_sync_time(table, tp_degree, nbytes)


def stage_time(table: ProfileTable, layers_on_stage: int, phase: str, tp_degree: int,
               batch: float, context_tokens: float) -> float:
    """One pipeline stage: its layers back to back, then one activation handoff."""
    handoff = pp_sync_time(table, activation_bytes(table, phase, batch, context_tokens))
    if layers_on_stage == 0:
        return handoff
    compute = layers_on_stage * layer_time(table, phase, tp_degree, batch, context_tokens)
    if table.overlap_comm:
        return max(compute, handoff)
    return compute + handoff


def kv_cache_bytes(model: ModelSpec, layers: int, tokens: float, batch: float, tp_degree: int = 1) -> float:
    """Key + value cache for ``layers`` layers holding ``tokens`` per query."""
    return 2.0 * layers * model.hidden_size * model.bytes_per_param * tokens * batch / tp_degree


# -- serialization -----------------------------------------------------------

def _to_json_obj(t: ProfileTable) -> dict:
    def flat(a: np.ndarray) -> dict:
        return {"shape": list(a.shape), "data": [float(x) for x in a.ravel(order="C")]}

    return {
        "format": PROFILE_FORMAT,
        "meta": dict(t.meta),
        "tp_degrees": list(t.tp_degrees),
        "batch_grid": [float(x) for x in t.batch_grid],
        "context_grid": [float(x) for x in t.context_grid],
        "size_grid": [float(x) for x in t.size_grid],
        "sync_grid": [float(x) for x in t.sync_grid],
        "attn": {p: flat(t.attn[p]) for p in PHASES},
        "ffn": {p: flat(t.ffn[p]) for p in PHASES},
        "tp_sync": flat(t.tp_sync),
        "pp_sync": flat(t.pp_sync),
    }


def profile_to_dict(table: ProfileTable) -> dict:
    return _to_json_obj(table)


def profile_from_dict(d: Mapping, source: str = "profile") -> ProfileTable:
    def need(obj, key, where):
        if key not in obj:
            raise ProfileError(f"{source}: missing field {where}{key!r}")
        return obj[key]

    def arr(obj, where):
        shape = need(obj, "shape", where + ".")
        data = need(obj, "data", where + ".")
        try:
            return np.asarray(data, dtype=float).reshape(shape)
        except (ValueError, TypeError) as exc:
            raise ProfileError(f"{source}: field {where}: {exc}") from None

    if d.get("format") != PROFILE_FORMAT:
        raise ProfileError(f"{source}: field 'format' must be {PROFILE_FORMAT!r}, got {d.get('format')!r}")
    try:
        return ProfileTable(
            tuple(int(x) for x in need(d, "tp_degrees", "")),
            np.asarray(need(d, "batch_grid", ""), dtype=float),
            np.asarray(need(d, "context_grid", ""), dtype=float),
            np.asarray(need(d, "size_grid", ""), dtype=float),
            np.asarray(need(d, "sync_grid", ""), dtype=float),
            {p: arr(need(need(d, "attn", ""), p, "attn."), f"attn.{p}") for p in PHASES},
            {p: arr(need(need(d, "ffn", ""), p, "ffn."), f"ffn.{p}") for p in PHASES},
            arr(need(d, "tp_sync", ""), "tp_sync"),
            arr(need(d, "pp_sync", ""), "pp_sync"),
            dict(need(d, "meta", "")),
        )
    except ProfileError as exc:
        msg = str(exc)
        raise ProfileError(msg if msg.startswith(source) else f"{source}: {msg}") from None


def save_profile(table: ProfileTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_to_json_obj(table), fh)


def load_profile(path: str | Path) -> ProfileTable:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ProfileError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return profile_from_dict(d, str(path))


def constant_profile(model: ModelSpec, per_token_layer_sec: float, grid: GridSpec | None = None,
                     attn_fraction: float = 0.5) -> ProfileTable:
    """Table whose layer time is exactly ``per_token_layer_sec * batch * query_tokens``.

    Attention and the rest of the layer are linear through the origin and all
    synchronization is free, so stage times scale exactly with batch size.
    Useful for checking pipeline arithmetic.
    """
    grid = grid or GridSpec(tp_degrees=(1,))
    b, c, n, sb = grid.batch_grid(), grid.context_grid(), grid.size_grid(), grid.sync_grid()
    B, C = np.meshgrid(b, c, indexing="ij")
    k_attn = per_token_layer_sec * attn_fraction
    k_ffn = per_token_layer_sec * (1.0 - attn_fraction)
    attn = {"encode": np.stack([k_attn * B * C for _ in grid.tp_degrees]),
            "decode": np.stack([k_attn * B * np.ones_like(C) for _ in grid.tp_degrees])}
    ffn = {p: np.stack([k_ffn * n for _ in grid.tp_degrees]) for p in PHASES}
    zeros_tp = np.zeros((len(grid.tp_degrees), sb.size))
    meta = {"model": model.to_dict(), "act_bytes": 2, "sync_per_layer": dict(DEFAULT_SYNC_PER_LAYER),
            "overlap_comm": False, "source": "constant"}
    return ProfileTable(tuple(grid.tp_degrees), b, c, n, sb, attn, ffn, zeros_tp, np.zeros(sb.size), meta)
