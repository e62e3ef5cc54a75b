"""Schedule configurations, GPU/layer allocation policies, derived batch sizes, memory checks."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .cost_model import ProfileTable, kv_cache_bytes
from .seqdist import (LengthPMF, completion_distribution, expected_completion_fraction,
                      mean_length, resident_pmf)
from .specs import ClusterSpec, ModelSpec, SpecError

STRATEGIES = ("RRA", "WAA-C", "WAA-M")
SCHEDULE_FORMAT = "schedule-v1"


class InfeasibleError(RuntimeError):
    """No schedule satisfies the constraints; ``detail`` carries the evidence."""

    def __init__(self, message: str, detail=None):
        super().__init__(message)
        self.detail = detail


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class PartialTpSpec:
    """Tensor parallelism of ``degree`` applied to the first ``applied_gpus`` GPUs of a pipeline."""

    degree: int = 1
    applied_gpus: int = 0

    def __post_init__(self):
        if self.degree < 1:
            raise SpecError("tp degree must be >= 1")
        if self.applied_gpus < 0:
            raise SpecError("applied_gpus must be >= 0")
        if self.degree == 1 and self.applied_gpus:
            object.__setattr__(self, "applied_gpus", 0)
        if self.applied_gpus % self.degree:
            raise SpecError(f"applied_gpus {self.applied_gpus} not a multiple of degree {self.degree}")

    @property
    def groups(self) -> int:
        return self.applied_gpus // self.degree if self.degree > 1 else 0

    def clipped(self, n_gpus: int) -> "PartialTpSpec":
        """Largest spec of the same degree that fits on ``n_gpus`` GPUs."""
        if self.degree == 1:
            return self
        a = min(self.applied_gpus, n_gpus - n_gpus % self.degree)
        return PartialTpSpec(self.degree, a) if a else PartialTpSpec()


@dataclass(frozen=True)
class Stage:
    """One pipeline stage: a GPU (or a tensor-parallel group) and the layers it runs."""

    gpus: tuple[int, ...]
    tp_degree: int
    encode_layers: int      # layers executed when this stage encodes
    decode_layers: int      # layers executed per decode iteration
    layers: tuple[tuple[str, tuple[int, ...]], ...] = ()   # (layer type, indices) held in memory
    side: str = "both"      # "both" (RRA), "encode" or "decode" (WAA)


@dataclass(frozen=True)
class ScheduleConfig:
    strategy: str
    b_e: int
    b_d: int
    n_d: int = 0              # RRA: decode iterations per phase
    n_micro: int = 1          # WAA: decoder micro-batches M; b_m = b_d / M
    tp: PartialTpSpec = field(default_factory=PartialTpSpec)
    n_enc_gpus: int = 0       # WAA only
    stages: tuple[Stage, ...] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SpecError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.b_e < 1 or self.b_d < 1:
            raise SpecError("batch sizes must be >= 1")
        if self.is_rra and self.n_d < 1:
            raise SpecError("RRA needs n_d >= 1")
        if not self.is_rra and not 1 <= self.n_micro <= self.b_d:
            raise SpecError(f"micro-batch count {self.n_micro} must lie in [1, b_d={self.b_d}]")

    @property
    def is_rra(self) -> bool:
        return self.strategy == "RRA"

    @property
    def b_m(self) -> float:
        return self.b_d / self.n_micro

    @property
    def encode_stages(self) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if s.side in ("both", "encode"))

    @property
    def decode_stages(self) -> tuple[Stage, ...]:
        return tuple(s for s in self.stages if s.side in ("both", "decode"))

    @property
    def allocation(self) -> dict[int, list[tuple[str, tuple[int, ...]]]]:
        out: dict[int, list] = {}
        for st in self.stages:
            for g in st.gpus:
                out[g] = list(st.layers)
        return dict(sorted(out.items()))

    def summary(self) -> dict:
        d = {"strategy": self.strategy, "b_e": self.b_e, "b_d": self.b_d,
             "tp_degree": self.tp.degree, "tp_applied_gpus": self.tp.applied_gpus}
        if self.is_rra:
            d["n_d"] = self.n_d
        else:
            d.update(n_micro=self.n_micro, b_m=self.b_m, n_enc_gpus=self.n_enc_gpus)
        return d


# -- layer splitting ---------------------------------------------------------

def split_layers(n_layers: int, n_parts: int) -> list[range]:
    """Consecutive, balanced split; the first ``n_layers % n_parts`` parts get one extra."""
    base, extra = divmod(n_layers, n_parts)
    out, start = [], 0
    for i in range(n_parts):
        k = base + (1 if i < extra else 0)
        out.append(range(start, start + k))
        start += k
    return out


def _pipeline(gpu_ids: Sequence[int], tp: PartialTpSpec, enc_layers: int, dec_layers: int,
              decoder_only: bool, side: str) -> tuple[Stage, ...]:
    tp = tp.clipped(len(gpu_ids))
    groups: list[tuple[int, ...]] = []
    i = 0
    for _ in range(tp.groups):
        groups.append(tuple(gpu_ids[i:i + tp.degree]))
        i += tp.degree
    groups.extend((g,) for g in gpu_ids[i:])
    enc_split = split_layers(enc_layers, len(groups))
    dec_split = split_layers(dec_layers, len(groups))
    stages = []
    for g, er, dr in zip(groups, enc_split, dec_split):
        d = len(g)
        if decoder_only:
            # encode and decode reuse the same decoder layers
            held = (("decoder", tuple(dr)),) if len(dr) else ()
            n_enc = len(dr) if side in ("both", "encode") else 0
            n_dec = len(dr) if side in ("both", "decode") else 0
        else:
            held = tuple((name, tuple(r)) for name, r in (("encoder", er), ("decoder", dr)) if len(r))
            n_enc, n_dec = len(er), len(dr)
        stages.append(Stage(g, d, n_enc, n_dec, held, side))
    return tuple(stages)


def rra_stages(model: ModelSpec, n_gpus: int, tp: PartialTpSpec = PartialTpSpec()) -> tuple[Stage, ...]:
    enc = 0 if model.decoder_only else model.n_encoder_layers
    return _pipeline(list(range(n_gpus)), tp, enc, model.n_decoder_layers, model.decoder_only, "both")


def waa_stages(model: ModelSpec, n_enc: int, n_dec: int, tp: PartialTpSpec = PartialTpSpec(),
               enc_tp: PartialTpSpec = PartialTpSpec()) -> tuple[Stage, ...]:
    """Encoder-side pipeline on GPUs ``[0, n_enc)``, decoder side on the rest.

    A decoder-only model keeps a full copy of its layers on each side; an
    encoder-decoder model places encoder layers on one side and decoder layers
    on the other.
    """
    if n_enc < 1 or n_dec < 1:
        raise InfeasibleError("WAA needs at least one encode and one decode GPU")
    ids = list(range(n_enc + n_dec))
    if model.decoder_only:
        e = _pipeline(ids[:n_enc], enc_tp, 0, model.n_decoder_layers, True, "encode")
        d = _pipeline(ids[n_enc:], tp, 0, model.n_decoder_layers, True, "decode")
    else:
        e = _pipeline(ids[:n_enc], enc_tp, model.n_encoder_layers, 0, False, "encode")
        d = _pipeline(ids[n_enc:], tp, 0, model.n_decoder_layers, False, "decode")
    return e + d


def rra_allocate(model: ModelSpec, cluster: ClusterSpec) -> dict[int, list[tuple[str, tuple[int, ...]]]]:
    """Consecutive encoder and decoder layer slices for every GPU."""
    stages = rra_stages(model, cluster.n_gpus)
    return {st.gpus[0]: list(st.layers) for st in stages}


def waa_allocate_compute(c_e: float, c_d: float, n: int) -> tuple[int, int]:
    """GPUs per side in proportion to encode and decode compute time."""
    if n < 2:
        raise InfeasibleError("WAA requires at least two GPUs")
    if not (c_e > 0 and c_d > 0):
        raise ValueError("c_e and c_d must be positive")
    n_enc = min(max(round_half_up(n * c_e / (c_e + c_d)), 1), n - 1)
    return n_enc, n - n_enc


def waa_allocate_memory(mem_e: Callable[[int], float], mem_d: Callable[[int], float], n: int,
                        capacity: float | None = None) -> tuple[int, int]:
    """Split minimizing the per-GPU memory gap between the two sides.

    ``mem_e(k)`` / ``mem_d(k)`` give the peak per-GPU bytes when a side owns
    ``k`` GPUs. Every split is enumerated; ties go to more decoder GPUs.
    """
    if n < 2:
        raise InfeasibleError("WAA requires at least two GPUs")
    rows = []
    for n_enc in range(1, n):
        e, d = mem_e(n_enc), mem_d(n - n_enc)
        rows.append((n_enc, e, d))
    if capacity is not None:
        fitting = [r for r in rows if max(r[1], r[2]) <= capacity]
        if not fitting:
            raise InfeasibleError("no encode/decode split fits in GPU memory",
                                  [{"n_enc": a, "enc_peak": e, "dec_peak": d} for a, e, d in rows])
        rows = fitting
    best = min(rows, key=lambda r: (abs(r[1] - r[2]), r[0]))
    return best[0], n - best[0]


# -- derived batch sizes -----------------------------------------------------

def rra_completion_fraction(pd: LengthPMF, n_d: int) -> float:
    """Steady-state fraction of the decode batch finishing in one phase.

    Uses the phase-boundary batch mix (length-biased), which equals
    ``1 / E[ceil(S / n_d)]``.
    """
    return expected_completion_fraction(completion_distribution(resident_pmf(pd, n_d), n_d))


def derive_rra_batches(b_d: int, pd: LengthPMF, n_d: int) -> tuple[int, int]:
    if b_d < 1:
        raise ValueError("b_d must be >= 1")
    f = rra_completion_fraction(pd, n_d)
    return max(1, round_half_up(b_d * f)), b_d


def rra_decode_batch(b_e: int, pd: LengthPMF, n_d: int) -> int:
    """Inverse of :func:`derive_rra_batches`: the decode batch sustained by ``b_e`` admissions per phase."""
    return max(1, round_half_up(b_e / rra_completion_fraction(pd, n_d)))


def derive_waa_batches(b_e: int, pd: LengthPMF) -> int:
    if b_e < 1:
        raise ValueError("b_e must be >= 1")
    return b_e * max(1, round_half_up(mean_length(pd)))


# -- memory ------------------------------------------------------------------

@dataclass
class GpuMemory:
    gpu: int
    weights: float
    kv_cache: float
    activations: float
    capacity: float

    @property
    def total(self) -> float:
        return self.weights + self.kv_cache + self.activations

    @property
    def fits(self) -> bool:
        return self.total <= self.capacity


@dataclass
class MemoryReport:
    per_gpu: list[GpuMemory]

    @property
    def fits(self) -> bool:
        return all(g.fits for g in self.per_gpu)

    @property
    def violations(self) -> list[int]:
        return [g.gpu for g in self.per_gpu if not g.fits]

    @property
    def total_weights(self) -> float:
        return sum(g.weights for g in self.per_gpu)

    @property
    def peak(self) -> float:
        return max(g.total for g in self.per_gpu)

    def to_dict(self) -> dict:
        return {"fits": self.fits, "violations": self.violations,
                "per_gpu": [{**asdict(g), "total": g.total} for g in self.per_gpu]}


def _stage_memory(st: Stage, model: ModelSpec, batch_kv: float, kv_tokens: float,
                  act_batch_tokens: float, act_bytes: int, capacity: float) -> list[GpuMemory]:
    params = 0
    dec_layers = 0
    for name, idx in st.layers:
        phase = "encode" if name == "encoder" else "decode"
        params += len(idx) * model.layer_params(phase)
        if name == "decoder":
            dec_layers += len(idx)
    weights = params * model.bytes_per_param / st.tp_degree
    kv = kv_cache_bytes(model, dec_layers, kv_tokens, batch_kv, st.tp_degree)
    # working set of one stage: hidden states plus the widest intermediate
    act = act_batch_tokens * (2 * model.hidden_size + model.ffn_dim) * act_bytes / st.tp_degree
    return [GpuMemory(g, weights, kv, act, capacity) for g in st.gpus]


def memory_check(config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec,
                 table: ProfileTable | None, max_context: tuple[int, int] | int,
                 act_bytes: int | None = None) -> MemoryReport:
    """Worst-case per-GPU memory: weights, KV cache at full context, activation headroom.

    ``max_context`` is ``(max_input, max_output)`` tokens, or a single total.
    """
    if act_bytes is None:
        act_bytes = table.act_bytes if table is not None else 2
    if isinstance(max_context, tuple):
        max_in, max_out = max_context
    else:
        max_in, max_out = max_context, 0
    total_ctx = max_in + max_out
    per_gpu: list[GpuMemory] = []
    if config.is_rra:
        n_mb = max(1, min(len(config.stages), config.b_e))
        act_tokens = max(config.b_e / n_mb * max_in, config.b_d)
        for st in config.stages:
            per_gpu += _stage_memory(st, model, config.b_d, total_ctx, act_tokens, act_bytes, cluster.mem_per_gpu)
    else:
        for st in config.stages:
            if st.side == "encode":
                # decoder-only: encode side builds KV for the prompt before handing it over
                kv_batch = config.b_e if model.decoder_only else 0
                per_gpu += _stage_memory(st, model, kv_batch, max_in, config.b_e * max_in,
                                         act_bytes, cluster.mem_per_gpu)
            else:
                per_gpu += _stage_memory(st, model, config.b_d, total_ctx, max(config.b_m, 1.0),
                                         act_bytes, cluster.mem_per_gpu)
    per_gpu.sort(key=lambda g: g.gpu)
    return MemoryReport(per_gpu)


# -- construction helpers ----------------------------------------------------

def make_rra_config(model: ModelSpec, cluster: ClusterSpec, pd: LengthPMF, b_e: int, n_d: int,
                    tp: PartialTpSpec = PartialTpSpec(), b_d: int | None = None) -> ScheduleConfig:
    if b_d is None:
        b_d = rra_decode_batch(b_e, pd, n_d)
    return ScheduleConfig("RRA", b_e, b_d, n_d=n_d, tp=tp.clipped(cluster.n_gpus),
                          stages=rra_stages(model, cluster.n_gpus, tp))


def waa_compute_costs(model: ModelSpec, table: ProfileTable, b_e: int, b_d: int,
                      mean_in: float, mean_ctx: float) -> tuple[float, float]:
    """Single-GPU encode time of ``b_e`` and one decode iteration of ``b_d``, whole model."""
    from .cost_model import layer_time
    bmax = table.max_batch
    c_e = model.encode_layer_count * layer_time(table, "encode", 1, min(b_e, bmax), mean_in)
    c_d = model.n_decoder_layers * layer_time(table, "decode", 1, min(max(b_d, 1), bmax),
                                              min(mean_ctx, table.max_context))
    return c_e, c_d


def make_waa_config(model: ModelSpec, cluster: ClusterSpec, table: ProfileTable, pe: LengthPMF,
                    pd: LengthPMF, b_e: int, n_micro: int, strategy: str = "WAA-C",
                    tp: PartialTpSpec = PartialTpSpec(), n_enc: int | None = None,
                    enc_tp: PartialTpSpec = PartialTpSpec()) -> ScheduleConfig:
    n = cluster.n_gpus
    if n < 2:
        raise InfeasibleError("WAA requires at least two GPUs")
    b_d = derive_waa_batches(b_e, pd)
    n_micro = min(n_micro, b_d)
    if n_enc is None:
        if strategy == "WAA-M":
            n_enc = _waa_memory_split(model, cluster, table, pe, pd, b_e, b_d, n_micro, tp, enc_tp)
        else:
            mean_ctx = mean_length(pe) + mean_length(pd) / 2
            c_e, c_d = waa_compute_costs(model, table, b_e, b_d, mean_length(pe), mean_ctx)
            n_enc, _ = waa_allocate_compute(c_e, c_d, n)
    n_dec = n - n_enc
    tp = tp.clipped(n_dec)
    return ScheduleConfig(strategy, b_e, b_d, n_micro=n_micro, tp=tp, n_enc_gpus=n_enc,
                          stages=waa_stages(model, n_enc, n_dec, tp, enc_tp))


def _waa_memory_split(model, cluster, table, pe, pd, b_e, b_d, n_micro, tp, enc_tp) -> int:
    n = cluster.n_gpus
    ctx = (pe.max_len, pd.max_len)

    def side_peak(n_enc: int, side: str) -> float:
        cfg = ScheduleConfig("WAA-M", b_e, b_d, n_micro=n_micro, tp=tp.clipped(n - n_enc), n_enc_gpus=n_enc,
                             stages=waa_stages(model, n_enc, n - n_enc, tp, enc_tp))
        rep = memory_check(cfg, model, cluster, table, ctx)
        ids = {g for st in cfg.stages if st.side == side for g in st.gpus}
        return max(g.total for g in rep.per_gpu if g.gpu in ids)

    n_enc, _ = waa_allocate_memory(lambda k: side_peak(k, "encode"),
                                   lambda k: side_peak(n - k, "decode"), n)
    return n_enc


# -- schedule files ----------------------------------------------------------

def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_to_dict(config: ScheduleConfig) -> dict:
    return {
        "strategy": config.strategy, "b_e": config.b_e, "b_d": config.b_d, "n_d": config.n_d,
        "n_micro": config.n_micro, "n_enc_gpus": config.n_enc_gpus,
        "tp": {"degree": config.tp.degree, "applied_gpus": config.tp.applied_gpus},
        "stages": [{"gpus": list(s.gpus), "tp_degree": s.tp_degree, "encode_layers": s.encode_layers,
                    "decode_layers": s.decode_layers, "side": s.side,
                    "layers": [[name, list(idx)] for name, idx in s.layers]} for s in config.stages],
    }


def config_from_dict(d: Mapping, source: str = "schedule") -> ScheduleConfig:
    try:
        stages = tuple(Stage(tuple(s["gpus"]), int(s["tp_degree"]), int(s["encode_layers"]),
                             int(s["decode_layers"]),
                             tuple((name, tuple(idx)) for name, idx in s.get("layers", [])),
                             s.get("side", "both")) for s in d["stages"])
        return ScheduleConfig(d["strategy"], int(d["b_e"]), int(d["b_d"]), n_d=int(d.get("n_d", 0)),
                              n_micro=int(d.get("n_micro", 1)),
                              tp=PartialTpSpec(int(d["tp"]["degree"]), int(d["tp"]["applied_gpus"])),
                              n_enc_gpus=int(d.get("n_enc_gpus", 0)), stages=stages)
    except KeyError as exc:
        raise SpecError(f"{source}: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise SpecError(f"{source}: {exc}") from None


def save_schedule(path: str | Path, config: ScheduleConfig, model: ModelSpec, cluster: ClusterSpec,
                  provenance: Mapping | None = None, estimate: Mapping | None = None) -> None:
    doc = {"format": SCHEDULE_FORMAT, "config": config_to_dict(config), "model": model.to_dict(),
           "cluster": cluster.to_dict(), "provenance": dict(provenance or {})}
    if estimate is not None:
        doc["estimate"] = dict(estimate)
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")


def load_schedule(path: str | Path) -> tuple[ScheduleConfig, ModelSpec, ClusterSpec, dict]:
    from .specs import _read_json
    d = _read_json(path, SCHEDULE_FORMAT)
    for key in ("config", "model", "cluster"):
        if key not in d:
            raise SpecError(f"{path}: missing field {key!r}")
    return (config_from_dict(d["config"], str(path)), ModelSpec.from_dict(d["model"], f"{path}: model"),
            ClusterSpec.from_dict(d["cluster"], f"{path}: cluster"), d)


def with_batches(config: ScheduleConfig, **changes) -> ScheduleConfig:
    return replace(config, **changes)
