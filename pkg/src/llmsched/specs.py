"""Model, cluster, and hardware-parameter specifications plus their JSON forms."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class SpecError(ValueError):
    """Malformed or inconsistent model, cluster or parameter definition."""


def _read_json(path: str | Path, expected_format: str | None = None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise SpecError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if expected_format and data.get("format") != expected_format:
        raise SpecError(f"{path}: field 'format' must be {expected_format!r}, got {data.get('format')!r}")
    return data


def _from_fields(cls, data: Mapping[str, Any], source: str):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in data.items() if k in names}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SpecError(f"{source}: {exc}") from None


@dataclass(frozen=True)
class ModelSpec:
    """Transformer dimensions. Zero encoder layers means decoder-only."""

    name: str
    n_encoder_layers: int
    n_decoder_layers: int
    hidden_size: int
    n_heads: int
    bytes_per_param: int = 2
    ffn_hidden: int = 0  # 0 -> 4 * hidden_size

    def __post_init__(self):
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise SpecError("layer counts must be >= 0")
        if self.n_encoder_layers == 0 and self.n_decoder_layers == 0:
            raise SpecError("model needs at least one layer")
        if self.hidden_size <= 0 or self.n_heads <= 0 or self.hidden_size % self.n_heads:
            raise SpecError(f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}")
        if self.bytes_per_param <= 0:
            raise SpecError("bytes_per_param must be positive")

    @property
    def decoder_only(self) -> bool:
        return self.n_encoder_layers == 0

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden or 4 * self.hidden_size

    def layer_params(self, phase: str) -> int:
        """Parameters of the layer type that runs ``phase``.

        Encoder-decoder decoder layers carry an extra cross-attention block.
        """
        h = self.hidden_size
        base = 4 * h * h + 2 * h * self.ffn_dim
        if phase == "decode" and not self.decoder_only:
            return base + 4 * h * h
        return base

    @property
    def encode_layer_count(self) -> int:
        return self.n_decoder_layers if self.decoder_only else self.n_encoder_layers

    @property
    def params_total(self) -> int:
        enc = 0 if self.decoder_only else self.n_encoder_layers * self.layer_params("encode")
        return enc + self.n_decoder_layers * self.layer_params("decode")

    def to_dict(self) -> dict:
        return {"format": "model-v1", **asdict(self)}

    @classmethod
    def from_dict(cls, data: Mapping, source: str = "model") -> "ModelSpec":
        return _from_fields(cls, data, source)

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        return cls.from_dict(_read_json(path, "model-v1"), str(path))


@dataclass(frozen=True)
class ClusterSpec:
    n_gpus: int
    mem_per_gpu: float  # bytes
    gpus_per_node: int = 8

    def __post_init__(self):
        if self.n_gpus < 1:
            raise SpecError("n_gpus must be >= 1")
        if self.mem_per_gpu <= 0:
            raise SpecError("mem_per_gpu must be positive")
        if self.gpus_per_node < 1:
            raise SpecError("gpus_per_node must be >= 1")

    def to_dict(self) -> dict:
        return {"format": "cluster-v1", **asdict(self)}

    @classmethod
    def from_dict(cls, data: Mapping, source: str = "cluster") -> "ClusterSpec":
        return _from_fields(cls, data, source)

    @classmethod
    def load(cls, path: str | Path) -> "ClusterSpec":
        return cls.from_dict(_read_json(path, "cluster-v1"), str(path))


@dataclass(frozen=True)
class CostParams:
    """Scalar hardware rates feeding the synthetic roofline profiler."""

    flops_per_sec_per_gpu: float
    bytes_per_sec_hbm: float
    tp_link_bytes_per_sec: float
    tp_latency_sec: float
    pp_link_bytes_per_sec: float
    pp_latency_sec: float
    kernel_launch_overhead_sec: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise SpecError(f"CostParams.{f.name} must be strictly positive")

    @classmethod
    def a40(cls) -> "CostParams":
        # effective (not peak) FP16 rates for an A40 node on PCIe 4.0
        return cls(1.2e14, 6.0e11, 2.2e10, 1.5e-5, 2.2e10, 2.0e-5, 6.0e-6)

    @classmethod
    def a100(cls) -> "CostParams":
        return cls(2.5e14, 1.6e12, 2.0e11, 8.0e-6, 2.0e11, 1.0e-5, 5.0e-6)

    def to_dict(self) -> dict:
        return {"format": "cost-params-v1", **asdict(self)}

    @classmethod
    def from_dict(cls, data: Mapping, source: str = "params") -> "CostParams":
        return _from_fields(cls, data, source)

    @classmethod
    def load(cls, path: str | Path) -> "CostParams":
        return cls.from_dict(_read_json(path, "cost-params-v1"), str(path))


MODELS = {
    "opt-13b": ModelSpec("opt-13b", 0, 40, 5120, 40),
    "gpt3-39b": ModelSpec("gpt3-39b", 0, 48, 8192, 64),
    "gpt3-101b": ModelSpec("gpt3-101b", 0, 80, 10240, 80),
    "gpt3-175b": ModelSpec("gpt3-175b", 0, 96, 12288, 96),
    "gpt3-341b": ModelSpec("gpt3-341b", 0, 120, 15360, 120),
    # T5-11B: 24+24 layers, narrow hidden, very wide FFN
    "t5-11b": ModelSpec("t5-11b", 24, 24, 1024, 128, ffn_hidden=65536),
}


def resolve_model(name_or_path: str) -> ModelSpec:
    if name_or_path in MODELS:
        return MODELS[name_or_path]
    return ModelSpec.load(name_or_path)
