"""Analytical latency, throughput, and memory model of batched generation.

The model splits one decode iteration into a context-independent part
(weight traffic vs. compute, whichever binds) and a context-dependent part
(KV traffic for attention, which is memory bound), plus the cost of format
conversion: quantizing the one new token per layer and dequantizing the
streamed context. A pipelined engine hides conversion behind the attention
reads and only the overhang is exposed; a serial engine pays it in full.

Capacity accounting charges quantized caches their dense-plus-outlier bits
and the 96 scale bits per token vector; a 16-bit setting carries no scale
records and must reproduce the half-precision rows exactly. Out-of-memory
is a closed form: the cache fits while stored tokens stay within
(capacity - weights) / bytes-per-token; the first count past that fails.

All numbers are model outputs, not measurements; the presets are round
figures representative of a serving-class accelerator and a 7B-parameter
decoder, chosen so relative claims (traffic ratios, capacity boundaries)
are easy to check by hand.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError

MODES = ("fp16", "oaken", "weight4")

SCALE_BITS_PER_TOKEN = 96  # three (min, max) fp16 pairs per token vector


@dataclasses.dataclass(frozen=True)
class AcceleratorConfig:
    """Serving device: bandwidth, compute, and cache capacity."""

    memory_bandwidth: float  # bytes/s
    num_cores: int
    macs_per_core: int
    frequency_hz: float
    capacity_bytes: float

    def __post_init__(self) -> None:
        for name in (
            "memory_bandwidth",
            "num_cores",
            "macs_per_core",
            "frequency_hz",
            "capacity_bytes",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def macs_per_second(self) -> float:
        return self.num_cores * self.macs_per_core * self.frequency_hz


@dataclasses.dataclass(frozen=True)
class EngineCoeffs:
    """Calibrated element rates of the on-chip conversion engine."""

    quantize_rate: float = 2.12e10  # elements/s, write path
    dequantize_rate: float = 1.3e13  # elements/s, fused into attention reads

    def __post_init__(self) -> None:
        if self.quantize_rate <= 0 or self.dequantize_rate <= 0:
            raise ConfigError("engine rates must be positive")


@dataclasses.dataclass(frozen=True)
class ModelShape:
    """Decoder shape: weight footprint and per-layer KV geometry."""

    weight_bytes: float  # half-precision weight footprint
    num_layers: int
    num_kv_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        if self.weight_bytes <= 0:
            raise ConfigError("weight_bytes must be positive")
        if min(self.num_layers, self.num_kv_heads, self.head_dim) < 1:
            raise ConfigError("model dimensions must be positive")

    @property
    def vector_len(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def params(self) -> float:
        return self.weight_bytes / 2.0


@dataclasses.dataclass(frozen=True)
class WorkloadConfig:
    """One serving scenario: model, batch, and sequence lengths."""

    model: ModelShape
    batch: int
    seq_input: int
    seq_output: int
    outlier_rate: float = 0.10  # combined inner+outer fraction

    def __post_init__(self) -> None:
        if self.batch < 1:
            raise ConfigError(f"batch must be at least 1, got {self.batch}")
        if self.seq_input < 0 or self.seq_output < 1:
            raise ConfigError("need seq_input >= 0 and seq_output >= 1")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigError("outlier_rate must be in [0, 1]")


@dataclasses.dataclass(frozen=True)
class ModeBits:
    """Bit widths one mode implies."""

    kv_traffic_bits: float  # per element moved during attention
    kv_capacity_bits: float  # per element stored, scale records included
    weight_bits: float


@dataclasses.dataclass(frozen=True)
class PhaseLatency:
    """Seconds per phase; totals over all decode iterations in results."""

    non_attention: float
    attention: float
    quantize: float
    dequantize: float
    exposed: float

    @property
    def total(self) -> float:
        return self.non_attention + self.attention + self.exposed


@dataclasses.dataclass(frozen=True)
class GenerationResult:
    """Aggregate outcome of one generation workload under one mode."""

    mode: str
    kv_bits: float
    weight_bits: float
    prefill_time: float
    decode: PhaseLatency
    throughput: float  # generated tokens/s, prefill excluded
    peak_memory_bytes: float
    oom: bool
    oom_context: int | None


def mode_bits(
    mode: str, workload: WorkloadConfig, kv_bits: float | None = None
) -> ModeBits:
    """Resolve a mode name (plus optional quantized-width override)."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "fp16":
        return ModeBits(16.0, 16.0, 16.0)
    if mode == "weight4":
        return ModeBits(16.0, 16.0, 4.0)
    traffic = (
        float(kv_bits)
        if kv_bits is not None
        else 4.0 + 8.0 * workload.outlier_rate
    )
    if not 0.0 < traffic <= 16.0:
        raise ConfigError(f"kv_bits {traffic} outside (0, 16]")
    capacity = traffic
    if traffic < 16.0:
        # Scale records only exist for a quantized cache; at 16 bits the
        # cache is raw half precision and must match the fp16 rows exactly.
        capacity += SCALE_BITS_PER_TOKEN / workload.model.vector_len
    return ModeBits(traffic, capacity, 16.0)


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


def _non_attention_time(
    accel: AcceleratorConfig, workload: WorkloadConfig, bits: ModeBits
) -> float:
    """Weight-bound or compute-bound time of everything but attention."""
    load = (
        workload.model.weight_bytes * (bits.weight_bits / 16.0)
        / accel.memory_bandwidth
    )
    compute = workload.batch * workload.model.params / accel.macs_per_second
    return max(load, compute)


def _kv_elements_per_token(workload: WorkloadConfig) -> float:
    # Keys and values across every layer for one token of one request.
    return workload.model.num_layers * 2.0 * workload.model.vector_len


def iteration_latency(
    accel: AcceleratorConfig,
    workload: WorkloadConfig,
    bits: ModeBits,
    engine: EngineCoeffs,
    context_len: float,
    pipelined: bool = True,
) -> PhaseLatency:
    """Latency of one decode iteration at a given context length."""
    if context_len < 0:
        raise ConfigError("context_len must be non-negative")
    non_attn = _non_attention_time(accel, workload, bits)
    elems = _kv_elements_per_token(workload)
    attention = (
        workload.batch * elems * context_len * bits.kv_traffic_bits / 8.0
        / accel.memory_bandwidth
    )
    t_q = workload.batch * elems / engine.quantize_rate
    t_dq = workload.batch * elems * context_len / engine.dequantize_rate
    if pipelined:
        exposed = max(0.0, t_q + t_dq - attention)
    else:
        exposed = t_q + t_dq
    return PhaseLatency(non_attn, attention, t_q, t_dq, exposed)


# ---------------------------------------------------------------------------
# Memory
# ---------------------------------------------------------------------------


def kv_bytes_per_token(workload: WorkloadConfig, bits: ModeBits) -> float:
    """Stored bytes of one token's KV across layers, per request."""
    return _kv_elements_per_token(workload) * bits.kv_capacity_bits / 8.0


def max_context_tokens(
    accel: AcceleratorConfig, workload: WorkloadConfig, bits: ModeBits
) -> int:
    """Largest per-request token count whose cache still fits.

    Storing t tokens costs weights + batch * t * kv_bytes_per_token; the
    first failing count is one past the returned value.
    """
    weights = workload.model.weight_bytes * (bits.weight_bits / 16.0)
    headroom = accel.capacity_bytes - weights
    if headroom < 0:
        return 0
    unit = workload.batch * kv_bytes_per_token(workload, bits)
    return int(headroom // unit)


def peak_memory_bytes(
    accel: AcceleratorConfig, workload: WorkloadConfig, bits: ModeBits
) -> float:
    """Footprint at full context, whether or not it fits."""
    weights = workload.model.weight_bytes * (bits.weight_bits / 16.0)
    tokens = workload.seq_input + workload.seq_output
    return weights + workload.batch * tokens * kv_bytes_per_token(workload, bits)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def run_generation(
    accel: AcceleratorConfig,
    workload: WorkloadConfig,
    mode: str,
    engine: EngineCoeffs | None = None,
    kv_bits: float | None = None,
    pipelined: bool = True,
) -> GenerationResult:
    """Model a full generation: prefill once, then seq_output decode steps.

    Decode iteration i runs at context length seq_input + i. Throughput
    counts generated tokens over decode time only; prefill is reported
    separately. An out-of-memory workload reports zero throughput and no
    phase times.
    """
    engine = engine or EngineCoeffs()
    bits = mode_bits(mode, workload, kv_bits)
    peak = peak_memory_bytes(accel, workload, bits)
    fits = max_context_tokens(accel, workload, bits)
    total_tokens = workload.seq_input + workload.seq_output
    if total_tokens > fits:
        return GenerationResult(
            mode=mode,
            kv_bits=bits.kv_traffic_bits,
            weight_bits=bits.weight_bits,
            prefill_time=0.0,
            decode=PhaseLatency(0.0, 0.0, 0.0, 0.0, 0.0),
            throughput=0.0,
            peak_memory_bytes=peak,
            oom=True,
            oom_context=fits + 1,
        )

    prefill = (
        workload.batch * workload.seq_input * workload.model.params
        / accel.macs_per_second
    )

    non_attn = _non_attention_time(accel, workload, bits)
    elems = _kv_elements_per_token(workload)
    contexts = np.arange(
        workload.seq_input, total_tokens, dtype=np.float64
    )
    attn_coef = (
        workload.batch * elems * bits.kv_traffic_bits / 8.0
        / accel.memory_bandwidth
    )
    attention = attn_coef * contexts
    t_q = np.full_like(contexts, workload.batch * elems / engine.quantize_rate)
    t_dq = workload.batch * elems * contexts / engine.dequantize_rate
    if pipelined:
        exposed = np.maximum(0.0, t_q + t_dq - attention)
    else:
        exposed = t_q + t_dq
    totals = non_attn + attention + exposed

    decode = PhaseLatency(
        non_attention=non_attn * len(contexts),
        attention=float(attention.sum()),
        quantize=float(t_q.sum()),
        dequantize=float(t_dq.sum()),
        exposed=float(exposed.sum()),
    )
    return GenerationResult(
        mode=mode,
        kv_bits=bits.kv_traffic_bits,
        weight_bits=bits.weight_bits,
        prefill_time=prefill,
        decode=decode,
        throughput=workload.batch * workload.seq_output / float(totals.sum()),
        peak_memory_bytes=peak,
        oom=False,
        oom_context=None,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SweepRow:
    """One report line; field order matches the CSV schema."""

    mode: str
    batch: int
    seq: int
    kv_bits: float
    throughput: float
    t_nonattn: float
    t_attn: float
    t_q: float
    t_dq: float
    peak_mem: float
    oom_flag: int


def sweep(
    accel: AcceleratorConfig,
    model: ModelShape,
    engine: EngineCoeffs,
    modes: tuple[str, ...],
    batches: tuple[int, ...],
    seq_input: int,
    seq_output: int,
    outlier_rate: float = 0.10,
    pipelined: bool = True,
) -> list[SweepRow]:
    """Cross modes with batch sizes into report rows, in grid order."""
    rows = []
    for mode in modes:
        for batch in batches:
            workload = WorkloadConfig(
                model=model,
                batch=batch,
                seq_input=seq_input,
                seq_output=seq_output,
                outlier_rate=outlier_rate,
            )
            r = run_generation(
                accel, workload, mode, engine, pipelined=pipelined
            )
            rows.append(
                SweepRow(
                    mode=r.mode,
                    batch=batch,
                    seq=seq_input + seq_output,
                    kv_bits=r.kv_bits,
                    throughput=r.throughput,
                    t_nonattn=r.decode.non_attention,
                    t_attn=r.decode.attention,
                    t_q=r.decode.quantize,
                    t_dq=r.decode.dequantize,
                    peak_mem=r.peak_memory_bytes,
                    oom_flag=int(r.oom),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Presets: round numbers representative of a serving-class deployment
# ---------------------------------------------------------------------------

REPRESENTATIVE_ACCELERATOR = AcceleratorConfig(
    memory_bandwidth=480e9,
    num_cores=64,
    macs_per_core=128,
    frequency_hz=2.0e9,
    capacity_bytes=64 * 1024**3,
)

MODEL_7B = ModelShape(
    weight_bytes=14e9,
    num_layers=32,
    num_kv_heads=32,
    head_dim=128,
)
