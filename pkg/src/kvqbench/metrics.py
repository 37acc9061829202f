"""Error metrics and the trace evaluation driver.

Quality is reported per (layer, kind) cell and per method: the grouped
pipeline run end to end through quantize/dequantize, and the two
baselines. Alongside the elementwise metrics, a fixed-shape toy attention
computation (8 heads, 64-dim, 128 tokens) turns reconstruction error into
a downstream-sensitivity signal: how far do softmax scores and attended
outputs move when the cache is round-tripped?

The grouped method also spot-checks its storage arithmetic while it runs:
sampled tokens are pushed through the byte encoder and their size must
match 4L + 8*outliers + 96 bits exactly.
"""
from __future__ import annotations

import dataclasses
import math
from typing import TYPE_CHECKING

import numpy as np

from . import baselines
from .encoding import decode, encode
from .errors import CheckFailure, ConfigError
from .quant import decompose, dequantize_token, is_outlier, quantize_token

if TYPE_CHECKING:
    from .profiler import ThresholdProfile
    from .trace import KvTrace

METHODS = ("oaken", "uniform4", "topk_mixed")

ATTENTION_HEADS = 8
ATTENTION_HEAD_DIM = 64
ATTENTION_TOKENS = 128
_ATTENTION_QUERY_SEED = 1806


# ---------------------------------------------------------------------------
# Elementwise metrics
# ---------------------------------------------------------------------------


def mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    return float(np.mean(np.square(np.asarray(x_hat) - np.asarray(x))))


def max_abs_err(x: np.ndarray, x_hat: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(x_hat) - np.asarray(x))))


def sqnr_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Signal power over error power, in dB; infinite when lossless."""
    signal = float(np.sum(np.square(np.asarray(x, dtype=np.float64))))
    err = float(np.sum(np.square(np.asarray(x_hat) - np.asarray(x))))
    if err == 0.0:
        return math.inf
    if signal == 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / err)


def outlier_fraction(labels: np.ndarray) -> float:
    return float(np.mean(is_outlier(np.asarray(labels))))


@dataclasses.dataclass(frozen=True)
class CellMetrics:
    """One report row: one method on one (layer, kind) cell."""

    layer: int
    kind: str
    method: str
    mse: float
    max_abs_err: float
    sqnr_db: float
    outlier_fraction: float
    effective_bits: float

    def __post_init__(self) -> None:
        for name in ("mse", "max_abs_err", "sqnr_db", "effective_bits"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(
                    f"{name} is not finite for {self.method} at layer "
                    f"{self.layer}/{self.kind}"
                )
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ConfigError(
                f"outlier_fraction {self.outlier_fraction} outside [0, 1]"
            )


# ---------------------------------------------------------------------------
# Toy attention sensitivity
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class AttentionCheck:
    """Perturbation of a fixed small attention computation."""

    score_delta: float  # max |softmax probability| change
    output_delta: float  # max |attended output| change


def _attention(
    queries: np.ndarray, keys: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    # queries (H, d); keys/values (T, H, d) -> scores (H, T), outputs (H, d)
    logits = np.einsum("hd,thd->ht", queries, keys) / math.sqrt(
        ATTENTION_HEAD_DIM
    )
    logits -= logits.max(axis=1, keepdims=True)
    scores = np.exp(logits)
    scores /= scores.sum(axis=1, keepdims=True)
    outputs = np.einsum("ht,thd->hd", scores, values)
    return scores, outputs


def toy_attention_delta(
    keys: np.ndarray,
    keys_hat: np.ndarray,
    values: np.ndarray,
    values_hat: np.ndarray,
) -> AttentionCheck:
    """Compare attention on original vs. round-tripped keys and values.

    Inputs are (128, 512) blocks: 128 tokens, 8 heads of 64 dims flattened.
    Queries are a fixed seeded draw, so the check is deterministic.
    """
    width = ATTENTION_HEADS * ATTENTION_HEAD_DIM
    shape = (ATTENTION_TOKENS, width)
    for name, arr in (
        ("keys", keys),
        ("keys_hat", keys_hat),
        ("values", values),
        ("values_hat", values_hat),
    ):
        if np.shape(arr) != shape:
            raise ConfigError(f"{name} must have shape {shape}")

    def fold(arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=np.float64).reshape(
            ATTENTION_TOKENS, ATTENTION_HEADS, ATTENTION_HEAD_DIM
        )

    rng = np.random.default_rng(_ATTENTION_QUERY_SEED)
    queries = rng.standard_normal((ATTENTION_HEADS, ATTENTION_HEAD_DIM))
    scores, outputs = _attention(queries, fold(keys), fold(values))
    scores_hat, outputs_hat = _attention(
        queries, fold(keys_hat), fold(values_hat)
    )
    return AttentionCheck(
        score_delta=float(np.max(np.abs(scores_hat - scores))),
        output_delta=float(np.max(np.abs(outputs_hat - outputs))),
    )


# ---------------------------------------------------------------------------
# Trace evaluation
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ErrorReport:
    """All per-cell rows plus the attention sensitivity per method.

    ``attention`` is empty when the trace is too small for the fixed
    8x64x128 computation (vectors shorter than 512 or fewer than 128
    tokens).
    """

    cells: tuple[CellMetrics, ...]
    attention: dict[str, AttentionCheck]
    trace_digest: str

    def cell(self, layer: int, kind: str, method: str) -> CellMetrics:
        for row in self.cells:
            if (row.layer, row.kind, row.method) == (layer, kind, method):
                return row
        raise KeyError((layer, kind, method))


def _grouped_roundtrip(
    trace: "KvTrace",
    layer: int,
    kind,
    quad,
    encode_check_stride: int,
) -> tuple[np.ndarray, float]:
    """Dequantized block plus mean effective bits, size-checking samples."""
    block = trace.tokens(layer, kind)
    num_tokens, vector_len = block.shape
    x_hat = np.empty((num_tokens, vector_len), dtype=np.float64)
    total_bits = 0
    for i in range(num_tokens):
        q = quantize_token(trace.vector(layer, kind, i), quad)
        x_hat[i] = dequantize_token(q, quad)
        token_bits = 4 * vector_len + 8 * q.num_outliers() + 96
        total_bits += token_bits
        if i % encode_check_stride == 0:
            token = encode(q)
            if token.total_bits() != token_bits:
                raise CheckFailure(
                    f"encoded size {token.total_bits()} != formula "
                    f"{token_bits} at layer {layer}/{kind.value} token {i}"
                )
            decode(token)  # must not raise; bijection is fuzzed elsewhere
    return x_hat, total_bits / (num_tokens * vector_len)


def evaluate_trace(
    trace: "KvTrace",
    profile: "ThresholdProfile",
    keep_fraction: float | None = None,
    encode_check_stride: int = 16,
) -> ErrorReport:
    """Score the grouped pipeline and both baselines on every cell.

    ``keep_fraction`` is the exact-kept fraction of the mixed baseline; by
    default it matches the profile's total outlier budget so both methods
    spend their sparse budget on the same element count.
    """
    if encode_check_stride < 1:
        raise ConfigError("encode_check_stride must be at least 1")
    config = profile.provenance.group_config
    if keep_fraction is None:
        keep_fraction = config.ratio_outer + config.ratio_inner

    rows: list[CellMetrics] = []
    for layer, kind in trace.cells():
        block = trace.tokens(layer, kind)
        x = block.astype(np.float64)
        quad = profile.quad(layer, kind)
        frac = outlier_fraction(decompose(x, quad))

        grouped_hat, grouped_bits = _grouped_roundtrip(
            trace, layer, kind, quad, encode_check_stride
        )
        per_method = {
            "oaken": (grouped_hat, grouped_bits, frac),
        }

        u4_hat = np.empty_like(x)
        tk_hat = np.empty_like(x)
        u4_bits = tk_bits = 0.0
        for i in range(x.shape[0]):
            u4 = baselines.uniform4(x[i])
            tk = baselines.topk_mixed(x[i], keep_fraction)
            u4_hat[i] = u4.values
            tk_hat[i] = tk.values
            u4_bits += u4.total_bits
            tk_bits += tk.total_bits
        scale = x.shape[0] * x.shape[1]
        per_method["uniform4"] = (u4_hat, u4_bits / scale, 0.0)
        per_method["topk_mixed"] = (tk_hat, tk_bits / scale, keep_fraction)

        for method in METHODS:
            x_hat, bits, method_frac = per_method[method]
            rows.append(
                CellMetrics(
                    layer=layer,
                    kind=kind.value,
                    method=method,
                    mse=mse(x, x_hat),
                    max_abs_err=max_abs_err(x, x_hat),
                    sqnr_db=sqnr_db(x, x_hat),
                    outlier_fraction=method_frac,
                    effective_bits=bits,
                )
            )

    attention = _attention_sensitivity(trace, profile, keep_fraction)
    return ErrorReport(
        cells=tuple(rows),
        attention=attention,
        trace_digest=trace.content_digest(),
    )


def _attention_sensitivity(
    trace: "KvTrace", profile: "ThresholdProfile", keep_fraction: float
) -> dict[str, AttentionCheck]:
    from .trace import KvKind

    width = ATTENTION_HEADS * ATTENTION_HEAD_DIM
    meta = trace.meta
    if meta.vector_len < width or meta.num_tokens < ATTENTION_TOKENS:
        return {}

    layer = 0
    blocks = {}
    for kind in (KvKind.KEY, KvKind.VALUE):
        x = trace.tokens(layer, kind).astype(np.float64)[:ATTENTION_TOKENS]
        quad = profile.quad(layer, kind)
        grouped = np.empty_like(x)
        u4 = np.empty_like(x)
        tk = np.empty_like(x)
        for i in range(ATTENTION_TOKENS):
            q = quantize_token(trace.vector(layer, kind, i), quad)
            grouped[i] = dequantize_token(q, quad)
            u4[i] = baselines.uniform4(x[i]).values
            tk[i] = baselines.topk_mixed(x[i], keep_fraction).values
        blocks[kind] = {
            "exact": x[:, :width],
            "oaken": grouped[:, :width],
            "uniform4": u4[:, :width],
            "topk_mixed": tk[:, :width],
        }

    keys = blocks[KvKind.KEY]
    values = blocks[KvKind.VALUE]
    return {
        method: toy_attention_delta(
            keys["exact"], keys[method], values["exact"], values[method]
        )
        for method in METHODS
    }
