"""Reference quantizers the grouped pipeline is measured against.

Two baselines bracket the design space. ``uniform4`` quantizes a whole
token vector against one per-token min/max range, the scheme the grouped
pipeline is meant to beat when rare large values stretch that range.
``topk_mixed`` keeps the largest-magnitude fraction exact at a bookkeeping
cost of 23 bits per kept entry (16-bit value, 6-bit position, group/sign
bit) and 4-bit-quantizes the rest; it is the accuracy ceiling that the
12-bit-per-outlier fused encoding trades against.

Both store their range bounds as half precision, like the grouped path,
so comparisons charge every method the same scale overhead per record.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .errors import ConfigError

_LEVELS = 15  # 4-bit code points per range
_BITS_PER_KEPT = 23
_SCALE_BITS = 32  # one fp16 (min, max) pair


@dataclasses.dataclass(frozen=True)
class BaselineResult:
    """Reconstruction of one token vector plus its storage cost."""

    values: np.ndarray  # float64 reconstruction
    total_bits: float
    exact_mask: np.ndarray  # True where the element was stored losslessly

    @property
    def effective_bits(self) -> float:
        return self.total_bits / len(self.values)


def _as_vector(vector: np.ndarray) -> np.ndarray:
    x = np.asarray(vector, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ConfigError("baseline input must be a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ConfigError("baseline input must be finite")
    return x


def _fp16(value: float) -> float:
    return float(np.float32(np.float16(value)))


def _quantize_range(x: np.ndarray) -> tuple[np.ndarray, float, float]:
    """4-bit min/max reconstruction with half-precision stored bounds."""
    lo = _fp16(x.min())
    hi = _fp16(x.max())
    if hi == lo:
        return np.full_like(x, lo), lo, hi
    sigma = _LEVELS / (hi - lo)
    codes = np.clip(np.floor((x - lo) * sigma + 0.5), 0, _LEVELS)
    return codes / sigma + lo, lo, hi


def uniform4(vector: np.ndarray) -> BaselineResult:
    """Per-token 4-bit quantization over one whole-vector range."""
    x = _as_vector(vector)
    values, _, _ = _quantize_range(x)
    bits = 4.0 * x.size + _SCALE_BITS
    return BaselineResult(
        values=values,
        total_bits=bits,
        exact_mask=np.zeros(x.size, dtype=bool),
    )


def topk_mixed(vector: np.ndarray, keep_fraction: float = 0.10) -> BaselineResult:
    """Keep the top fraction by magnitude exact; 4-bit the remainder.

    Kept entries are billed 23 bits each. Magnitude ties keep the
    lower index, so the selection is deterministic.
    """
    if not 0.0 <= keep_fraction <= 1.0:
        raise ConfigError("keep_fraction must be in [0, 1]")
    x = _as_vector(vector)
    k = int(math.floor(keep_fraction * x.size + 0.5))
    order = np.argsort(-np.abs(x), kind="stable")
    mask = np.zeros(x.size, dtype=bool)
    mask[order[:k]] = True

    values = np.empty_like(x)
    # stored as raw half precision, exact for half-precision trace data
    values[mask] = np.float32(np.float16(x[mask]))
    if k < x.size:
        values[~mask], _, _ = _quantize_range(x[~mask])
    bits = _BITS_PER_KEPT * k + 4.0 * (x.size - k) + _SCALE_BITS
    return BaselineResult(values=values, total_bits=bits, exact_mask=mask)
