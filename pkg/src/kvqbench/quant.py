"""Three-group decomposition, group shift, and mixed 4/5-bit quantization.

Key design decisions:
- Group labels enumerate the five concrete (group, side) cells; one int8 per
  element keeps bulk decomposition vectorized and cheap to compare.
- Scale records round their (min, max) to half precision before the scaling
  factor is computed. The encoded form stores scales as fp16, so rounding
  here makes encode/decode bit-exact on scales, and the documented error
  bound's "one fp16 ulp" slack absorbs exactly this rounding.
- `dequantize_token` trusts the stored per-element labels for the Middle
  shift-back side. Decoded tokens carry sides reconstructed from the sign of
  the reconstructed residual (ties resolve High), so dequantizing a decoded
  token follows the sign rule; dequantizing a freshly quantized token uses
  the true side, which is what makes the half-step error bound hold for
  every element.
- Rounding is half away from zero throughout (arguments are non-negative
  where it is applied, so this equals half-up).
"""
from __future__ import annotations

import dataclasses
import enum
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigError
from .trace import GroupConfig, KvKind, KvVector

if TYPE_CHECKING:
    from .profiler import ThresholdQuad

_LEVELS = 15  # 2**4 - 1 code levels for both the dense and magnitude grids


class GroupLabel(enum.IntEnum):
    """Concrete (group, side) cell of one element."""

    OUTER_LOW = 0
    MIDDLE_LOW = 1
    INNER = 2
    MIDDLE_HIGH = 3
    OUTER_HIGH = 4


class GroupKind(enum.Enum):
    """Scale-record granularity: one record per group."""

    MIDDLE = "middle"
    INNER = "inner"
    OUTER = "outer"


def is_outer(labels: np.ndarray) -> np.ndarray:
    return (labels == GroupLabel.OUTER_LOW) | (labels == GroupLabel.OUTER_HIGH)


def is_middle(labels: np.ndarray) -> np.ndarray:
    return (labels == GroupLabel.MIDDLE_LOW) | (labels == GroupLabel.MIDDLE_HIGH)


def is_inner(labels: np.ndarray) -> np.ndarray:
    return labels == GroupLabel.INNER


def is_outlier(labels: np.ndarray) -> np.ndarray:
    """Inner and Outer elements leave the dense path; Middle stays."""
    return ~is_middle(labels)


def _fp16(value: float) -> float:
    return float(np.float32(np.float16(value)))


@dataclasses.dataclass(frozen=True)
class GroupScale:
    """Per-token scale record for one group.

    Attributes:
        group: Which group the record covers.
        min: Grid minimum. Pinned to 0 for Inner/Outer (magnitude grids).
        max: Grid maximum. Both bounds are half-precision values.
        sigma: Levels per unit, (2^4 - 1)/(max - min); 0 marks a degenerate
            (empty or collapsed) group.
    """

    group: GroupKind
    min: float
    max: float
    sigma: float = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        if self.min > self.max:
            raise ConfigError(f"scale min {self.min} > max {self.max}")
        if self.group in (GroupKind.INNER, GroupKind.OUTER) and self.min != 0.0:
            raise ConfigError(f"{self.group.value} scale min is pinned to 0")
        for name in ("min", "max"):
            value = getattr(self, name)
            if not np.isfinite(value) or _fp16(value) != value:
                raise ConfigError(
                    f"scale {name} {value!r} is not a finite half-precision value"
                )
        sigma = 0.0 if self.max == self.min else _LEVELS / (self.max - self.min)
        object.__setattr__(self, "sigma", sigma)


@dataclasses.dataclass
class QuantizedToken:
    """Quantized form of one token's vector.

    Attributes:
        labels: int8 GroupLabel values, one per element.
        codes: uint8 4-bit codes; Middle positions hold dense codes, outlier
            positions hold magnitude codes.
        signs: int8 in {-1, 0, +1}; residual sign for Inner/Outer elements,
            0 at Middle positions.
        scales: One GroupScale per GroupKind.
        layer, kind, token_index: Origin of the source vector.
    """

    labels: np.ndarray
    codes: np.ndarray
    signs: np.ndarray
    scales: dict[GroupKind, GroupScale]
    layer: int = 0
    kind: KvKind = KvKind.KEY
    token_index: int = 0

    def __post_init__(self) -> None:
        n = len(self.labels)
        if not (len(self.codes) == len(self.signs) == n):
            raise ConfigError("labels, codes, and signs must share one length")
        if self.codes.max(initial=0) > 15:
            raise ConfigError("codes must fit in 4 bits")
        if set(self.scales) != set(GroupKind):
            raise ConfigError("scales must carry exactly one record per group")
        middle = is_middle(self.labels)
        if np.any(self.signs[middle] != 0) or np.any(self.signs[~middle] == 0):
            raise ConfigError(
                "signs must be 0 exactly at Middle positions and nonzero elsewhere"
            )

    @property
    def vector_len(self) -> int:
        return len(self.labels)

    def num_outliers(self) -> int:
        return int(np.count_nonzero(is_outlier(self.labels)))


# ---------------------------------------------------------------------------
# Decomposition and group shift
# ---------------------------------------------------------------------------


def decompose(vector: np.ndarray | KvVector, quad: "ThresholdQuad") -> np.ndarray:
    """Assign each element to its (group, side) cell.

    Boundary semantics are exact: the outer comparisons are strict, the inner
    band is closed, and the middle bands take the leftovers, so a value equal
    to t_hi_outer is Middle and a value equal to t_hi_inner is Inner.

    Args:
        vector: Values (any shape) or a KvVector.
        quad: Threshold quad (t_lo_outer, t_lo_inner, t_hi_inner, t_hi_outer).

    Returns:
        int8 array of GroupLabel values, same shape as the input.
    """
    x = vector.values if isinstance(vector, KvVector) else np.asarray(vector)
    conditions = [
        x < quad.t_lo_outer,
        x > quad.t_hi_outer,
        (x >= quad.t_lo_inner) & (x <= quad.t_hi_inner),
        x < quad.t_lo_inner,
    ]
    choices = [
        GroupLabel.OUTER_LOW,
        GroupLabel.OUTER_HIGH,
        GroupLabel.INNER,
        GroupLabel.MIDDLE_LOW,
    ]
    return np.select(conditions, choices, default=GroupLabel.MIDDLE_HIGH).astype(
        np.int8
    )


def shift(
    vector: np.ndarray | KvVector, labels: np.ndarray, quad: "ThresholdQuad"
) -> np.ndarray:
    """Subtract the group-side threshold, concentrating each band near zero.

    Outer sides shift by the outer thresholds, Middle sides by the inner
    thresholds, Inner is unchanged.
    """
    x = vector.values if isinstance(vector, KvVector) else np.asarray(vector)
    r = x.astype(np.float64).copy()
    r[labels == GroupLabel.OUTER_LOW] -= quad.t_lo_outer
    r[labels == GroupLabel.OUTER_HIGH] -= quad.t_hi_outer
    r[labels == GroupLabel.MIDDLE_LOW] -= quad.t_lo_inner
    r[labels == GroupLabel.MIDDLE_HIGH] -= quad.t_hi_inner
    return r


def unshift(
    residuals: np.ndarray, labels: np.ndarray, quad: "ThresholdQuad"
) -> np.ndarray:
    """Exact inverse of `shift` under the same labels."""
    x = np.asarray(residuals, dtype=np.float64).copy()
    x[labels == GroupLabel.OUTER_LOW] += quad.t_lo_outer
    x[labels == GroupLabel.OUTER_HIGH] += quad.t_hi_outer
    x[labels == GroupLabel.MIDDLE_LOW] += quad.t_lo_inner
    x[labels == GroupLabel.MIDDLE_HIGH] += quad.t_hi_inner
    return x


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def _round_half_away(values: np.ndarray) -> np.ndarray:
    # Arguments are non-negative up to float noise; clamp handles the rest.
    return np.floor(values + 0.5)


def quantize_token(
    vector: KvVector, quad: "ThresholdQuad", config: GroupConfig | None = None
) -> QuantizedToken:
    """Quantize one token: decompose, shift, then scale each group.

    The Middle group quantizes signed residuals against its (min, max) grid;
    Inner and Outer quantize residual magnitudes against a (0, max) grid and
    keep the sign separately. Scale bounds are rounded to half precision
    before sigma is computed.

    Returns:
        QuantizedToken with per-element labels, 4-bit codes, outlier signs,
        and the three scale records.
    """
    config = config or GroupConfig()
    labels = decompose(vector, quad)
    r = shift(vector, labels, quad)
    n = len(r)
    codes = np.zeros(n, dtype=np.uint8)
    signs = np.zeros(n, dtype=np.int8)
    scales: dict[GroupKind, GroupScale] = {}

    middle = is_middle(labels)
    if np.any(middle):
        rm = r[middle]
        scale = GroupScale(GroupKind.MIDDLE, _fp16(rm.min()), _fp16(rm.max()))
        if scale.sigma > 0.0:
            q = _round_half_away((rm - scale.min) * scale.sigma)
            codes[middle] = np.clip(q, 0, _LEVELS).astype(np.uint8)
    else:
        scale = GroupScale(GroupKind.MIDDLE, 0.0, 0.0)
    scales[GroupKind.MIDDLE] = scale

    for kind, mask in (
        (GroupKind.INNER, is_inner(labels)),
        (GroupKind.OUTER, is_outer(labels)),
    ):
        if np.any(mask):
            mags = np.abs(r[mask])
            scale = GroupScale(kind, 0.0, _fp16(mags.max()))
            if scale.sigma > 0.0:
                q = _round_half_away(mags * scale.sigma)
                codes[mask] = np.clip(q, 0, _LEVELS).astype(np.uint8)
            signs[mask] = np.where(r[mask] >= 0.0, 1, -1).astype(np.int8)
        else:
            scale = GroupScale(kind, 0.0, 0.0)
        scales[kind] = scale

    return QuantizedToken(
        labels=labels,
        codes=codes,
        signs=signs,
        scales=scales,
        layer=vector.layer,
        kind=vector.kind,
        token_index=vector.token_index,
    )


def dequantize_token(q: QuantizedToken, quad: "ThresholdQuad") -> np.ndarray:
    """Reconstruct real values from a quantized token.

    Middle: r_hat = code/sigma + min, shifted back by the inner threshold on
    the element's labeled side. Inner: sign * code/sigma. Outer: sign *
    code/sigma plus the outer threshold matching the sign. A sigma of 0
    reconstructs the group minimum (Middle) or zero magnitude (Inner/Outer)
    without raising.

    Returns:
        float64 array of reconstructed values.
    """
    out = np.zeros(q.vector_len, dtype=np.float64)

    middle = is_middle(q.labels)
    if np.any(middle):
        s = q.scales[GroupKind.MIDDLE]
        if s.sigma > 0.0:
            r_hat = q.codes[middle].astype(np.float64) / s.sigma + s.min
        else:
            r_hat = np.full(int(middle.sum()), s.min)
        high = q.labels[middle] == GroupLabel.MIDDLE_HIGH
        out[middle] = r_hat + np.where(high, quad.t_hi_inner, quad.t_lo_inner)

    inner = is_inner(q.labels)
    if np.any(inner):
        s = q.scales[GroupKind.INNER]
        mag = (
            q.codes[inner].astype(np.float64) / s.sigma
            if s.sigma > 0.0
            else np.zeros(int(inner.sum()))
        )
        out[inner] = q.signs[inner] * mag

    outer = is_outer(q.labels)
    if np.any(outer):
        s = q.scales[GroupKind.OUTER]
        mag = (
            q.codes[outer].astype(np.float64) / s.sigma
            if s.sigma > 0.0
            else np.zeros(int(outer.sum()))
        )
        positive = q.signs[outer] > 0
        out[outer] = q.signs[outer] * mag + np.where(
            positive, quad.t_hi_outer, quad.t_lo_outer
        )

    return out


def roundtrip_bound(q: QuantizedToken) -> np.ndarray:
    """Per-element reconstruction error bound of a quantized token.

    Half a code step of the element's group plus one half-precision ulp of
    the group's stored bound (the bound itself was rounded to fp16). Holds
    for collapsed groups too: a zero-width range leaves just the ulp term.
    """
    group_of = {
        GroupLabel.OUTER_LOW: GroupKind.OUTER,
        GroupLabel.OUTER_HIGH: GroupKind.OUTER,
        GroupLabel.MIDDLE_LOW: GroupKind.MIDDLE,
        GroupLabel.MIDDLE_HIGH: GroupKind.MIDDLE,
        GroupLabel.INNER: GroupKind.INNER,
    }
    bound = np.empty(q.vector_len)
    for label, kind in group_of.items():
        scale = q.scales[kind]
        step = 0.5 * (scale.max - scale.min) / _LEVELS
        ulp = float(np.spacing(np.abs(np.float16(scale.max))))
        bound[q.labels == label] = step + ulp
    return bound
