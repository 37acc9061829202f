"""Fused dense-and-sparse bit encoding of quantized tokens.

The dense stream packs one 4-bit code per element, two per byte with the
low nibble first, followed by three (min, max) scale pairs as little-endian
half precision: middle, inner, outer, 12 bytes total. Outlier positions
embed their 4-bit magnitude code in the dense slot they would otherwise
zero, so an outlier costs its dense nibble plus one 8-bit table entry:
a 6-bit segment-relative index, one group bit (0 = Inner, 1 = Outer), and
one sign bit (0 = positive, 1 = negative), packed index-high. Entries are
ordered by (segment, relative index); per-segment entry counts travel as
table metadata next to the stream, not inside it.

Decoding reconstructs outlier labels and signs exactly from the entries.
Middle sides are not stored anywhere, so they are reconstructed from the
sign of the reconstructed residual, ties resolving to the high side.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import ConfigError, FormatError
from .quant import (
    GroupKind,
    GroupLabel,
    GroupScale,
    QuantizedToken,
    is_outer,
    is_outlier,
)
from .trace import DEFAULT_SEGMENT_LEN, GroupConfig, KvKind

SCALE_ORDER = (GroupKind.MIDDLE, GroupKind.INNER, GroupKind.OUTER)
SCALE_BYTES = 12  # 3 groups x (min, max) x fp16
SCALE_BITS = 8 * SCALE_BYTES


@dataclasses.dataclass(frozen=True)
class SparseEntry:
    """One 8-bit outlier table entry within a 64-element segment."""

    index: int
    is_outer: bool
    negative: bool

    def __post_init__(self) -> None:
        if not 0 <= self.index < DEFAULT_SEGMENT_LEN:
            raise ConfigError(
                f"entry index {self.index} outside [0, {DEFAULT_SEGMENT_LEN})"
            )

    def to_byte(self) -> int:
        return (self.index << 2) | (int(self.is_outer) << 1) | int(self.negative)

    @classmethod
    def from_byte(cls, value: int) -> "SparseEntry":
        if not 0 <= value <= 0xFF:
            raise FormatError(f"entry byte {value} out of range")
        return cls(
            index=value >> 2,
            is_outer=bool(value & 0x02),
            negative=bool(value & 0x01),
        )


@dataclasses.dataclass
class DenseBlock:
    """Unpacked dense stream: 4-bit codes for every element plus scales."""

    codes: np.ndarray
    scales: dict[GroupKind, GroupScale]

    def __post_init__(self) -> None:
        if len(self.codes) == 0 or len(self.codes) % 2 != 0:
            raise ConfigError(
                f"dense code count {len(self.codes)} must be positive and even"
            )
        if self.codes.max(initial=0) > 15:
            raise ConfigError("dense codes must fit in 4 bits")
        if set(self.scales) != set(GroupKind):
            raise ConfigError("dense block needs one scale record per group")

    def to_bytes(self) -> bytes:
        codes = self.codes.astype(np.uint8)
        packed = (codes[0::2] | (codes[1::2] << 4)).tobytes()
        bounds = []
        for kind in SCALE_ORDER:
            s = self.scales[kind]
            bounds.extend((s.min, s.max))
        return packed + np.array(bounds, dtype="<f2").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, vector_len: int) -> "DenseBlock":
        expected = vector_len // 2 + SCALE_BYTES
        if len(data) != expected:
            raise FormatError(
                f"dense stream holds {len(data)} bytes, expected {expected} "
                f"for vector_len {vector_len}"
            )
        packed = np.frombuffer(data[: vector_len // 2], dtype=np.uint8)
        codes = np.empty(vector_len, dtype=np.uint8)
        codes[0::2] = packed & 0x0F
        codes[1::2] = packed >> 4
        bounds = np.frombuffer(data[vector_len // 2 :], dtype="<f2").astype(
            np.float64
        )
        try:
            scales = {
                kind: GroupScale(kind, float(bounds[2 * i]), float(bounds[2 * i + 1]))
                for i, kind in enumerate(SCALE_ORDER)
            }
        except ConfigError as exc:
            raise FormatError(f"malformed scale records: {exc}") from exc
        return cls(codes=codes, scales=scales)


@dataclasses.dataclass
class EncodedToken:
    """One token in fused encoded form.

    Attributes:
        dense: Dense codes and scale records.
        sparse_counts: Outlier entry count per 64-element segment; metadata
            accompanying the streams rather than part of them.
        entries: All outlier entries, ordered by (segment, relative index).
        layer, kind, token_index: Origin of the source token.
    """

    dense: DenseBlock
    sparse_counts: tuple[int, ...]
    entries: tuple[SparseEntry, ...]
    layer: int = 0
    kind: KvKind = KvKind.KEY
    token_index: int = 0

    def __post_init__(self) -> None:
        length = len(self.dense.codes)
        if length % DEFAULT_SEGMENT_LEN != 0:
            raise ConfigError(
                f"vector length {length} is not a multiple of "
                f"{DEFAULT_SEGMENT_LEN}"
            )
        if len(self.sparse_counts) != length // DEFAULT_SEGMENT_LEN:
            raise ConfigError(
                f"{len(self.sparse_counts)} segment counts for "
                f"{length // DEFAULT_SEGMENT_LEN} segments"
            )
        if any(not 0 <= c <= DEFAULT_SEGMENT_LEN for c in self.sparse_counts):
            raise ConfigError("segment count overflows its segment")
        if sum(self.sparse_counts) != len(self.entries):
            raise ConfigError(
                f"{len(self.entries)} entries but counts sum to "
                f"{sum(self.sparse_counts)}"
            )
        offset = 0
        for seg, count in enumerate(self.sparse_counts):
            indices = [e.index for e in self.entries[offset : offset + count]]
            if any(b <= a for a, b in zip(indices, indices[1:])):
                raise ConfigError(
                    f"segment {seg} entries are not strictly increasing"
                )
            offset += count

    @property
    def vector_len(self) -> int:
        return len(self.dense.codes)

    @property
    def num_outliers(self) -> int:
        return len(self.entries)

    def outlier_positions(self) -> np.ndarray:
        positions = []
        offset = 0
        for seg, count in enumerate(self.sparse_counts):
            base = seg * DEFAULT_SEGMENT_LEN
            positions.extend(
                base + e.index for e in self.entries[offset : offset + count]
            )
            offset += count
        return np.asarray(positions, dtype=np.intp)

    def dense_bytes(self) -> bytes:
        return self.dense.to_bytes()

    def sparse_bytes(self) -> bytes:
        return bytes(e.to_byte() for e in self.entries)

    def total_bits(self, include_scales: bool = True) -> int:
        bits = 4 * self.vector_len + 8 * self.num_outliers
        return bits + SCALE_BITS if include_scales else bits

    def effective_bits(self, include_scales: bool = True) -> float:
        return self.total_bits(include_scales) / self.vector_len

    @classmethod
    def from_streams(
        cls,
        dense_data: bytes,
        sparse_data: bytes,
        sparse_counts: tuple[int, ...],
        layer: int = 0,
        kind: KvKind = KvKind.KEY,
        token_index: int = 0,
    ) -> "EncodedToken":
        """Rebuild a token from its two byte streams plus count metadata."""
        vector_len = DEFAULT_SEGMENT_LEN * len(sparse_counts)
        if vector_len == 0:
            raise FormatError("empty segment count metadata")
        dense = DenseBlock.from_bytes(dense_data, vector_len)
        if len(sparse_data) != sum(sparse_counts):
            raise FormatError(
                f"sparse stream holds {len(sparse_data)} entries, counts "
                f"sum to {sum(sparse_counts)}"
            )
        entries = tuple(SparseEntry.from_byte(b) for b in sparse_data)
        try:
            return cls(
                dense=dense,
                sparse_counts=tuple(int(c) for c in sparse_counts),
                entries=entries,
                layer=layer,
                kind=kind,
                token_index=token_index,
            )
        except ConfigError as exc:
            raise FormatError(f"malformed encoded token: {exc}") from exc


def encode(q: QuantizedToken, config: GroupConfig | None = None) -> EncodedToken:
    """Encode a quantized token into the fused representation.

    Outlier magnitude codes are already in place in the dense code array;
    this adds the 8-bit table entries and per-segment counts.
    """
    config = config or GroupConfig()
    length = q.vector_len
    if length % config.segment_len != 0:
        raise ConfigError(
            f"vector length {length} is not a multiple of the segment "
            f"length {config.segment_len}"
        )
    positions = np.nonzero(is_outlier(q.labels))[0]
    outer_mask = is_outer(q.labels)
    entries = tuple(
        SparseEntry(
            index=int(p % config.segment_len),
            is_outer=bool(outer_mask[p]),
            negative=bool(q.signs[p] < 0),
        )
        for p in positions
    )
    counts = np.bincount(
        positions // config.segment_len, minlength=length // config.segment_len
    )
    dense = DenseBlock(codes=q.codes.copy(), scales=dict(q.scales))
    return EncodedToken(
        dense=dense,
        sparse_counts=tuple(int(c) for c in counts),
        entries=entries,
        layer=q.layer,
        kind=q.kind,
        token_index=q.token_index,
    )


def decode(e: EncodedToken, config: GroupConfig | None = None) -> QuantizedToken:
    """Decode back to a quantized token.

    Outlier labels and signs are exact. Middle sides are reconstructed from
    the sign of the reconstructed residual (ties to the high side), since
    the encoded form does not store them.
    """
    del config  # widths are pinned; accepted for signature symmetry
    length = e.vector_len
    # Duplicate or disordered positions cannot reach here: EncodedToken
    # enforces strictly increasing entry indices per segment.
    positions = e.outlier_positions()

    labels = np.empty(length, dtype=np.int8)
    signs = np.zeros(length, dtype=np.int8)
    middle = np.ones(length, dtype=bool)
    middle[positions] = False

    s = e.dense.scales[GroupKind.MIDDLE]
    codes = e.dense.codes
    if s.sigma > 0.0:
        r_hat = codes[middle].astype(np.float64) / s.sigma + s.min
    else:
        r_hat = np.full(int(middle.sum()), s.min)
    labels[middle] = np.where(
        r_hat >= 0.0, GroupLabel.MIDDLE_HIGH, GroupLabel.MIDDLE_LOW
    ).astype(np.int8)

    for pos, entry in zip(positions, e.entries):
        if entry.is_outer:
            labels[pos] = (
                GroupLabel.OUTER_LOW if entry.negative else GroupLabel.OUTER_HIGH
            )
        else:
            labels[pos] = GroupLabel.INNER
        signs[pos] = -1 if entry.negative else 1

    return QuantizedToken(
        labels=labels,
        codes=codes.copy(),
        signs=signs,
        scales=dict(e.dense.scales),
        layer=e.layer,
        kind=e.kind,
        token_index=e.token_index,
    )


def effective_bits(
    vector_len: int, num_outliers: float, include_scales: bool = True
) -> float:
    """Bits per element of the fused encoding.

    Accepts fractional outlier counts so expected rates (for example 10% of
    a 128-wide vector) can be evaluated directly.
    """
    if vector_len <= 0:
        raise ConfigError(f"vector_len must be positive, got {vector_len}")
    if not 0 <= num_outliers <= vector_len:
        raise ConfigError(
            f"outlier count {num_outliers} outside [0, {vector_len}]"
        )
    bits = 4.0 * vector_len + 8.0 * num_outliers
    if include_scales:
        bits += SCALE_BITS
    return bits / vector_len
