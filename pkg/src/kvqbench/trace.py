"""KV-cache model: vectors, traces, synthetic generation, and the binary trace format.

Key design decisions:
- Values carry 32-bit-real semantics but are forced onto the half-precision
  grid on ingestion (quantize-on-load). Downstream error bounds can then treat
  "one fp16 ulp" as an exact slack term instead of an estimate.
- A trace is stored as one contiguous (num_tokens, vector_len) float32 block
  per (layer, kind) cell, so profiling can run order statistics per cell
  without gathering.
- The file format is little-endian throughout: magic "OKVT", a u16 version,
  a fixed metadata block plus a length-prefixed model name, then float16
  payload ordered by (layer, kind, token). The content digest is the sha256
  of exactly this serialization and is computed when a trace is built or
  loaded, then cached, so provenance stamping is free for consumers.
- Synthetic generation is deterministic given (spec, seed): one RNG stream,
  cells drawn in (layer, kind) order.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ConfigError, FormatError

TRACE_MAGIC = b"OKVT"
TRACE_VERSION = 1
DEFAULT_SEGMENT_LEN = 64

# Header layout after the 4-byte magic: version u16, num_layers u32,
# vector_len u32, num_kv_heads u32, head_dim u32, num_tokens u32,
# kinds bitmask u8, model-name byte length u16 (name bytes follow).
_HEADER_STRUCT = struct.Struct("<H5IBH")


class KvKind(enum.Enum):
    """Which side of the KV cache a vector belongs to."""

    KEY = "key"
    VALUE = "value"

    @property
    def bit(self) -> int:
        return 1 if self is KvKind.KEY else 2


def _kinds_to_mask(kinds: tuple[KvKind, ...]) -> int:
    mask = 0
    for kind in kinds:
        mask |= kind.bit
    return mask


def _mask_to_kinds(mask: int) -> tuple[KvKind, ...]:
    kinds = []
    if mask & 1:
        kinds.append(KvKind.KEY)
    if mask & 2:
        kinds.append(KvKind.VALUE)
    return tuple(kinds)


@dataclasses.dataclass(frozen=True)
class GroupConfig:
    """Grouping and bit-width parameters shared by the whole pipeline.

    Attributes:
        ratio_outer: Target fraction of elements in the outer group, split
            evenly across the two signed tails.
        ratio_middle: Target fraction in the middle group.
        ratio_inner: Target fraction in the inner (near-zero) group.
        bits_middle: Dense code width. Fixed at 4 by the fused layout.
        bits_outlier: Outlier code width (1 sign + 4 magnitude). Fixed at 5.
        segment_len: Sparse-index segment size; 6-bit indices imply 64.
    """

    ratio_outer: float = 0.04
    ratio_middle: float = 0.90
    ratio_inner: float = 0.06
    bits_middle: int = 4
    bits_outlier: int = 5
    segment_len: int = DEFAULT_SEGMENT_LEN

    def __post_init__(self) -> None:
        for name in ("ratio_outer", "ratio_middle", "ratio_inner"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {value!r}")
        total = self.ratio_outer + self.ratio_middle + self.ratio_inner
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(
                f"group ratios must sum to 1 within 1e-9, got {total!r}"
            )
        # The dense nibble stream and the 8-bit COO entry hard-code these
        # widths; parameterizing them is explicitly out of scope.
        if self.bits_middle != 4:
            raise ConfigError(f"bits_middle is fixed at 4, got {self.bits_middle}")
        if self.bits_outlier != 5:
            raise ConfigError(f"bits_outlier is fixed at 5, got {self.bits_outlier}")
        if self.segment_len != 64:
            raise ConfigError(
                f"segment_len is fixed at 64 (6-bit relative indices), "
                f"got {self.segment_len}"
            )


def canonical_fp16(values: object) -> np.ndarray:
    """Round values onto the half-precision grid, returned as float32.

    Args:
        values: 1-D array-like of finite reals.

    Returns:
        Read-only float32 array whose entries are exactly representable in
        half precision.

    Raises:
        ConfigError: On non-finite input or magnitudes beyond the fp16 range.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigError(f"expected a 1-D vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ConfigError("vector must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("vector contains non-finite values")
    with np.errstate(over="ignore"):
        half = arr.astype(np.float16)
    if not np.all(np.isfinite(half)):
        raise ConfigError("vector magnitude exceeds the half-precision range")
    out = half.astype(np.float32)
    out.setflags(write=False)
    return out


def _canonical_block(arr: np.ndarray) -> np.ndarray:
    """Canonicalize a (tokens, vector_len) float block without float64 blowup."""
    block = np.asarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(block)):
        raise ConfigError("trace block contains non-finite values")
    with np.errstate(over="ignore"):
        half = block.astype(np.float16)
    if not np.all(np.isfinite(half)):
        raise ConfigError("trace block magnitude exceeds the half-precision range")
    out = half.astype(np.float32)
    out.setflags(write=False)
    return out


@dataclasses.dataclass
class KvVector:
    """One cached key or value vector for a single token.

    Values are canonicalized (finite, fp16-representable, read-only float32)
    on construction. Read-only float32 input, such as a view handed out by
    KvTrace, is trusted as already canonical and not copied.
    """

    values: np.ndarray
    layer: int = 0
    kind: KvKind = KvKind.KEY
    token_index: int = 0

    def __post_init__(self) -> None:
        v = self.values
        if not (
            isinstance(v, np.ndarray)
            and v.dtype == np.float32
            and not v.flags.writeable
            and v.ndim == 1
        ):
            self.values = canonical_fp16(v)
        if self.layer < 0 or self.token_index < 0:
            raise ConfigError("layer and token_index must be non-negative")
        if not isinstance(self.kind, KvKind):
            raise ConfigError(f"kind must be a KvKind, got {self.kind!r}")
        if len(self.values) % DEFAULT_SEGMENT_LEN != 0:
            raise ConfigError(
                f"vector length {len(self.values)} is not a multiple of the "
                f"segment length {DEFAULT_SEGMENT_LEN}"
            )

    def __len__(self) -> int:
        return len(self.values)


@dataclasses.dataclass(frozen=True)
class TraceMeta:
    """Trace-wide metadata, embedded in the file header."""

    model_name: str
    num_layers: int
    vector_len: int
    num_kv_heads: int
    head_dim: int
    num_tokens: int
    kinds: tuple[KvKind, ...] = (KvKind.KEY, KvKind.VALUE)

    def __post_init__(self) -> None:
        if self.vector_len <= 0:
            raise ConfigError("vector_len must be positive")
        for name in ("num_layers", "num_kv_heads", "head_dim", "num_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.vector_len != self.num_kv_heads * self.head_dim:
            raise ConfigError(
                f"vector_len {self.vector_len} != num_kv_heads * head_dim "
                f"({self.num_kv_heads} * {self.head_dim})"
            )
        if self.vector_len % DEFAULT_SEGMENT_LEN != 0:
            raise ConfigError(
                f"vector_len {self.vector_len} is not a multiple of the "
                f"segment length {DEFAULT_SEGMENT_LEN}"
            )
        if not self.kinds or len(set(self.kinds)) != len(self.kinds):
            raise ConfigError("kinds must be a non-empty set of distinct KvKind")
        if self.kinds != tuple(sorted(self.kinds, key=lambda k: k.bit)):
            raise ConfigError("kinds must be ordered KEY before VALUE")
        if len(self.model_name.encode("utf-8")) > 0xFFFF:
            raise ConfigError("model_name exceeds 65535 UTF-8 bytes")


class KvTrace:
    """A full KV capture: one float32 block per (layer, kind) cell.

    Blocks have shape (num_tokens, vector_len) and hold fp16-representable
    values. The content digest identifies the canonical serialization.
    """

    def __init__(self, meta: TraceMeta, blocks: dict[tuple[int, KvKind], np.ndarray]):
        expected = {
            (layer, kind)
            for layer in range(meta.num_layers)
            for kind in meta.kinds
        }
        if set(blocks) != expected:
            def describe(cells):
                return sorted((layer, kind.value) for layer, kind in cells)[:4]

            raise ConfigError(
                f"trace blocks do not cover exactly every (layer, kind) cell: "
                f"missing {describe(expected - set(blocks))}, "
                f"extra {describe(set(blocks) - expected)}"
            )
        canonical: dict[tuple[int, KvKind], np.ndarray] = {}
        for cell, arr in blocks.items():
            block = _canonical_block(arr)
            if block.shape != (meta.num_tokens, meta.vector_len):
                raise ConfigError(
                    f"block {cell} has shape {block.shape}, expected "
                    f"{(meta.num_tokens, meta.vector_len)}"
                )
            canonical[cell] = block
        self.meta = meta
        self._blocks = canonical
        self._digest: str | None = None

    def tokens(self, layer: int, kind: KvKind) -> np.ndarray:
        """Return the (num_tokens, vector_len) block for one cell."""
        try:
            return self._blocks[(layer, kind)]
        except KeyError:
            raise ConfigError(
                f"trace has no block for layer {layer}, kind {kind.value}"
            ) from None

    def vector(self, layer: int, kind: KvKind, token_index: int) -> KvVector:
        block = self.tokens(layer, kind)
        if not (0 <= token_index < self.meta.num_tokens):
            raise ConfigError(
                f"token_index {token_index} out of range "
                f"[0, {self.meta.num_tokens})"
            )
        return KvVector(block[token_index], layer, kind, token_index)

    def cells(self) -> Iterator[tuple[int, KvKind]]:
        for layer in range(self.meta.num_layers):
            for kind in self.meta.kinds:
                yield (layer, kind)

    def content_digest(self) -> str:
        """sha256 over the canonical file serialization, cached."""
        if self._digest is None:
            h = hashlib.sha256()
            for chunk in _serialized_chunks(self):
                h.update(chunk)
            self._digest = "sha256:" + h.hexdigest()
        return self._digest


# ---------------------------------------------------------------------------
# Binary trace format
# ---------------------------------------------------------------------------


def _serialized_chunks(trace: KvTrace) -> Iterator[bytes]:
    meta = trace.meta
    name = meta.model_name.encode("utf-8")
    yield TRACE_MAGIC
    yield _HEADER_STRUCT.pack(
        TRACE_VERSION,
        meta.num_layers,
        meta.vector_len,
        meta.num_kv_heads,
        meta.head_dim,
        meta.num_tokens,
        _kinds_to_mask(meta.kinds),
        len(name),
    )
    yield name
    for cell in trace.cells():
        yield trace.tokens(*cell).astype("<f2").tobytes()


def save_trace(trace: KvTrace, path: str) -> str:
    """Write a trace to disk in the canonical binary format.

    Returns:
        The content digest of the written bytes.
    """
    h = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in _serialized_chunks(trace):
            fh.write(chunk)
            h.update(chunk)
    digest = "sha256:" + h.hexdigest()
    # Serialization is canonical, so the file digest is the content digest.
    trace._digest = digest
    return digest


def _read_exact(fh: BinaryIO, count: int, h, offset: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"file truncated in {what}: expected {count} bytes at offset "
            f"{offset}, found {len(data)}"
        )
    h.update(data)
    return data


def load_trace(path: str) -> KvTrace:
    """Read a trace file, validating structure before payload.

    Raises:
        FormatError: On bad magic, unsupported version, zero-sized header
            fields, truncation, or trailing bytes; messages carry the byte
            offset and expected vs actual sizes.
    """
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRACE_MAGIC:
            raise FormatError(
                f"bad magic at offset 0: expected {TRACE_MAGIC!r}, got {magic!r}"
            )
        h.update(magic)
        offset = 4
        header = _read_exact(fh, _HEADER_STRUCT.size, h, offset, "header")
        (
            version,
            num_layers,
            vector_len,
            num_kv_heads,
            head_dim,
            num_tokens,
            kinds_mask,
            name_len,
        ) = _HEADER_STRUCT.unpack(header)
        offset += _HEADER_STRUCT.size
        if version != TRACE_VERSION:
            raise FormatError(
                f"unsupported trace version {version} at offset 4 "
                f"(supported: {TRACE_VERSION})"
            )
        # Structural header checks run before any payload byte is read.
        if vector_len == 0:
            raise FormatError("header declares vector_len=0 at offset 8")
        if num_layers == 0 or num_tokens == 0:
            raise FormatError(
                "header declares an empty trace (num_layers or num_tokens is 0)"
            )
        kinds = _mask_to_kinds(kinds_mask)
        if not kinds or kinds_mask > 3:
            raise FormatError(
                f"invalid kinds bitmask {kinds_mask:#x} at offset 24"
            )
        name = _read_exact(fh, name_len, h, offset, "model name")
        offset += name_len
        try:
            meta = TraceMeta(
                model_name=name.decode("utf-8"),
                num_layers=num_layers,
                vector_len=vector_len,
                num_kv_heads=num_kv_heads,
                head_dim=head_dim,
                num_tokens=num_tokens,
                kinds=kinds,
            )
        except (ConfigError, UnicodeDecodeError) as exc:
            raise FormatError(f"invalid header metadata: {exc}") from exc

        block_bytes = num_tokens * vector_len * 2
        expected_total = offset + block_bytes * num_layers * len(kinds)
        blocks: dict[tuple[int, KvKind], np.ndarray] = {}
        for layer in range(num_layers):
            for kind in kinds:
                data = fh.read(block_bytes)
                if len(data) != block_bytes:
                    raise FormatError(
                        f"payload truncated: expected {expected_total} total "
                        f"bytes, found {offset + len(data)}"
                    )
                h.update(data)
                offset += block_bytes
                half = np.frombuffer(data, dtype="<f2").reshape(
                    num_tokens, vector_len
                )
                blocks[(layer, kind)] = half.astype(np.float32)
        trailing = fh.read(1)
        if trailing:
            raise FormatError(
                f"metadata/payload length mismatch: expected {expected_total} "
                f"bytes, file continues at offset {offset}"
            )
    trace = KvTrace(meta, blocks)
    trace._digest = "sha256:" + h.hexdigest()
    return trace


# ---------------------------------------------------------------------------
# Synthetic traces
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Distribution spec for synthetic KV traces.

    Attributes:
        num_layers, num_kv_heads, head_dim, num_tokens: Trace dimensions;
            vector_len is num_kv_heads * head_dim.
        base_std: Base Gaussian scale. Zero yields a degenerate all-equal trace.
        layer_scales: Optional per-layer scale factors (layer ranges differ
            across depth when these differ). Defaults to all ones.
        value_scale: Extra scale applied to the VALUE cache relative to KEY.
        outlier_channels: Channel indices whose magnitudes are multiplied.
        outlier_multiplier: Magnitude multiplier for designated channels.
        exception_rate: Per-element probability of a sporadic magnified value
            in any channel (rare off-channel spikes).
        kinds: Which cache sides to generate.
        model_name: Free-form name recorded in trace metadata.
    """

    num_layers: int
    num_kv_heads: int
    head_dim: int
    num_tokens: int
    base_std: float = 1.0
    layer_scales: tuple[float, ...] | None = None
    value_scale: float = 1.0
    outlier_channels: tuple[int, ...] = ()
    outlier_multiplier: float = 8.0
    exception_rate: float = 0.0
    kinds: tuple[KvKind, ...] = (KvKind.KEY, KvKind.VALUE)
    model_name: str = "synthetic"

    def __post_init__(self) -> None:
        if self.base_std < 0:
            raise ConfigError("base_std must be non-negative")
        if self.value_scale <= 0:
            raise ConfigError("value_scale must be positive")
        if self.outlier_multiplier <= 0:
            raise ConfigError("outlier_multiplier must be positive")
        if not (0.0 <= self.exception_rate <= 1.0):
            raise ConfigError("exception_rate must be in [0, 1]")
        vector_len = self.num_kv_heads * self.head_dim
        for ch in self.outlier_channels:
            if not (0 <= ch < vector_len):
                raise ConfigError(
                    f"outlier channel {ch} out of range [0, {vector_len})"
                )
        if self.layer_scales is not None:
            if len(self.layer_scales) != self.num_layers:
                raise ConfigError(
                    f"layer_scales has {len(self.layer_scales)} entries for "
                    f"{self.num_layers} layers"
                )
            if any(s < 0 for s in self.layer_scales):
                raise ConfigError("layer_scales must be non-negative")

    @property
    def vector_len(self) -> int:
        return self.num_kv_heads * self.head_dim

    def meta(self) -> TraceMeta:
        return TraceMeta(
            model_name=self.model_name,
            num_layers=self.num_layers,
            vector_len=self.vector_len,
            num_kv_heads=self.num_kv_heads,
            head_dim=self.head_dim,
            num_tokens=self.num_tokens,
            kinds=self.kinds,
        )


def generate_synthetic_trace(spec: SyntheticSpec, seed: int) -> KvTrace:
    """Draw a deterministic synthetic trace from a distribution spec.

    Cells are drawn in (layer, kind) order from a single RNG stream, so the
    result is a pure function of (spec, seed).
    """
    meta = spec.meta()
    rng = np.random.default_rng(seed)
    scales = spec.layer_scales or tuple(1.0 for _ in range(spec.num_layers))
    channels = np.asarray(spec.outlier_channels, dtype=np.intp)
    blocks: dict[tuple[int, KvKind], np.ndarray] = {}
    for layer in range(spec.num_layers):
        for kind in spec.kinds:
            scale = spec.base_std * scales[layer]
            if kind is KvKind.VALUE:
                scale *= spec.value_scale
            x = rng.standard_normal(
                (spec.num_tokens, spec.vector_len), dtype=np.float32
            )
            x *= np.float32(scale)
            if channels.size:
                x[:, channels] *= np.float32(spec.outlier_multiplier)
            if spec.exception_rate > 0.0:
                mask = rng.random((spec.num_tokens, spec.vector_len)) < spec.exception_rate
                x[mask] *= np.float32(spec.outlier_multiplier)
            blocks[(layer, kind)] = x
    return KvTrace(meta, blocks)
