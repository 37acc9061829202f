"""Byte-level encoding layout and encode/decode bijection."""
import numpy as np
import pytest

from kvqbench.encoding import (
    DenseBlock,
    EncodedToken,
    SparseEntry,
    decode,
    effective_bits,
    encode,
)
from kvqbench.errors import ConfigError, FormatError
from kvqbench.profiler import ThresholdQuad, extract_quad
from kvqbench.quant import (
    GroupKind,
    GroupLabel,
    dequantize_token,
    is_middle,
    quantize_token,
)
from kvqbench.trace import KvVector, canonical_fp16

WORKED_VALUES = [-10.0, -2.0, -1.0, -0.2, 0.1, 0.3, 1.0, 2.0, 3.0, 12.0]
WORKED_QUAD = ThresholdQuad(-6.0, -0.25, 0.25, 7.5)


def worked_encoded() -> EncodedToken:
    padded = np.pad(np.array(WORKED_VALUES), (0, 54), constant_values=1.0)
    return encode(quantize_token(KvVector(padded), WORKED_QUAD))


def test_sparse_entry_byte_layout():
    assert SparseEntry(0, is_outer=True, negative=True).to_byte() == 0x03
    assert SparseEntry(3, is_outer=False, negative=True).to_byte() == 0x0D
    assert SparseEntry(4, is_outer=False, negative=False).to_byte() == 0x10
    assert SparseEntry(9, is_outer=True, negative=False).to_byte() == 0x26
    assert SparseEntry(63, is_outer=True, negative=True).to_byte() == 0xFF
    for byte in (0x03, 0x0D, 0x10, 0x26, 0xFF, 0x00):
        assert SparseEntry.from_byte(byte).to_byte() == byte
    with pytest.raises(ConfigError):
        SparseEntry(64, is_outer=False, negative=False)


def test_worked_example_streams():
    e = worked_encoded()
    dense = e.dense_bytes()
    # 64 codes -> 32 packed bytes, then 12 scale bytes.
    assert len(dense) == 44
    assert dense[:5] == bytes([0x0D, 0xF3, 0x68, 0xC8, 0xFF])
    assert dense[5:32] == bytes([0x88]) * 27
    scale_view = np.frombuffer(dense[32:], dtype="<f2").astype(np.float64)
    assert scale_view.tolist() == [
        -1.75,
        2.75,
        0.0,
        float(np.float32(np.float16(0.2))),
        0.0,
        4.5,
    ]

    assert e.sparse_bytes() == bytes([0x03, 0x0D, 0x10, 0x26])
    assert e.sparse_counts == (4,)  # one segment, four entries
    assert e.num_outliers == 4
    assert e.total_bits() == 4 * 64 + 8 * 4 + 96
    assert len(e.dense_bytes()) + len(e.sparse_bytes()) == 48


def test_worked_example_decodes_to_original_token():
    padded = np.pad(np.array(WORKED_VALUES), (0, 54), constant_values=1.0)
    q = quantize_token(KvVector(padded), WORKED_QUAD)
    back = decode(encode(q))
    assert np.array_equal(back.labels, q.labels)
    assert np.array_equal(back.codes, q.codes)
    assert np.array_equal(back.signs, q.signs)
    assert back.scales == q.scales


def test_stream_roundtrip_through_bytes():
    e = worked_encoded()
    rebuilt = EncodedToken.from_streams(
        e.dense_bytes(), e.sparse_bytes(), e.sparse_counts
    )
    assert rebuilt.entries == e.entries
    assert rebuilt.sparse_counts == e.sparse_counts
    assert np.array_equal(rebuilt.dense.codes, e.dense.codes)
    assert rebuilt.dense.scales == e.dense.scales


def test_multi_segment_positions():
    rng = np.random.default_rng(41)
    x = canonical_fp16(np.float16(rng.normal(scale=2.0, size=256)))
    quad = extract_quad(x)
    q = quantize_token(KvVector(x), quad)
    e = encode(q)
    assert len(e.sparse_counts) == 4
    positions = e.outlier_positions()
    expected = np.nonzero(~is_middle(q.labels))[0]
    assert np.array_equal(positions, expected)
    assert np.all(np.diff(positions) > 0)


def test_roundtrip_fuzz_codes_signs_scales_exact():
    rng = np.random.default_rng(43)
    for _ in range(50):
        x = canonical_fp16(np.float16(rng.normal(scale=3.0, size=128)))
        quad = extract_quad(x)
        q = quantize_token(KvVector(x), quad)
        back = decode(encode(q))
        assert np.array_equal(back.codes, q.codes)
        assert np.array_equal(back.signs, q.signs)
        assert back.scales == q.scales
        # Group membership is exact; only the Middle side may be
        # re-derived differently, and then only by the sign rule.
        assert np.array_equal(is_middle(back.labels), is_middle(q.labels))
        mid = is_middle(q.labels)
        s = q.scales[GroupKind.MIDDLE]
        r_hat = (
            q.codes[mid].astype(np.float64) / s.sigma + s.min
            if s.sigma > 0
            else np.full(int(mid.sum()), s.min)
        )
        expected_side = np.where(
            r_hat >= 0, GroupLabel.MIDDLE_HIGH, GroupLabel.MIDDLE_LOW
        )
        assert np.array_equal(back.labels[mid], expected_side)
        outlier = ~mid
        assert np.array_equal(back.labels[outlier], q.labels[outlier])


def test_decoded_token_still_meets_error_bound():
    rng = np.random.default_rng(47)
    x = canonical_fp16(np.float16(rng.normal(scale=2.0, size=192)))
    quad = extract_quad(x)
    q = quantize_token(KvVector(x), quad)
    x_direct = dequantize_token(q, quad)
    x_decoded = dequantize_token(decode(encode(q)), quad)
    # Where the re-derived Middle side agrees the reconstruction is
    # identical; where it flips, the shift-back lands exactly one inner
    # band width away. Nothing else may change.
    width = quad.t_hi_inner - quad.t_lo_inner
    d = np.abs(x_decoded - x_direct)
    assert np.all((d < 1e-12) | (np.abs(d - width) < 1e-12))


def test_counts_and_entry_validation():
    e = worked_encoded()
    with pytest.raises(ConfigError):
        EncodedToken(e.dense, (3,), e.entries)  # counts do not sum
    with pytest.raises(ConfigError):
        EncodedToken(e.dense, (4, 0), e.entries)  # wrong segment count
    disordered = (e.entries[1], e.entries[0]) + e.entries[2:]
    with pytest.raises(ConfigError):
        EncodedToken(e.dense, e.sparse_counts, disordered)
    duplicate = (e.entries[0], e.entries[0]) + e.entries[2:]
    with pytest.raises(ConfigError):
        EncodedToken(e.dense, e.sparse_counts, duplicate)


def test_from_streams_fails_closed():
    e = worked_encoded()
    dense = e.dense_bytes()
    sparse = e.sparse_bytes()
    with pytest.raises(FormatError):
        EncodedToken.from_streams(dense[:-1], sparse, e.sparse_counts)
    with pytest.raises(FormatError):
        EncodedToken.from_streams(dense, sparse[:-1], e.sparse_counts)
    with pytest.raises(FormatError):
        EncodedToken.from_streams(dense, sparse, (3,))
    with pytest.raises(FormatError):
        EncodedToken.from_streams(dense, bytes([0x0D, 0x03, 0x10, 0x26]), (4,))
    with pytest.raises(FormatError):
        EncodedToken.from_streams(dense, sparse, ())
    # Scale records violating min <= max are rejected.
    bad_scales = bytearray(dense)
    bad_scales[32:34], bad_scales[34:36] = dense[34:36], dense[32:34]
    with pytest.raises(FormatError):
        EncodedToken.from_streams(bytes(bad_scales), sparse, e.sparse_counts)


def test_effective_bits_formula():
    assert effective_bits(128, 12.8, include_scales=False) == pytest.approx(4.8)
    assert effective_bits(128, 12.8) == pytest.approx(5.55)
    assert effective_bits(4096, 409.6) == pytest.approx(4.8234375)
    assert effective_bits(64, 0, include_scales=False) == 4.0
    with pytest.raises(ConfigError):
        effective_bits(0, 0)
    with pytest.raises(ConfigError):
        effective_bits(64, 65)


def test_dense_block_validation():
    codes = np.zeros(64, dtype=np.uint8)
    scales = worked_encoded().dense.scales
    DenseBlock(codes, scales)
    with pytest.raises(ConfigError):
        DenseBlock(np.full(64, 16, dtype=np.uint8), scales)
    with pytest.raises(ConfigError):
        DenseBlock(np.zeros(63, dtype=np.uint8), scales)
    missing = dict(scales)
    del missing[GroupKind.OUTER]
    with pytest.raises(ConfigError):
        DenseBlock(codes, missing)
