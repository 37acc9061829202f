"""Trace model, binary format, and synthetic generation."""
from __future__ import annotations

import hashlib
import struct

import numpy as np
import pytest

from kvqbench.errors import ConfigError, FormatError
from kvqbench.trace import (
    GroupConfig,
    KvKind,
    KvTrace,
    KvVector,
    SyntheticSpec,
    TraceMeta,
    generate_synthetic_trace,
    load_trace,
    save_trace,
)


def small_trace(model_name="tiny", kinds=(KvKind.KEY, KvKind.VALUE)):
    meta = TraceMeta(
        model_name=model_name,
        num_layers=2,
        vector_len=64,
        num_kv_heads=2,
        head_dim=32,
        num_tokens=3,
        kinds=kinds,
    )
    rng = np.random.default_rng(7)
    blocks = {
        (layer, kind): rng.standard_normal((3, 64)).astype(np.float32)
        for layer in range(2)
        for kind in kinds
    }
    return KvTrace(meta, blocks)


class TestCanonicalization:
    def test_values_snap_to_half_precision_grid(self):
        v = KvVector([0.3] * 64, layer=0, kind=KvKind.KEY, token_index=0)
        # 0.3 is not representable in half precision; nearest is 0.300048828125.
        assert v.values[0] == np.float32(0.300048828125)
        assert not v.values.flags.writeable

    def test_non_finite_rejected(self):
        with pytest.raises(ConfigError):
            KvVector([float("nan")] * 64, 0, KvKind.KEY, 0)
        with pytest.raises(ConfigError):
            KvVector([float("inf")] * 64, 0, KvKind.KEY, 0)

    def test_overflowing_magnitude_rejected(self):
        # 1e6 overflows the fp16 range (max finite 65504).
        with pytest.raises(ConfigError):
            KvVector([1e6] * 64, 0, KvKind.KEY, 0)

    def test_length_must_be_segment_multiple(self):
        with pytest.raises(ConfigError):
            KvVector([0.0] * 10, 0, KvKind.KEY, 0)


class TestGroupConfig:
    def test_defaults_valid(self):
        cfg = GroupConfig()
        assert (cfg.ratio_outer, cfg.ratio_middle, cfg.ratio_inner) == (
            0.04,
            0.90,
            0.06,
        )
        assert cfg.bits_middle == 4
        assert cfg.bits_outlier == 5
        assert cfg.segment_len == 64

    def test_ratio_sum_enforced(self):
        with pytest.raises(ConfigError):
            GroupConfig(ratio_outer=0.04, ratio_middle=0.90, ratio_inner=0.07)
        # Within 1e-9 is accepted.
        GroupConfig(ratio_outer=0.04, ratio_middle=0.90, ratio_inner=0.06 + 5e-10)

    def test_fixed_widths_enforced(self):
        with pytest.raises(ConfigError):
            GroupConfig(bits_middle=3)
        with pytest.raises(ConfigError):
            GroupConfig(bits_outlier=6)
        with pytest.raises(ConfigError):
            GroupConfig(segment_len=32)


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        trace = small_trace(model_name="roundtrip-model")
        path = tmp_path / "t.okvt"
        digest = save_trace(trace, str(path))
        loaded = load_trace(str(path))
        assert loaded.meta == trace.meta
        for cell in trace.cells():
            np.testing.assert_array_equal(loaded.tokens(*cell), trace.tokens(*cell))
        assert loaded.content_digest() == digest == trace.content_digest()
        # Saving the loaded trace reproduces the file byte for byte.
        path2 = tmp_path / "t2.okvt"
        save_trace(loaded, str(path2))
        assert path.read_bytes() == path2.read_bytes()

    def test_digest_is_sha256_of_file_bytes(self, tmp_path):
        trace = small_trace()
        path = tmp_path / "t.okvt"
        save_trace(trace, str(path))
        raw = path.read_bytes()
        assert trace.content_digest() == "sha256:" + hashlib.sha256(raw).hexdigest()

    def test_header_layout_frozen(self, tmp_path):
        trace = small_trace(model_name="ab")
        path = tmp_path / "t.okvt"
        save_trace(trace, str(path))
        raw = path.read_bytes()
        assert raw[:4] == b"OKVT"
        version, layers, vlen, heads, dim, tokens, mask, name_len = struct.unpack(
            "<H5IBH", raw[4 : 4 + struct.calcsize("<H5IBH")]
        )
        assert (version, layers, vlen, heads, dim, tokens) == (1, 2, 64, 2, 32, 3)
        assert mask == 3  # KEY | VALUE
        assert name_len == 2
        header_end = 4 + struct.calcsize("<H5IBH")
        assert raw[header_end : header_end + 2] == b"ab"
        # Payload is float16 little-endian, (layer, kind, token) order.
        payload = np.frombuffer(raw[header_end + 2 :], dtype="<f2")
        assert payload.size == 2 * 2 * 3 * 64
        first = trace.tokens(0, KvKind.KEY).astype("<f2").ravel()
        np.testing.assert_array_equal(payload[: first.size], first)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.okvt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError, match="offset 0"):
            load_trace(str(path))

    def test_vector_len_zero_rejected_before_payload(self, tmp_path):
        header = b"OKVT" + struct.pack("<H5IBH", 1, 2, 0, 2, 32, 3, 3, 0)
        path = tmp_path / "zero.okvt"
        # No payload at all: the header check must fire first, not truncation.
        path.write_bytes(header)
        with pytest.raises(FormatError, match="vector_len=0"):
            load_trace(str(path))

    def test_truncated_payload_names_expected_vs_actual(self, tmp_path):
        trace = small_trace()
        path = tmp_path / "t.okvt"
        save_trace(trace, str(path))
        raw = path.read_bytes()
        cut = tmp_path / "cut.okvt"
        cut.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(FormatError, match=rf"expected {len(raw)}.*found"):
            load_trace(str(cut))

    def test_trailing_bytes_rejected(self, tmp_path):
        trace = small_trace()
        path = tmp_path / "t.okvt"
        save_trace(trace, str(path))
        raw = path.read_bytes()
        fat = tmp_path / "fat.okvt"
        fat.write_bytes(raw + b"\x00")
        with pytest.raises(FormatError, match="mismatch"):
            load_trace(str(fat))

    def test_key_only_trace(self, tmp_path):
        trace = small_trace(kinds=(KvKind.KEY,))
        path = tmp_path / "k.okvt"
        save_trace(trace, str(path))
        loaded = load_trace(str(path))
        assert loaded.meta.kinds == (KvKind.KEY,)
        with pytest.raises(ConfigError, match="no block"):
            loaded.tokens(0, KvKind.VALUE)


class TestSyntheticGeneration:
    def test_deterministic_given_spec_and_seed(self):
        spec = SyntheticSpec(num_layers=2, num_kv_heads=1, head_dim=64, num_tokens=16)
        a = generate_synthetic_trace(spec, seed=11)
        b = generate_synthetic_trace(spec, seed=11)
        assert a.content_digest() == b.content_digest()
        c = generate_synthetic_trace(spec, seed=12)
        assert c.content_digest() != a.content_digest()

    def test_zero_scale_degenerates_to_all_equal(self, tmp_path):
        spec = SyntheticSpec(
            num_layers=1, num_kv_heads=1, head_dim=64, num_tokens=8, base_std=0.0
        )
        trace = generate_synthetic_trace(spec, seed=0)
        block = trace.tokens(0, KvKind.KEY)
        assert np.all(block == block.ravel()[0])
        path = tmp_path / "flat.okvt"
        save_trace(trace, str(path))
        loaded = load_trace(str(path))
        np.testing.assert_array_equal(loaded.tokens(0, KvKind.KEY), block)

    def test_outlier_channels_dominate_magnitudes(self):
        spec = SyntheticSpec(
            num_layers=1,
            num_kv_heads=1,
            head_dim=64,
            num_tokens=1000,
            base_std=1.0,
            outlier_channels=(3, 17),
            outlier_multiplier=10.0,
        )
        trace = generate_synthetic_trace(spec, seed=5)
        block = np.abs(trace.tokens(0, KvKind.KEY))
        designated = block[:, [3, 17]].mean()
        others = np.delete(block, [3, 17], axis=1).mean()
        assert designated >= 5.0 * others

    def test_layer_scales_shift_ranges(self):
        spec = SyntheticSpec(
            num_layers=2,
            num_kv_heads=1,
            head_dim=64,
            num_tokens=200,
            layer_scales=(1.0, 4.0),
        )
        trace = generate_synthetic_trace(spec, seed=3)
        s0 = trace.tokens(0, KvKind.KEY).std()
        s1 = trace.tokens(1, KvKind.KEY).std()
        assert s1 > 2.5 * s0

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(num_layers=0, num_kv_heads=1, head_dim=64, num_tokens=1).meta()
        with pytest.raises(ConfigError):
            SyntheticSpec(
                num_layers=1,
                num_kv_heads=1,
                head_dim=64,
                num_tokens=1,
                exception_rate=1.5,
            )
        with pytest.raises(ConfigError):
            SyntheticSpec(
                num_layers=1,
                num_kv_heads=1,
                head_dim=64,
                num_tokens=1,
                outlier_channels=(64,),
            )


class TestTraceValidation:
    def test_blocks_must_cover_cells(self):
        meta = TraceMeta("m", 2, 64, 1, 64, 2)
        blocks = {(0, KvKind.KEY): np.zeros((2, 64), np.float32)}
        with pytest.raises(ConfigError, match="cover"):
            KvTrace(meta, blocks)

    def test_vector_len_head_mismatch(self):
        with pytest.raises(ConfigError, match="num_kv_heads"):
            TraceMeta("m", 1, 64, 2, 64, 1)
