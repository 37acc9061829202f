"""Paged store behavior: splits, bursts, capacity, and fidelity."""
import numpy as np
import pytest

from kvqbench.encoding import EncodedToken, encode
from kvqbench.errors import CapacityError, ConfigError, MmuLookupError
from kvqbench.mmu import BURST_BYTES, PAGE_BYTES, Mmu, StreamKey
from kvqbench.profiler import extract_quad
from kvqbench.quant import quantize_token
from kvqbench.trace import KvKind, KvVector, canonical_fp16

KEY = StreamKey(request=0, layer=0, kind=KvKind.KEY, head=0)

# A 128-wide token's dense stream: 64 packed code bytes + 12 scale bytes.
TOKEN_BYTES = 76


def filled_mmu(num_tokens: int, pages: int = 1024) -> tuple[Mmu, bytes]:
    rng = np.random.default_rng(59)
    mmu = Mmu(num_cores=1, pages_per_core=pages)
    blob = b""
    for _ in range(num_tokens):
        data = rng.integers(0, 256, TOKEN_BYTES, dtype=np.uint8).tobytes()
        mmu.write_token(KEY, data)
        blob += data
    return mmu, blob


def test_single_token_write_is_one_transaction_two_bursts():
    mmu = Mmu()
    tx = mmu.write_token(KEY, bytes(TOKEN_BYTES))
    assert len(tx) == 1
    assert tx[0].nbytes == TOKEN_BYTES
    assert tx[0].bursts == 2  # ceil(76 / 64)
    assert tx[0].page == 0 and tx[0].offset == 0


def test_page_boundary_write_splits():
    mmu, _ = filled_mmu(53)
    # 53 * 76 = 4028 bytes sit in page 0; the 54th token splits 68 + 8.
    tx = mmu.write_token(KEY, bytes(TOKEN_BYTES))
    assert [(t.page, t.offset, t.nbytes, t.bursts) for t in tx] == [
        (0, 4028, 68, 2),
        (1, 0, 8, 1),
    ]


def test_read_sequence_one_transaction_per_page():
    mmu, blob = filled_mmu(53)
    before = mmu.stats()
    data = mmu.read_sequence(KEY)
    after = mmu.stats()
    assert data == blob
    assert after.read_transactions - before.read_transactions == 1
    assert after.read_bytes - before.read_bytes == 4028
    assert after.read_bursts - before.read_bursts == 63  # ceil(4028 / 64)


def test_burst_totals_over_256_tokens():
    mmu, blob = filled_mmu(256)
    stats = mmu.stats()
    # Four page-crossing writes (at tokens 53, 107, 161, 215) split into
    # 68+8, 60+16, 52+24, and 44+32 bytes; the other 252 writes cost two
    # bursts each.
    assert stats.write_transactions == 252 + 8
    assert stats.write_bursts == 252 * 2 + 3 + 2 + 2 + 2
    assert stats.write_bytes == 256 * TOKEN_BYTES
    assert stats.write_burst_efficiency == pytest.approx(19456 / 32832)

    data = mmu.read_sequence(KEY)
    assert data == blob
    stats = mmu.stats()
    assert stats.read_transactions == 5
    # Pages are burst-multiples, so the whole-sequence burst count hits the
    # contiguous closed form exactly.
    assert stats.read_bursts == -(-len(blob) // BURST_BYTES) == 304
    assert stats.read_burst_efficiency == 1.0


def test_fragmentation_accounts_tail_waste():
    mmu, _ = filled_mmu(1)
    stats = mmu.stats()
    assert stats.pages_allocated == 1
    assert stats.bytes_stored == TOKEN_BYTES
    assert stats.fragmentation == pytest.approx(1.0 - 76 / PAGE_BYTES)
    assert 0.0 <= stats.fragmentation < 1.0


def test_capacity_error_is_atomic_and_named():
    mmu, blob = filled_mmu(107, pages=2)  # 8132 of 8192 bytes used
    before = mmu.stats()
    with pytest.raises(CapacityError, match=r"1 new pages.*0 of 2"):
        mmu.write_token(KEY, bytes(TOKEN_BYTES))
    after = mmu.stats()
    assert after == before
    assert mmu.read_sequence(KEY) == blob
    assert mmu.token_count(KEY) == 107


def test_failed_sparse_append_rolls_back_nothing():
    mmu = Mmu(num_cores=1, pages_per_core=1)
    mmu.write_token(KEY, bytes(4000))
    # The next dense chunk fits in the tail page, but the sparse stream
    # would need a fresh page; the whole write must be refused up front.
    with pytest.raises(CapacityError):
        mmu.write_token(KEY, bytes(90), bytes(10), (10,))
    assert len(mmu.read_sequence(KEY)) == 4000
    assert mmu.token_count(KEY) == 1
    stats = mmu.stats()
    assert stats.bytes_stored == 4000
    assert stats.pages_allocated == 1


def test_cores_are_independent():
    mmu = Mmu(num_cores=2, pages_per_core=2)
    other = StreamKey(request=1, layer=0, kind=KvKind.KEY)
    assert mmu.core_of(KEY) == 0
    assert mmu.core_of(other) == 1
    for _ in range(107):
        mmu.write_token(KEY, bytes(TOKEN_BYTES))
    with pytest.raises(CapacityError):
        mmu.write_token(KEY, bytes(TOKEN_BYTES))
    # Core 1 is untouched by core 0's exhaustion.
    mmu.write_token(other, bytes(TOKEN_BYTES))
    assert mmu.stats(1).pages_allocated == 1
    assert mmu.stats(1).write_transactions == 1
    assert mmu.stats(0).pages_allocated == 2


def test_sparse_and_dense_share_one_pool():
    mmu = Mmu(num_cores=1, pages_per_core=4)
    mmu.write_token(KEY, bytes(100), bytes([0x03, 0x0D]), (2,))
    stats = mmu.stats()
    assert stats.pages_allocated == 2  # one per table
    assert mmu.sparse_token_sizes(KEY) == (2,)
    assert mmu.sparse_segment_counts(KEY) == ((2,),)
    assert mmu.read_sequence(KEY, table="sparse") == bytes([0x03, 0x0D])


def test_sparse_stream_may_stay_empty():
    mmu = Mmu()
    mmu.write_token(KEY, bytes(TOKEN_BYTES))
    assert mmu.read_sequence(KEY, table="sparse") == b""
    assert mmu.sparse_token_sizes(KEY) == (0,)
    assert mmu.sparse_segment_counts(KEY) == ((),)


def test_lookup_and_argument_errors():
    mmu = Mmu()
    with pytest.raises(MmuLookupError):
        mmu.read_sequence(KEY)
    with pytest.raises(ConfigError):
        mmu.write_token(KEY, b"")
    with pytest.raises(ConfigError):
        mmu.write_token(KEY, bytes(10), bytes(3), (2,))
    mmu.write_token(KEY, bytes(10))
    with pytest.raises(ConfigError):
        mmu.read_sequence(KEY, table="bogus")
    with pytest.raises(ConfigError):
        Mmu(page_bytes=100)  # not a burst multiple
    with pytest.raises(ConfigError):
        StreamKey(request=-1, layer=0, kind=KvKind.KEY)


def test_encoded_tokens_roundtrip_through_store():
    rng = np.random.default_rng(61)
    mmu = Mmu(num_cores=1, pages_per_core=64)
    originals: list[EncodedToken] = []
    for index in range(20):
        x = canonical_fp16(np.float16(rng.normal(scale=2.5, size=128)))
        vec = KvVector(x, layer=0, kind=KvKind.KEY, token_index=index)
        e = encode(quantize_token(vec, extract_quad(x)))
        mmu.write_token(
            KEY, e.dense_bytes(), e.sparse_bytes(), e.sparse_counts
        )
        originals.append(e)

    dense = mmu.read_sequence(KEY)
    sparse = mmu.read_sequence(KEY, table="sparse")
    sizes = mmu.dense_token_sizes(KEY)
    sparse_sizes = mmu.sparse_token_sizes(KEY)
    counts = mmu.sparse_segment_counts(KEY)
    assert sizes == (TOKEN_BYTES,) * 20

    d_off = s_off = 0
    for i, original in enumerate(originals):
        d_chunk = dense[d_off : d_off + sizes[i]]
        s_chunk = sparse[s_off : s_off + sparse_sizes[i]]
        rebuilt = EncodedToken.from_streams(d_chunk, s_chunk, counts[i])
        assert rebuilt.entries == original.entries
        assert np.array_equal(rebuilt.dense.codes, original.dense.codes)
        assert rebuilt.dense.scales == original.dense.scales
        d_off += sizes[i]
        s_off += sparse_sizes[i]
    assert (d_off, s_off) == (len(dense), len(sparse))
