"""Paged memory-management simulator for encoded KV streams.

Each core owns one page pool shared by two management tables: a dense table
for the fixed-size per-token dense streams and a sparse table for the
variable-size outlier entry streams. Streams append sequentially per key
(request, layer, kind, head); requests map to cores round-robin by request
id. Pages never interleave keys, so a stream is a contiguous byte sequence
across its page list.

Transfer accounting models a burst-oriented memory interface: every write
issues one transaction per page it touches and every sequence read issues
one transaction per page of the stream; a transaction of n bytes costs
ceil(n / burst_bytes) bursts. Page size is a multiple of the burst size, so
reading a whole stream costs exactly ceil(total / burst_bytes) bursts.

Failed writes are atomic: page demand is computed up front and nothing is
mutated when the pool cannot satisfy it. Per-token transfer-size metadata
(dense byte sizes, sparse per-segment entry counts) is recorded next to the
streams so callers can re-slice and rebuild encoded tokens after a read.
"""
from __future__ import annotations

import dataclasses

from .errors import CapacityError, ConfigError, MmuLookupError
from .trace import KvKind

PAGE_BYTES = 4096
BURST_BYTES = 64

DENSE_TABLE = "dense"
SPARSE_TABLE = "sparse"


@dataclasses.dataclass(frozen=True)
class StreamKey:
    """Identity of one KV stream: request, layer, cache side, head."""

    request: int
    layer: int
    kind: KvKind
    head: int = 0

    def __post_init__(self) -> None:
        if self.request < 0 or self.layer < 0 or self.head < 0:
            raise ConfigError("stream key fields must be non-negative")
        if not isinstance(self.kind, KvKind):
            raise ConfigError(f"kind must be a KvKind, got {self.kind!r}")


@dataclasses.dataclass(frozen=True)
class Transaction:
    """One page-level transfer."""

    table: str
    page: int
    offset: int
    nbytes: int
    bursts: int


@dataclasses.dataclass
class MmuStats:
    """Per-core pool occupancy and transfer counters."""

    pages_total: int
    pages_allocated: int
    page_bytes: int
    bytes_stored: int
    write_transactions: int
    write_bytes: int
    write_bursts: int
    read_transactions: int
    read_bytes: int
    read_bursts: int

    @property
    def pages_free(self) -> int:
        return self.pages_total - self.pages_allocated

    @property
    def fragmentation(self) -> float:
        """Fraction of allocated page bytes not holding stream data."""
        if self.pages_allocated == 0:
            return 0.0
        capacity = self.pages_allocated * self.page_bytes
        return 1.0 - self.bytes_stored / capacity

    @property
    def write_burst_efficiency(self) -> float:
        if self.write_bursts == 0:
            return 1.0
        return self.write_bytes / (self.write_bursts * BURST_BYTES)

    @property
    def read_burst_efficiency(self) -> float:
        if self.read_bursts == 0:
            return 1.0
        return self.read_bytes / (self.read_bursts * BURST_BYTES)


class PagePool:
    """Fixed budget of pages, allocated lazily and never reclaimed."""

    def __init__(self, num_pages: int, page_bytes: int = PAGE_BYTES) -> None:
        if num_pages < 1:
            raise ConfigError(f"pool needs at least one page, got {num_pages}")
        if page_bytes < 1:
            raise ConfigError(f"page_bytes must be positive, got {page_bytes}")
        self.num_pages = num_pages
        self.page_bytes = page_bytes
        self._pages: list[bytearray] = []

    @property
    def allocated(self) -> int:
        return len(self._pages)

    @property
    def free(self) -> int:
        return self.num_pages - len(self._pages)

    def allocate(self) -> int:
        if not self.free:
            raise CapacityError(
                f"page pool exhausted: 1 page requested, 0 of "
                f"{self.num_pages} free"
            )
        self._pages.append(bytearray(self.page_bytes))
        return len(self._pages) - 1

    def page(self, page_id: int) -> bytearray:
        return self._pages[page_id]


@dataclasses.dataclass
class _Stream:
    pages: list[int] = dataclasses.field(default_factory=list)
    length: int = 0
    token_sizes: list[int] = dataclasses.field(default_factory=list)
    segment_counts: list[tuple[int, ...]] = dataclasses.field(
        default_factory=list
    )


@dataclasses.dataclass
class _Core:
    pool: PagePool
    tables: dict[str, dict[StreamKey, _Stream]]
    write_transactions: int = 0
    write_bytes: int = 0
    write_bursts: int = 0
    read_transactions: int = 0
    read_bytes: int = 0
    read_bursts: int = 0


def _bursts(nbytes: int) -> int:
    return -(-nbytes // BURST_BYTES)


class Mmu:
    """Multi-core paged KV store with transfer accounting."""

    def __init__(
        self,
        num_cores: int = 1,
        pages_per_core: int = 1024,
        page_bytes: int = PAGE_BYTES,
    ) -> None:
        if num_cores < 1:
            raise ConfigError(f"need at least one core, got {num_cores}")
        if page_bytes % BURST_BYTES != 0:
            raise ConfigError(
                f"page_bytes {page_bytes} must be a multiple of the burst "
                f"size {BURST_BYTES}"
            )
        self.num_cores = num_cores
        self.page_bytes = page_bytes
        self._cores = [
            _Core(
                pool=PagePool(pages_per_core, page_bytes),
                tables={DENSE_TABLE: {}, SPARSE_TABLE: {}},
            )
            for _ in range(num_cores)
        ]

    def core_of(self, key: StreamKey) -> int:
        return key.request % self.num_cores

    # -- writes ------------------------------------------------------------

    def write_token(
        self,
        key: StreamKey,
        dense_data: bytes,
        sparse_data: bytes = b"",
        segment_counts: tuple[int, ...] = (),
    ) -> tuple[Transaction, ...]:
        """Append one token's streams; returns the transfers it issued.

        Atomic on failure: if the pool cannot hold both appends, nothing is
        written and no transfer is counted.
        """
        if not dense_data:
            raise ConfigError("a token always carries dense bytes")
        if sum(segment_counts) != len(sparse_data):
            raise ConfigError(
                f"segment counts sum to {sum(segment_counts)} but the sparse "
                f"stream holds {len(sparse_data)} entries"
            )
        core = self._cores[self.core_of(key)]
        dense_stream = core.tables[DENSE_TABLE].setdefault(key, _Stream())
        sparse_stream = core.tables[SPARSE_TABLE].setdefault(key, _Stream())

        needed = self._pages_needed(dense_stream, len(dense_data))
        needed += self._pages_needed(sparse_stream, len(sparse_data))
        if needed > core.pool.free:
            raise CapacityError(
                f"write needs {needed} new pages for key {key}, but only "
                f"{core.pool.free} of {core.pool.num_pages} are free on "
                f"core {self.core_of(key)}"
            )

        transactions = list(self._append(core, DENSE_TABLE, dense_stream, dense_data))
        dense_stream.token_sizes.append(len(dense_data))
        if sparse_data:
            transactions.extend(
                self._append(core, SPARSE_TABLE, sparse_stream, sparse_data)
            )
        sparse_stream.token_sizes.append(len(sparse_data))
        sparse_stream.segment_counts.append(tuple(int(c) for c in segment_counts))
        return tuple(transactions)

    def _pages_needed(self, stream: _Stream, nbytes: int) -> int:
        tail_space = (
            (self.page_bytes - stream.length % self.page_bytes) % self.page_bytes
            if stream.pages
            else 0
        )
        overflow = max(0, nbytes - tail_space)
        return -(-overflow // self.page_bytes)

    def _append(self, core: _Core, table: str, stream: _Stream, data: bytes):
        offset = 0
        while offset < len(data):
            fill = stream.length % self.page_bytes
            # fill == 0 with pages present means the tail page is exactly full.
            if not stream.pages or fill == 0:
                stream.pages.append(core.pool.allocate())
                fill = 0
            page_id = stream.pages[-1]
            chunk = min(self.page_bytes - fill, len(data) - offset)
            core.pool.page(page_id)[fill : fill + chunk] = data[
                offset : offset + chunk
            ]
            bursts = _bursts(chunk)
            core.write_transactions += 1
            core.write_bytes += chunk
            core.write_bursts += bursts
            stream.length += chunk
            offset += chunk
            yield Transaction(table, page_id, fill, chunk, bursts)

    # -- reads -------------------------------------------------------------

    def _stream(self, key: StreamKey, table: str) -> tuple[_Core, _Stream]:
        if table not in (DENSE_TABLE, SPARSE_TABLE):
            raise ConfigError(f"unknown table {table!r}")
        core = self._cores[self.core_of(key)]
        stream = core.tables[table].get(key)
        if stream is None:
            raise MmuLookupError(f"no {table} stream for key {key}")
        return core, stream

    def read_sequence(self, key: StreamKey, table: str = DENSE_TABLE) -> bytes:
        """Read one stream end to end, one transaction per page."""
        core, stream = self._stream(key, table)
        out = bytearray()
        remaining = stream.length
        for page_id in stream.pages:
            chunk = min(self.page_bytes, remaining)
            out += core.pool.page(page_id)[:chunk]
            core.read_transactions += 1
            core.read_bytes += chunk
            core.read_bursts += _bursts(chunk)
            remaining -= chunk
        return bytes(out)

    # -- metadata ----------------------------------------------------------

    def token_count(self, key: StreamKey) -> int:
        _, stream = self._stream(key, DENSE_TABLE)
        return len(stream.token_sizes)

    def dense_token_sizes(self, key: StreamKey) -> tuple[int, ...]:
        _, stream = self._stream(key, DENSE_TABLE)
        return tuple(stream.token_sizes)

    def sparse_token_sizes(self, key: StreamKey) -> tuple[int, ...]:
        _, stream = self._stream(key, SPARSE_TABLE)
        return tuple(stream.token_sizes)

    def sparse_segment_counts(self, key: StreamKey) -> tuple[tuple[int, ...], ...]:
        _, stream = self._stream(key, SPARSE_TABLE)
        return tuple(stream.segment_counts)

    def keys(self, core: int | None = None) -> list[StreamKey]:
        cores = self._cores if core is None else [self._cores[core]]
        found = set()
        for c in cores:
            found.update(c.tables[DENSE_TABLE])
        return sorted(
            found, key=lambda k: (k.request, k.layer, k.kind.bit, k.head)
        )

    def stats(self, core: int = 0) -> MmuStats:
        c = self._cores[core]
        stored = sum(
            stream.length
            for table in c.tables.values()
            for stream in table.values()
        )
        return MmuStats(
            pages_total=c.pool.num_pages,
            pages_allocated=c.pool.allocated,
            page_bytes=c.pool.page_bytes,
            bytes_stored=stored,
            write_transactions=c.write_transactions,
            write_bytes=c.write_bytes,
            write_bursts=c.write_bursts,
            read_transactions=c.read_transactions,
            read_bytes=c.read_bytes,
            read_bursts=c.read_bursts,
        )
