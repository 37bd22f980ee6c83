"""Event-log management: segment codec, pending buffers, durable append-only logs.

The byte layout of a segment is shared verbatim between network transfer and
durable storage. Segments never exceed one OS page (4096 bytes); senders
batch entries into a segment best-effort but never delay a lone entry.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict

from .core import (
    PAGE_SIZE,
    MSG_TRANSACTION_INPUT,
    ByteReader,
    EventLogEntry,
    SegmentOverflow,
    Truncated,
    BadLength,
    UnknownMessageType,
    TransactionGraph,
)

SEGMENT_HEADER_SIZE = 8  # size-in-bytes (4) + entry count (4)

LOG_MAGIC = b"VMLG"
LOG_VERSION = 1

_HDR = struct.Struct("<II")


# ---------------------------------------------------------------------------
# Segment codec


def encode_segment(entries, page_size: int = PAGE_SIZE) -> bytes:
    """Encode entries into one contiguous segment: size, count, then entries.

    The declared size includes the 8-byte header. Raises SegmentOverflow when
    the result would exceed `page_size`; callers split before encoding.
    """
    out = bytearray(SEGMENT_HEADER_SIZE)
    for e in entries:
        e.encode_into(out)
    if len(out) > page_size:
        raise SegmentOverflow(f"segment of {len(out)} bytes exceeds page ({page_size})")
    out[:SEGMENT_HEADER_SIZE] = _HDR.pack(len(out), len(entries))
    return bytes(out)


def decode_segment(buf: bytes) -> list[EventLogEntry]:
    """Exact inverse of encode_segment. Trailing bytes beyond the declared size
    are rejected, and decoding never reads past the declared size."""
    entries, consumed = decode_segment_prefix(buf)
    if consumed != len(buf):
        raise BadLength(f"{len(buf) - consumed} trailing bytes after segment")
    return entries


def decode_segment_prefix(buf: bytes, offset: int = 0):
    """Decode one segment starting at `offset`; returns (entries, end offset).

    Used by stream receivers where several frames share one buffer.
    """
    if len(buf) - offset < SEGMENT_HEADER_SIZE:
        raise Truncated("segment header incomplete")
    size, count = _HDR.unpack_from(buf, offset)
    if size < SEGMENT_HEADER_SIZE:
        raise BadLength(f"declared segment size {size} below header size")
    if offset + size > len(buf):
        raise Truncated(f"declared segment size {size} exceeds available bytes")
    r = ByteReader(buf, offset + SEGMENT_HEADER_SIZE, offset + size)
    entries = []
    for _ in range(count):
        e = EventLogEntry.decode_from(r)
        if e.message_type != MSG_TRANSACTION_INPUT:
            raise UnknownMessageType(f"0x{e.message_type:02x} inside segment")
        entries.append(e)
    if r.remaining():
        raise BadLength(f"{r.remaining()} unread bytes inside declared segment size")
    return entries, offset + size


def pack_segments(entries, page_size: int = PAGE_SIZE) -> list[bytes]:
    """Greedily pack entries into as few page-sized segments as possible.

    Entry order is preserved. A single entry that cannot fit even alone
    raises SegmentOverflow (oversized events are rejected upstream).
    """
    segments = []
    group: list[EventLogEntry] = []
    used = SEGMENT_HEADER_SIZE
    for e in entries:
        size = e.encoded_size()
        if SEGMENT_HEADER_SIZE + size > page_size:
            raise SegmentOverflow(f"entry of {size} bytes cannot fit a page")
        if used + size > page_size:
            segments.append(encode_segment(group, page_size))
            group, used = [], SEGMENT_HEADER_SIZE
        group.append(e)
        used += size
    if group:
        segments.append(encode_segment(group, page_size))
    return segments


def max_payload_size(event_id: str, dep_vms_names, page_size: int = PAGE_SIZE) -> int:
    """Largest payload that keeps a single entry within one page, given the
    event name and the components that can appear in its dependence map."""
    probe = EventLogEntry(MSG_TRANSACTION_INPUT, 0, 0, event_id, b"",
                          {name: 0 for name in dep_vms_names})
    return page_size - SEGMENT_HEADER_SIZE - probe.encoded_size()


# ---------------------------------------------------------------------------
# Dependence-map shrinking


def shrink_dependence_map(entry: EventLogEntry, graph: TransactionGraph) -> EventLogEntry:
    """Drop components no longer downstream of the edge this entry travels on.

    The edge is identified by the entry's event id; the retained set is the
    union, over the consuming nodes, of the consumer itself plus everything
    below it (so every receiver keeps its own precedent).
    """
    retained: set[str] = set()
    for node in graph.nodes:
        if node.input_event == entry.event_id:
            retained.add(node.vms)
            retained.update(graph.downstream_vmses(node.alias))
    dep_map = {vms: tid for vms, tid in entry.dep_map.items() if vms in retained}
    return EventLogEntry(entry.message_type, entry.batch, entry.tid,
                         entry.event_id, entry.payload, dep_map)


# ---------------------------------------------------------------------------
# Pending logging buffer


class PendingBuffer:
    """Entries produced but not yet durably logged, grouped by batch.

    Keyed by (tid, event id) so that a rewrite after an abort replaces the
    stale entry, and an aborted TiD's entries can be dropped wholesale before
    anything reaches disk.
    """

    def __init__(self):
        self._batches: dict[int, OrderedDict] = {}

    def add(self, entry: EventLogEntry) -> None:
        group = self._batches.setdefault(entry.batch, OrderedDict())
        group[(entry.tid, entry.event_id)] = entry

    def drop_tid(self, tid: int) -> int:
        """Remove every entry of an aborted TiD; returns how many were dropped."""
        dropped = 0
        for group in self._batches.values():
            for key in [k for k in group if k[0] == tid]:
                del group[key]
                dropped += 1
        return dropped

    def entries_for(self, batch: int) -> list[EventLogEntry]:
        return list(self._batches.get(batch, {}).values())

    def drain_batch(self, batch: int) -> list[EventLogEntry]:
        """Remove and return the batch's entries; a batch drains exactly once."""
        group = self._batches.pop(batch, None)
        return list(group.values()) if group else []

    def pending_batches(self) -> list[int]:
        return sorted(self._batches)

    def __len__(self):
        return sum(len(g) for g in self._batches.values())


# ---------------------------------------------------------------------------
# Durable logs


class UnknownLog(KeyError):
    pass


class DurableLog:
    """Append-only file of encoded entries for one event log.

    Layout: 4-byte magic, 1-byte version, then entries back to back using the
    same per-entry encoding as segments. An entry's logical offset is its TiD;
    in-flight appends may land out of TiD order, which is tolerated because
    readers sort by TiD and batches gate what is appended at all.
    """

    def __init__(self, path: str, sync: bool = True):
        self.path = path
        self.sync = sync
        self._tids: set[int] = set()
        self._keys: set[tuple[int, str]] = set()
        self._entries: list[EventLogEntry] = []
        if os.path.exists(path):
            self._load()
        else:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "wb") as f:
                f.write(LOG_MAGIC)
                f.write(bytes([LOG_VERSION]))
                f.flush()
                if self.sync:
                    os.fsync(f.fileno())
        self._fh = open(path, "ab")

    def _load(self) -> None:
        with open(self.path, "rb") as f:
            buf = f.read()
        if buf[:4] != LOG_MAGIC or len(buf) < 5 or buf[4] != LOG_VERSION:
            raise BadLength(f"{self.path}: bad log header")
        r = ByteReader(buf, 5)
        while r.remaining():
            mark = r.pos
            try:
                e = EventLogEntry.decode_from(r)
            except Truncated:
                # torn tail from a crash mid-append: ignore beyond last whole entry
                r.pos = mark
                break
            self._entries.append(e)
            self._tids.add(e.tid)
            self._keys.add((e.tid, e.event_id))

    def append_batch(self, entries) -> int:
        """Append entries (deduplicated by TiD+event) and sync once.

        Returns the number of bytes written. Nothing is reported durable
        until the sync returns.
        """
        out = bytearray()
        fresh = []
        for e in entries:
            if (e.tid, e.event_id) in self._keys:
                continue
            e.encode_into(out)
            fresh.append(e)
        if not out:
            return 0
        self._fh.write(out)
        self._fh.flush()
        if self.sync:
            os.fsync(self._fh.fileno())
        for e in fresh:
            self._entries.append(e)
            self._tids.add(e.tid)
            self._keys.add((e.tid, e.event_id))
        return len(out)

    def pull_range(self, from_tid: int, to_tid: int) -> list[EventLogEntry]:
        """All durable entries with from_tid <= tid <= to_tid, in TiD order."""
        hits = [e for e in self._entries if from_tid <= e.tid <= to_tid]
        hits.sort(key=lambda e: e.tid)
        return hits

    def all_entries(self) -> list[EventLogEntry]:
        return sorted(self._entries, key=lambda e: e.tid)

    def tids(self) -> set[int]:
        return set(self._tids)

    def size_bytes(self) -> int:
        self._fh.flush()
        return os.path.getsize(self.path)

    def close(self) -> None:
        self._fh.close()


class LogStore:
    """The durable logs a producer owns, one file per event-log name."""

    def __init__(self, data_dir: str, sync: bool = True):
        self.data_dir = data_dir
        self.sync = sync
        self._logs: dict[str, DurableLog] = {}
        os.makedirs(os.path.join(data_dir, "logs"), exist_ok=True)
        for fname in os.listdir(os.path.join(data_dir, "logs")):
            if fname.endswith(".vmlog"):
                event_id = fname[: -len(".vmlog")]
                self._logs[event_id] = DurableLog(self._path(event_id), sync)

    def _path(self, event_id: str) -> str:
        return os.path.join(self.data_dir, "logs", f"{event_id}.vmlog")

    def log_for(self, event_id: str, create: bool = True) -> DurableLog:
        log = self._logs.get(event_id)
        if log is None:
            if not create:
                raise UnknownLog(event_id)
            log = DurableLog(self._path(event_id), self.sync)
            self._logs[event_id] = log
        return log

    def flush_batch(self, pending: PendingBuffer, batch: int) -> int:
        """Durably append one batch's pending entries, amortized to one sync per file.

        The batch is drained exactly once; a retriable I/O failure leaves the
        buffer intact (the drain happens only after every append succeeded).
        """
        entries = pending.entries_for(batch)
        by_log: dict[str, list[EventLogEntry]] = {}
        for e in entries:
            by_log.setdefault(e.event_id, []).append(e)
        written = 0
        for event_id, group in by_log.items():
            written += self.log_for(event_id).append_batch(group)
        pending.drain_batch(batch)
        return written

    def pull_range(self, event_id: str, from_tid: int, to_tid: int) -> list[EventLogEntry]:
        log = self._logs.get(event_id)
        if log is None:
            raise UnknownLog(event_id)
        return log.pull_range(from_tid, to_tid)

    def event_ids(self) -> list[str]:
        return sorted(self._logs)

    def close(self) -> None:
        for log in self._logs.values():
            log.close()
