"""Shared vocabulary: identifiers, event schemas, transaction graphs, protocol messages.

Everything in this module is an immutable value. Instances are safe to share
between threads and to ship across the wire via the codecs defined here.

Encoding conventions (fixed for the whole system):
  * all multi-byte integers are little-endian
  * strings are a 4-byte length followed by UTF-8 bytes
  * transaction ids and batch ids are unsigned 64-bit
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

# TiD 0 is reserved: it means "no predecessor".
NO_TID = 0

PAGE_SIZE = 4096

SCALAR_KINDS = ("int32", "int64", "float64", "string", "date")

_SCALAR_STRUCT = {
    "int32": struct.Struct("<i"),
    "int64": struct.Struct("<q"),
    "float64": struct.Struct("<d"),
    "date": struct.Struct("<i"),  # days since epoch
}

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CodecError(ValueError):
    """Base for wire decoding failures."""


class Truncated(CodecError):
    """Input ended before the declared structure was complete."""


class BadLength(CodecError):
    """A declared length is inconsistent with the surrounding structure."""


class UnknownMessageType(CodecError):
    """Discriminant byte does not name any known message."""


class SegmentOverflow(ValueError):
    """Entries do not fit in a single page-sized segment."""


# ---------------------------------------------------------------------------
# Low-level readers/writers


class ByteReader:
    """Bounds-checked cursor over a byte buffer.

    Never reads past `limit`; any attempt raises Truncated so that fuzzed
    or corrupted inputs fail cleanly instead of over-reading.
    """

    __slots__ = ("buf", "pos", "limit")

    def __init__(self, buf: bytes, pos: int = 0, limit: int | None = None):
        self.buf = buf
        self.pos = pos
        self.limit = len(buf) if limit is None else limit
        if self.limit > len(buf):
            raise Truncated("declared limit beyond available bytes")

    def remaining(self) -> int:
        return self.limit - self.pos

    def take(self, n: int) -> bytes:
        if n < 0:
            raise BadLength("negative length")
        if self.pos + n > self.limit:
            raise Truncated(f"need {n} bytes, have {self.remaining()}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BadLength(f"invalid utf-8 in string: {exc}") from None


def put_u32(out: bytearray, v: int) -> None:
    out += _U32.pack(v)


def put_u64(out: bytearray, v: int) -> None:
    out += _U64.pack(v)


def put_string(out: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    out += _U32.pack(len(b))
    out += b


# ---------------------------------------------------------------------------
# Event schemas and payload codec


@dataclass(frozen=True)
class EventSchema:
    """Schema of one event log: a globally unique name plus ordered scalar fields."""

    name: str
    fields: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for fname, kind in self.fields:
            if kind not in SCALAR_KINDS:
                raise ValueError(f"{self.name}.{fname}: unsupported scalar kind {kind!r}")

    def encode(self, values) -> bytes:
        """Serialize a payload (mapping or positional sequence) field by field."""
        if isinstance(values, dict):
            seq = [values[fname] for fname, _ in self.fields]
        else:
            seq = list(values)
            if len(seq) != len(self.fields):
                raise ValueError(f"{self.name}: expected {len(self.fields)} values, got {len(seq)}")
        out = bytearray()
        for (fname, kind), v in zip(self.fields, seq):
            if kind == "string":
                put_string(out, v)
            else:
                try:
                    out += _SCALAR_STRUCT[kind].pack(v)
                except struct.error as exc:
                    raise ValueError(f"{self.name}.{fname}: {exc}") from None
        return bytes(out)

    def decode(self, payload: bytes) -> dict:
        r = ByteReader(payload)
        out = {}
        for fname, kind in self.fields:
            if kind == "string":
                out[fname] = r.string()
            else:
                out[fname] = _SCALAR_STRUCT[kind].unpack(r.take(_SCALAR_STRUCT[kind].size))[0]
        if r.remaining():
            raise BadLength(f"{self.name}: {r.remaining()} trailing payload bytes")
        return out


# ---------------------------------------------------------------------------
# Event log entries


class EventLogEntry:
    """One immutable event: identity, payload bytes and the dependence map.

    The dependence map carries, for every component still downstream of the
    edge this entry travels on, the TiD of the preceding transaction that
    involved that component (0 when there is none).
    """

    __slots__ = ("message_type", "batch", "tid", "event_id", "payload", "dep_map")

    def __init__(self, message_type: int, batch: int, tid: int, event_id: str,
                 payload: bytes, dep_map: dict):
        self.message_type = message_type
        self.batch = batch
        self.tid = tid
        self.event_id = event_id
        self.payload = payload
        self.dep_map = dep_map

    def encoded_size(self) -> int:
        size = 1 + 8 + 8 + 4 + len(self.event_id.encode("utf-8")) + 4 + len(self.payload) + 4
        for vms in self.dep_map:
            size += 4 + len(vms.encode("utf-8")) + 8
        return size

    def encode_into(self, out: bytearray) -> None:
        out.append(self.message_type)
        put_u64(out, self.batch)
        put_u64(out, self.tid)
        put_string(out, self.event_id)
        put_u32(out, len(self.payload))
        out += self.payload
        put_u32(out, len(self.dep_map))
        for vms, tid in self.dep_map.items():
            put_string(out, vms)
            put_u64(out, tid)

    def encode(self) -> bytes:
        out = bytearray()
        self.encode_into(out)
        return bytes(out)

    @classmethod
    def decode_from(cls, r: ByteReader) -> "EventLogEntry":
        message_type = r.u8()
        batch = r.u64()
        tid = r.u64()
        event_id = r.string()
        payload = r.take(r.u32())
        dep_map = {}
        for _ in range(r.u32()):
            vms = r.string()
            dep_map[vms] = r.u64()
        return cls(message_type, batch, tid, event_id, payload, dep_map)

    def __eq__(self, other):
        return (isinstance(other, EventLogEntry)
                and self.message_type == other.message_type
                and self.batch == other.batch
                and self.tid == other.tid
                and self.event_id == other.event_id
                and self.payload == other.payload
                and self.dep_map == other.dep_map)

    def __hash__(self):
        return hash((self.message_type, self.batch, self.tid, self.event_id, self.payload))

    def __repr__(self):
        return (f"EventLogEntry(tid={self.tid}, batch={self.batch}, "
                f"event={self.event_id!r}, deps={self.dep_map})")


# ---------------------------------------------------------------------------
# Transaction graphs

INPUT, INTERNAL, TERMINAL = "input", "internal", "terminal"


@dataclass(frozen=True)
class GraphNode:
    alias: str
    vms: str
    input_event: str
    kind: str
    deps: tuple[str, ...] = ()


class GraphError(ValueError):
    """Base for transaction-graph validation failures."""


class CycleDetected(GraphError):
    pass


class UnknownEvent(GraphError):
    pass


class DuplicatePublisher(GraphError):
    pass


class NoTerminal(GraphError):
    pass


class DuplicateVms(GraphError):
    """A component appears in more than one node of the same graph."""


class TransactionGraph:
    """DAG of component functions, declaring which event edges get transactional guarantees.

    Built incrementally with input/internal/terminal calls, mirroring how
    multi-component transactions are registered.
    """

    def __init__(self, name: str):
        self.name = name
        self.nodes: list[GraphNode] = []

    def input(self, alias: str, vms: str, event: str) -> "TransactionGraph":
        self.nodes.append(GraphNode(alias, vms, event, INPUT))
        return self

    def internal(self, alias: str, vms: str, event: str, *deps: str) -> "TransactionGraph":
        self.nodes.append(GraphNode(alias, vms, event, INTERNAL, tuple(deps)))
        return self

    def terminal(self, alias: str, vms: str, event: str, *deps: str) -> "TransactionGraph":
        self.nodes.append(GraphNode(alias, vms, event, TERMINAL, tuple(deps)))
        return self

    # -- derived views ------------------------------------------------

    def vms_names(self) -> list[str]:
        return [n.vms for n in self.nodes]

    def terminals(self) -> set[str]:
        return {n.vms for n in self.nodes if n.kind == TERMINAL}

    def input_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind == INPUT]

    def node_by_alias(self, alias: str) -> GraphNode:
        for n in self.nodes:
            if n.alias == alias:
                return n
        raise KeyError(alias)

    def node_for_vms(self, vms: str) -> GraphNode:
        for n in self.nodes:
            if n.vms == vms:
                return n
        raise KeyError(vms)

    def children(self, alias: str) -> list[GraphNode]:
        return [n for n in self.nodes if alias in n.deps]

    def downstream_vmses(self, alias: str) -> set[str]:
        """Components at or below the children of `alias` (the node itself excluded)."""
        out: set[str] = set()
        stack = [c.alias for c in self.children(alias)]
        while stack:
            a = stack.pop()
            n = self.node_by_alias(a)
            if n.vms in out:
                continue
            out.add(n.vms)
            stack.extend(c.alias for c in self.children(a))
        return out

    def __repr__(self):
        return f"TransactionGraph({self.name!r}, {len(self.nodes)} nodes)"


@dataclass(frozen=True)
class VmsMetadata:
    """What a component announces about itself during the handshake."""

    name: str
    address: str = ""
    input_events: frozenset = frozenset()
    output_events: frozenset = frozenset()
    # input event -> output event produced by the function it triggers (or None)
    io_map: tuple = ()
    table_digests: tuple = ()

    def output_for(self, input_event: str):
        for inp, outp in self.io_map:
            if inp == input_event:
                return outp
        return None


def validate_graph(graph: TransactionGraph, registry: dict) -> None:
    """Accept or reject a transaction graph against the registered components.

    `registry` maps component name -> VmsMetadata. Raises a GraphError
    subclass on the first violation; returns None on acceptance.
    Deterministic and side-effect free.
    """
    if not graph.nodes:
        raise NoTerminal(f"{graph.name}: empty graph")

    seen_alias: set[str] = set()
    seen_vms: set[str] = set()
    for n in graph.nodes:
        if n.alias in seen_alias:
            raise CycleDetected(f"{graph.name}: alias {n.alias!r} declared twice")
        if n.vms in seen_vms:
            raise DuplicateVms(f"{graph.name}: component {n.vms!r} appears twice")
        if n.vms not in registry:
            raise UnknownEvent(f"{graph.name}: unknown component {n.vms!r}")
        meta = registry[n.vms]
        if n.input_event not in meta.input_events:
            raise UnknownEvent(f"{graph.name}: {n.vms!r} does not consume {n.input_event!r}")
        for d in n.deps:
            # forward references double as self-loops and cycles: nodes may
            # only depend on previously declared aliases
            if d not in seen_alias:
                raise CycleDetected(f"{graph.name}: node {n.alias!r} depends on {d!r} "
                                    "which is not declared before it")
        if n.kind == INPUT:
            if n.deps:
                raise CycleDetected(f"{graph.name}: input node {n.alias!r} has dependencies")
            # a user-facing event must not collide with any component's output
            for meta2 in registry.values():
                if n.input_event in meta2.output_events:
                    raise DuplicatePublisher(
                        f"{graph.name}: input event {n.input_event!r} is already "
                        f"published by {meta2.name!r}")
        else:
            if not n.deps:
                raise CycleDetected(f"{graph.name}: node {n.alias!r} has no dependencies")
            producers = []
            for d in n.deps:
                dep_node = graph.node_by_alias(d)
                dep_meta = registry[dep_node.vms]
                if dep_meta.output_for(dep_node.input_event) == n.input_event:
                    producers.append(d)
            if not producers:
                raise UnknownEvent(f"{graph.name}: no dependency of {n.alias!r} "
                                   f"produces {n.input_event!r}")
            if len(producers) > 1:
                raise DuplicatePublisher(f"{graph.name}: {n.input_event!r} produced by "
                                         f"multiple dependencies of {n.alias!r}")
        seen_alias.add(n.alias)
        seen_vms.add(n.vms)

    terminals = [n for n in graph.nodes if n.kind == TERMINAL]
    if not terminals:
        raise NoTerminal(f"{graph.name}: no terminal node")

    # every non-terminal must sit upstream of some terminal, otherwise its
    # completion would never be covered by the commit protocol
    covered: set[str] = set()
    stack = [t.alias for t in terminals]
    while stack:
        a = stack.pop()
        if a in covered:
            continue
        covered.add(a)
        stack.extend(graph.node_by_alias(a).deps)
    for n in graph.nodes:
        if n.alias not in covered:
            raise NoTerminal(f"{graph.name}: node {n.alias!r} has no downstream terminal")


# ---------------------------------------------------------------------------
# Protocol messages

MSG_PRESENTATION = 0x01
MSG_CONSUMER_SET = 0x02
MSG_TRANSACTION_INPUT = 0x03
MSG_BATCH_COMMIT_INFO = 0x04
MSG_BATCH_COMPLETE = 0x05
MSG_BATCH_COMMIT_COMMAND = 0x06
MSG_ABORT_NOTICE = 0x07
MSG_ABORT_COMMAND = 0x08
MSG_PULL_REQUEST = 0x09
MSG_PULL_RESPONSE = 0x0A
# Artifact additions past the base protocol: a post-abort quiescence poll.
MSG_CONFIRM_REQUEST = 0x0B
MSG_CONFIRM_REPLY = 0x0C


@dataclass(frozen=True)
class Presentation:
    TYPE = MSG_PRESENTATION
    role: int  # 0 = coordinator hello, 1 = component metadata reply
    name: str
    input_events: tuple = ()
    output_events: tuple = ()
    io_map: tuple = ()
    table_digests: tuple = ()

    def encode_body(self, out: bytearray) -> None:
        out.append(self.role)
        put_string(out, self.name)
        put_u32(out, len(self.input_events))
        for e in self.input_events:
            put_string(out, e)
        put_u32(out, len(self.output_events))
        for e in self.output_events:
            put_string(out, e)
        put_u32(out, len(self.io_map))
        for inp, outp in self.io_map:
            put_string(out, inp)
            put_string(out, outp if outp is not None else "")
        put_u32(out, len(self.table_digests))
        for name, digest in self.table_digests:
            put_string(out, name)
            put_u64(out, digest)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "Presentation":
        role = r.u8()
        name = r.string()
        input_events = tuple(r.string() for _ in range(r.u32()))
        output_events = tuple(r.string() for _ in range(r.u32()))
        io_map = []
        for _ in range(r.u32()):
            inp = r.string()
            outp = r.string()
            io_map.append((inp, outp if outp else None))
        digests = tuple((r.string(), r.u64()) for _ in range(r.u32()))
        return cls(role, name, input_events, output_events, tuple(io_map), digests)


@dataclass(frozen=True)
class ConsumerSet:
    TYPE = MSG_CONSUMER_SET
    # output event -> tuple of (consumer name, address)
    consumers: tuple = ()

    def encode_body(self, out: bytearray) -> None:
        put_u32(out, len(self.consumers))
        for event, targets in self.consumers:
            put_string(out, event)
            put_u32(out, len(targets))
            for name, addr in targets:
                put_string(out, name)
                put_string(out, addr)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "ConsumerSet":
        consumers = []
        for _ in range(r.u32()):
            event = r.string()
            targets = tuple((r.string(), r.string()) for _ in range(r.u32()))
            consumers.append((event, targets))
        return cls(tuple(consumers))

    def as_dict(self) -> dict:
        return {event: list(targets) for event, targets in self.consumers}


@dataclass(frozen=True)
class BatchCommitInfo:
    TYPE = MSG_BATCH_COMMIT_INFO
    batch: int
    previous_batch: int
    # VMS name -> number of TiDs of the batch that involve it
    tid_counts: tuple = ()

    def __post_init__(self):
        if self.previous_batch >= self.batch:
            raise ValueError("previous_batch must precede batch")

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.batch)
        put_u64(out, self.previous_batch)
        put_u32(out, len(self.tid_counts))
        for vms, count in self.tid_counts:
            put_string(out, vms)
            put_u32(out, count)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "BatchCommitInfo":
        batch = r.u64()
        prev = r.u64()
        counts = tuple((r.string(), r.u32()) for _ in range(r.u32()))
        return cls(batch, prev, counts)

    def count_for(self, vms: str) -> int:
        for name, count in self.tid_counts:
            if name == vms:
                return count
        return 0


@dataclass(frozen=True)
class BatchComplete:
    TYPE = MSG_BATCH_COMPLETE
    batch: int
    vms: str
    # how many aborted TiDs of this batch the sender has accounted for;
    # guards against completions that raced an in-flight abort round
    aborted: int = 0

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.batch)
        put_string(out, self.vms)
        put_u32(out, self.aborted)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "BatchComplete":
        return cls(r.u64(), r.string(), r.u32())


@dataclass(frozen=True)
class BatchCommitCommand:
    TYPE = MSG_BATCH_COMMIT_COMMAND
    batch: int

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.batch)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "BatchCommitCommand":
        return cls(r.u64())


@dataclass(frozen=True)
class AbortNotice:
    TYPE = MSG_ABORT_NOTICE
    tid: int
    batch: int
    vms: str

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.tid)
        put_u64(out, self.batch)
        put_string(out, self.vms)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "AbortNotice":
        return cls(r.u64(), r.u64(), r.string())


@dataclass(frozen=True)
class AbortCommand:
    TYPE = MSG_ABORT_COMMAND
    tid: int
    batch: int
    # the aborted transaction's precedent on the receiving component, so the
    # receiver can re-point chains even if the event itself never arrived
    precedent: int = 0

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.tid)
        put_u64(out, self.batch)
        put_u64(out, self.precedent)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "AbortCommand":
        return cls(r.u64(), r.u64(), r.u64())


@dataclass(frozen=True)
class PullRequest:
    TYPE = MSG_PULL_REQUEST
    event_id: str
    from_tid: int
    to_tid: int

    def encode_body(self, out: bytearray) -> None:
        put_string(out, self.event_id)
        put_u64(out, self.from_tid)
        put_u64(out, self.to_tid)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "PullRequest":
        return cls(r.string(), r.u64(), r.u64())


@dataclass(frozen=True)
class PullResponse:
    TYPE = MSG_PULL_RESPONSE
    entries: tuple = ()

    def encode_body(self, out: bytearray) -> None:
        put_u32(out, len(self.entries))
        for e in self.entries:
            e.encode_into(out)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "PullResponse":
        return cls(tuple(EventLogEntry.decode_from(r) for _ in range(r.u32())))


@dataclass(frozen=True)
class ConfirmRequest:
    TYPE = MSG_CONFIRM_REQUEST
    batch: int

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.batch)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "ConfirmRequest":
        return cls(r.u64())


@dataclass(frozen=True)
class ConfirmReply:
    TYPE = MSG_CONFIRM_REPLY
    batch: int
    vms: str
    stable: bool
    executed: int
    aborted: int
    # cumulative transaction-input message counts per peer, used by the
    # control loop to establish that no replayed input is still in flight
    sent: tuple = ()
    received: tuple = ()

    def encode_body(self, out: bytearray) -> None:
        put_u64(out, self.batch)
        put_string(out, self.vms)
        out.append(1 if self.stable else 0)
        put_u32(out, self.executed)
        put_u32(out, self.aborted)
        put_u32(out, len(self.sent))
        for peer, n in self.sent:
            put_string(out, peer)
            put_u64(out, n)
        put_u32(out, len(self.received))
        for peer, n in self.received:
            put_string(out, peer)
            put_u64(out, n)

    @classmethod
    def decode_body(cls, r: ByteReader) -> "ConfirmReply":
        batch = r.u64()
        vms = r.string()
        stable = bool(r.u8())
        executed = r.u32()
        aborted = r.u32()
        sent = tuple((r.string(), r.u64()) for _ in range(r.u32()))
        received = tuple((r.string(), r.u64()) for _ in range(r.u32()))
        return cls(batch, vms, stable, executed, aborted, sent, received)


_MESSAGE_TYPES = {
    cls.TYPE: cls
    for cls in (Presentation, ConsumerSet, BatchCommitInfo, BatchComplete,
                BatchCommitCommand, AbortNotice, AbortCommand, PullRequest,
                PullResponse, ConfirmRequest, ConfirmReply)
}


def encode_message(msg) -> bytes:
    """One protocol message -> discriminant byte + self-delimiting body."""
    out = bytearray()
    out.append(msg.TYPE)
    msg.encode_body(out)
    return bytes(out)


def decode_message(buf: bytes):
    """Inverse of encode_message; trailing bytes are rejected."""
    r = ByteReader(buf)
    msg, end = decode_message_from(r)
    if r.remaining():
        raise BadLength(f"{r.remaining()} trailing bytes after message")
    return msg


def decode_message_from(r: ByteReader):
    mtype = r.u8()
    cls = _MESSAGE_TYPES.get(mtype)
    if cls is None:
        raise UnknownMessageType(f"0x{mtype:02x}")
    return cls.decode_body(r), r.pos
