"""Per-component multi-version relational store.

Tables are hash-indexed: a single-value dict for the primary key and
multi-value dicts for secondary indexes. Versions of a row are chained
newest-first on the primary entry, tagged with the writer TiD. Readers
resolve visibility through the chain and never block on writers.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field

from .core import ByteReader, put_u32, put_string, _SCALAR_STRUCT, SCALAR_KINDS

CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1
CKPT_END = b"KCMV"  # trailing commit marker
_TOMBSTONE_LEN = 0xFFFFFFFF

_U32 = struct.Struct("<I")


class ConstraintViolation(Exception):
    """A declared data constraint was violated; maps to a transaction abort."""


class PrimaryKeyViolation(ConstraintViolation):
    pass


class NonNullViolation(ConstraintViolation):
    pass


class ValueConstraintViolation(ConstraintViolation):
    pass


class ForeignKeyViolation(ConstraintViolation):
    pass


class WriteConflict(Exception):
    """Two in-flight writers touched the same key; the younger TiD aborts."""

    def __init__(self, table, key, holder, claimant):
        super().__init__(f"{table}[{key}]: writers {holder} and {claimant} overlap")
        self.holder = holder
        self.claimant = claimant


class UnknownIndex(KeyError):
    pass


class CorruptCheckpoint(Exception):
    pass


# ---------------------------------------------------------------------------
# Schemas


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    primary_key: bool = False
    non_null: bool = False
    positive_or_zero: bool = False
    min_value: float | None = None
    max_value: float | None = None

    def __post_init__(self):
        if self.kind not in SCALAR_KINDS:
            raise ValueError(f"column {self.name}: unsupported kind {self.kind!r}")


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[Column, ...]
    # (index name, column names)
    secondary_indexes: tuple = ()
    # (local column names, referenced table, referenced column names)
    foreign_keys: tuple = ()

    def __post_init__(self):
        if not any(c.primary_key for c in self.columns):
            raise ValueError(f"table {self.name}: no primary key column")
        names = {c.name for c in self.columns}
        for idx_name, cols in self.secondary_indexes:
            for c in cols:
                if c not in names:
                    raise ValueError(f"index {idx_name}: unknown column {c!r}")
        for local, _table, _cols in self.foreign_keys:
            for c in local:
                if c not in names:
                    raise ValueError(f"foreign key on {self.name}: unknown column {c!r}")

    @property
    def pk_columns(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns if c.primary_key)

    def digest(self) -> int:
        """Stable 64-bit fingerprint of the schema, exchanged in handshakes."""
        text = repr((self.name, self.columns, self.secondary_indexes, self.foreign_keys))
        h = 0xCBF29CE484222325
        for b in text.encode():
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h


class Version:
    __slots__ = ("tid", "row", "tombstone", "sealed")

    def __init__(self, tid, row, tombstone=False):
        self.tid = tid
        self.row = row
        self.tombstone = tombstone
        self.sealed = False

    def __repr__(self):
        flag = "T" if self.tombstone else ("s" if self.sealed else "p")
        return f"<v{self.tid}{flag}>"


@dataclass
class Snapshot:
    """A consistent version cut.

    A version is visible when it was written by the reader's own transaction,
    or it is sealed (its writer finished) with tid below read_tid and at or
    below the horizon frozen when the snapshot was taken.
    """

    read_tid: int
    own_tid: int | None = None
    horizon: int | None = None

    def admits(self, v: Version) -> bool:
        if self.own_tid is not None and v.tid == self.own_tid:
            return True
        if not v.sealed or v.tid >= self.read_tid:
            return False
        return self.horizon is None or v.tid <= self.horizon


@dataclass
class WriteRecord:
    table: str
    key: tuple
    op: str  # insert / update / delete
    version: Version


@dataclass
class WriteSet:
    tid: int
    writes: list = field(default_factory=list)

    def touched_keys(self):
        return {(w.table, w.key) for w in self.writes}


class _Table:
    def __init__(self, schema: TableSchema):
        self.schema = schema
        self.col_index = {c.name: i for i, c in enumerate(schema.columns)}
        self.pk_idx = tuple(self.col_index[c] for c in schema.pk_columns)
        self.primary: dict[tuple, list[Version]] = {}
        self.secondary: dict[str, dict[tuple, set]] = {}
        self.secondary_cols: dict[str, tuple[int, ...]] = {}
        for idx_name, cols in schema.secondary_indexes:
            self._add_index(idx_name, cols)
        # foreign keys are automatically indexed on the referencing side
        for n, (local, ref_table, _cols) in enumerate(schema.foreign_keys):
            self._add_index(f"fk_{ref_table}_{n}", local)

    def _add_index(self, name, cols):
        if name not in self.secondary:
            self.secondary[name] = {}
            self.secondary_cols[name] = tuple(self.col_index[c] for c in cols)

    def key_of(self, row: tuple) -> tuple:
        return tuple(row[i] for i in self.pk_idx)


class Store:
    """State of one component: versioned tables plus checkpoint/prune machinery."""

    def __init__(self, data_dir: str | None = None, durable: bool = False):
        self.tables: dict[str, _Table] = {}
        self.data_dir = data_dir
        self.durable = durable and data_dir is not None
        self._claims: dict[tuple, int] = {}
        self._claims_lock = threading.Lock()
        self._reader_pins: dict[int, int] = {}
        self._pin_seq = 0
        self._pin_lock = threading.Lock()
        # incremented by any read-path wait; the read path has none by design,
        # so tests assert this stays zero
        self.read_block_events = 0
        if self.durable:
            os.makedirs(data_dir, exist_ok=True)

    # -- registration ---------------------------------------------------

    def register_table(self, schema: TableSchema) -> None:
        if schema.name in self.tables:
            raise ValueError(f"table {schema.name} already registered")
        self.tables[schema.name] = _Table(schema)

    def schemas(self) -> list[TableSchema]:
        return [t.schema for t in self.tables.values()]

    # -- writes -----------------------------------------------------------

    def write_version(self, table_name: str, key: tuple, op: str, row, tid: int,
                      snapshot: Snapshot, writeset: WriteSet) -> Version:
        """Append a pending version at the chain head, after constraint checks.

        Constraints are evaluated against the writer's own snapshot. All
        violations surface as ConstraintViolation subclasses and translate
        into a transaction abort upstream.
        """
        table = self.tables[table_name]
        if op in ("insert", "update"):
            row = tuple(row)
            if table.key_of(row) != tuple(key):
                raise ValueError(f"{table_name}: row key {table.key_of(row)} != {key}")
            self._check_constraints(table, row, op, snapshot)
        elif op == "delete":
            existing = self.read_by_key(table_name, key, snapshot)
            if existing is None:
                raise LookupError(f"{table_name}[{key}]: delete of invisible row")
            row = None
        else:
            raise ValueError(f"unknown op {op!r}")

        claim_key = (table_name, tuple(key))
        with self._claims_lock:
            holder = self._claims.get(claim_key)
            if holder is not None and holder != tid:
                raise WriteConflict(table_name, key, holder, tid)
            self._claims[claim_key] = tid

        if op == "insert":
            visible = self.read_by_key(table_name, key, snapshot)
            if visible is not None:
                with self._claims_lock:
                    if self._claims.get(claim_key) == tid:
                        del self._claims[claim_key]
                raise PrimaryKeyViolation(f"{table_name}[{key}] already exists")
        elif op == "update":
            if self.read_by_key(table_name, key, snapshot) is None:
                raise LookupError(f"{table_name}[{key}]: update of invisible row")

        version = Version(tid, row, tombstone=(op == "delete"))
        chain = table.primary.setdefault(tuple(key), [])
        chain.insert(0, version)
        if row is not None:
            for idx_name, cols in table.secondary_cols.items():
                idx_key = tuple(row[i] for i in cols)
                table.secondary[idx_name].setdefault(idx_key, set()).add(tuple(key))
        writeset.writes.append(WriteRecord(table_name, tuple(key), op, version))
        return version

    def _check_constraints(self, table: _Table, row: tuple, op: str,
                           snapshot: Snapshot) -> None:
        schema = table.schema
        for i, col in enumerate(schema.columns):
            v = row[i]
            if v is None:
                if col.non_null or col.primary_key:
                    raise NonNullViolation(f"{schema.name}.{col.name} is null")
                continue
            if col.positive_or_zero and v < 0:
                raise ValueConstraintViolation(
                    f"{schema.name}.{col.name} = {v} cannot be negative")
            if col.min_value is not None and v < col.min_value:
                raise ValueConstraintViolation(
                    f"{schema.name}.{col.name} = {v} below min {col.min_value}")
            if col.max_value is not None and v > col.max_value:
                raise ValueConstraintViolation(
                    f"{schema.name}.{col.name} = {v} above max {col.max_value}")
        for local, ref_table, ref_cols in schema.foreign_keys:
            ref_key = tuple(row[table.col_index[c]] for c in local)
            if any(v is None for v in ref_key):
                continue
            if ref_table not in self.tables:
                raise ForeignKeyViolation(f"{schema.name}: unknown table {ref_table}")
            if self.read_by_key(ref_table, ref_key, snapshot) is None:
                raise ForeignKeyViolation(
                    f"{schema.name} -> {ref_table}{ref_key}: missing referenced row")

    # -- reads ------------------------------------------------------------

    def read_by_key(self, table_name: str, key: tuple, snapshot: Snapshot):
        """Newest visible row image for a key, or None. Never blocks."""
        chain = self.tables[table_name].primary.get(tuple(key))
        if not chain:
            return None
        for v in list(chain):
            if snapshot.admits(v):
                return None if v.tombstone else v.row
        return None

    def query_secondary(self, table_name: str, index: str, eq: dict,
                        snapshot: Snapshot, force_fallback: bool = False):
        """All visible rows matching an equality predicate on index columns.

        Uses the inlined hash-lookup plan when the predicate covers exactly
        the index columns; otherwise (or when forced) falls back to the
        generic iterate-and-filter plan. Both return identical result sets.
        """
        table = self.tables[table_name]
        if index not in table.secondary:
            raise UnknownIndex(f"{table_name}.{index}")
        cols = table.secondary_cols[index]
        col_names = [table.schema.columns[i].name for i in cols]
        exact = set(eq) == set(col_names)
        if exact and not force_fallback:
            idx_key = tuple(eq[name] for name in col_names)
            rows = []
            for pk in sorted(table.secondary[index].get(idx_key, ())):
                row = self.read_by_key(table_name, pk, snapshot)
                # the reference may be stale: visibility and the predicate are
                # re-resolved through the version chain
                if row is not None and all(row[table.col_index[c]] == eq[c] for c in eq):
                    rows.append(row)
            return rows
        return self._scan_filter(table_name, eq, snapshot)

    def _scan_filter(self, table_name: str, eq: dict, snapshot: Snapshot):
        table = self.tables[table_name]
        rows = []
        for pk in sorted(table.primary):
            row = self.read_by_key(table_name, pk, snapshot)
            if row is not None and all(row[table.col_index[c]] == eq[c] for c in eq):
                rows.append(row)
        return rows

    def scan(self, table_name: str, snapshot: Snapshot) -> dict:
        """Visible image of a whole table: key -> row."""
        table = self.tables[table_name]
        out = {}
        for pk in table.primary:
            row = self.read_by_key(table_name, pk, snapshot)
            if row is not None:
                out[pk] = row
        return out

    # -- writer lifecycle ---------------------------------------------------

    def seal(self, writeset: WriteSet) -> None:
        """Writer finished: versions become readable, write claims release."""
        for w in writeset.writes:
            w.version.sealed = True
        self._release_claims(writeset)

    def _release_claims(self, writeset: WriteSet) -> None:
        with self._claims_lock:
            for w in writeset.writes:
                ck = (w.table, w.key)
                if self._claims.get(ck) == writeset.tid:
                    del self._claims[ck]

    def rollback(self, writeset: WriteSet) -> None:
        """Remove every version the writeset created; aborted versions become
        unreachable immediately."""
        for w in writeset.writes:
            chain = self.tables[w.table].primary.get(w.key)
            if chain is not None:
                try:
                    chain.remove(w.version)
                except ValueError:
                    pass
        self._release_claims(writeset)
        writeset.writes.clear()

    # -- reader pins (GC safety horizon) ------------------------------------

    def pin_reader(self, read_tid: int) -> int:
        with self._pin_lock:
            self._pin_seq += 1
            self._reader_pins[self._pin_seq] = read_tid
            return self._pin_seq

    def unpin_reader(self, token: int) -> None:
        with self._pin_lock:
            self._reader_pins.pop(token, None)

    def min_reader_pin(self) -> int | None:
        with self._pin_lock:
            return min(self._reader_pins.values()) if self._reader_pins else None

    # -- pruning -------------------------------------------------------------

    def prune_versions(self, low_water_tid: int) -> int:
        """Drop versions no snapshot at or above low_water will ever resolve.

        In every chain the newest version with tid <= low_water is kept and
        everything older removed.
        """
        pin = self.min_reader_pin()
        if pin is not None:
            low_water_tid = min(low_water_tid, pin)
        reclaimed = 0
        for table in self.tables.values():
            for chain in table.primary.values():
                keep_from = None
                for i, v in enumerate(chain):
                    if v.tid <= low_water_tid and v.sealed:
                        keep_from = i
                        break
                if keep_from is not None and keep_from + 1 < len(chain):
                    reclaimed += len(chain) - keep_from - 1
                    del chain[keep_from + 1:]
        return reclaimed

    # -- row codec -------------------------------------------------------------

    def _encode_row(self, schema: TableSchema, row: tuple) -> bytes:
        out = bytearray()
        for col, v in zip(schema.columns, row):
            if v is None:
                out.append(0)
                continue
            out.append(1)
            if col.kind == "string":
                put_string(out, v)
            else:
                out += _SCALAR_STRUCT[col.kind].pack(v)
        return bytes(out)

    def _decode_row(self, schema: TableSchema, buf: bytes) -> tuple:
        r = ByteReader(buf)
        vals = []
        for col in schema.columns:
            if not r.u8():
                vals.append(None)
            elif col.kind == "string":
                vals.append(r.string())
            else:
                s = _SCALAR_STRUCT[col.kind]
                vals.append(s.unpack(r.take(s.size))[0])
        return tuple(vals)

    # -- checkpointing ------------------------------------------------------

    def checkpoint(self, batch: int, touched: dict, max_tid: int) -> None:
        """Atomically persist the latest committed image of every key the batch
        touched: one file per table (write-new + rename), then a manifest that
        makes the whole batch checkpoint visible.
        """
        if not self.durable:
            return
        snapshot = Snapshot(read_tid=max_tid + 1, horizon=max_tid)
        manifest = {"batch": batch, "max_tid": max_tid, "tables": {}}
        for table_name, keys in sorted(touched.items()):
            if not keys:
                continue
            schema = self.tables[table_name].schema
            body = bytearray()
            count = 0
            for key in sorted(keys):
                row = self.read_by_key(table_name, key, snapshot)
                key_bytes = self._encode_row_key(schema, key)
                put_u32(body, len(key_bytes))
                body += key_bytes
                if row is None:
                    body += _U32.pack(_TOMBSTONE_LEN)
                else:
                    row_bytes = self._encode_row(schema, row)
                    put_u32(body, len(row_bytes))
                    body += row_bytes
                count += 1
            path = os.path.join(self.data_dir, f"{table_name}.ckpt.{batch}")
            tmp = path + ".tmp"
            with open(tmp, "wb") as f:
                f.write(CKPT_MAGIC)
                f.write(bytes([CKPT_VERSION]))
                f.write(body)
                f.write(CKPT_END)
                f.flush()
                os.fsync(f.fileno())
            os.rename(tmp, path)
            manifest["tables"][table_name] = count
        mpath = os.path.join(self.data_dir, f"manifest.ckpt.{batch}")
        tmp = mpath + ".tmp"
        with open(tmp, "w") as f:
            json.dump(manifest, f)
            f.flush()
            os.fsync(f.fileno())
        os.rename(tmp, mpath)

    def _encode_row_key(self, schema: TableSchema, key: tuple) -> bytes:
        out = bytearray()
        pk_cols = [c for c in schema.columns if c.primary_key]
        for col, v in zip(pk_cols, key):
            if col.kind == "string":
                put_string(out, v)
            else:
                out += _SCALAR_STRUCT[col.kind].pack(v)
        return bytes(out)

    def _decode_row_key(self, schema: TableSchema, buf: bytes) -> tuple:
        r = ByteReader(buf)
        vals = []
        for col in schema.columns:
            if not col.primary_key:
                continue
            if col.kind == "string":
                vals.append(r.string())
            else:
                s = _SCALAR_STRUCT[col.kind]
                vals.append(s.unpack(r.take(s.size))[0])
        return tuple(vals)

    def _read_checkpoint_file(self, schema: TableSchema, path: str, expect: int) -> dict:
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:4] != CKPT_MAGIC or len(buf) < 5 or buf[4] != CKPT_VERSION:
            raise CorruptCheckpoint(f"{path}: bad header")
        if not buf.endswith(CKPT_END):
            raise CorruptCheckpoint(f"{path}: missing commit marker")
        r = ByteReader(buf, 5, len(buf) - len(CKPT_END))
        images = {}
        while r.remaining():
            key = self._decode_row_key(schema, r.take(r.u32()))
            row_len = r.u32()
            if row_len == _TOMBSTONE_LEN:
                images[key] = None
            else:
                images[key] = self._decode_row(schema, r.take(row_len))
        if len(images) != expect:
            raise CorruptCheckpoint(f"{path}: {len(images)} entries, manifest says {expect}")
        return images

    def recover_from_checkpoint(self) -> tuple[int, int]:
        """Load the latest complete checkpoint lineage into fresh tables.

        Returns (last checkpointed batch, its max TiD); (0, 0) on cold start.
        Overlays batch checkpoints in ascending order and stops at the first
        invalid one, so a crash mid-checkpoint falls back to the previous.
        """
        if not self.durable or not os.path.isdir(self.data_dir):
            return 0, 0
        manifests = []
        for fname in os.listdir(self.data_dir):
            if fname.startswith("manifest.ckpt."):
                try:
                    manifests.append(int(fname.rsplit(".", 1)[1]))
                except ValueError:
                    continue
        horizon, max_tid = 0, 0
        for batch in sorted(manifests):
            try:
                with open(os.path.join(self.data_dir, f"manifest.ckpt.{batch}")) as f:
                    manifest = json.load(f)
                overlays = {}
                for table_name, count in manifest["tables"].items():
                    schema = self.tables[table_name].schema
                    path = os.path.join(self.data_dir, f"{table_name}.ckpt.{batch}")
                    overlays[table_name] = self._read_checkpoint_file(schema, path, count)
            except (CorruptCheckpoint, OSError, KeyError, ValueError):
                break
            for table_name, images in overlays.items():
                table = self.tables[table_name]
                for key, row in images.items():
                    v = Version(manifest["max_tid"], row, tombstone=(row is None))
                    v.sealed = True
                    table.primary[key] = [v]
                    if row is not None:
                        for idx_name, cols in table.secondary_cols.items():
                            idx_key = tuple(row[i] for i in cols)
                            table.secondary[idx_name].setdefault(idx_key, set()).add(key)
            horizon = batch
            max_tid = manifest["max_tid"]
        return horizon, max_tid

    # -- verification helpers -------------------------------------------------

    def committed_image(self, max_tid: int) -> dict:
        """Latest committed images of every table at a TiD cut: table -> {key: row}."""
        snapshot = Snapshot(read_tid=max_tid + 1, horizon=max_tid)
        return {name: self.scan(name, snapshot) for name in self.tables}

    def check_all_constraints(self, max_tid: int) -> list[str]:
        """Exhaustive post-run scan; returns violation descriptions (empty = sound)."""
        problems = []
        snapshot = Snapshot(read_tid=max_tid + 1, horizon=max_tid)
        for name, table in self.tables.items():
            schema = table.schema
            for key in table.primary:
                row = self.read_by_key(name, key, snapshot)
                if row is None:
                    continue
                try:
                    self._check_constraints(table, row, "scan", snapshot)
                except ConstraintViolation as exc:
                    problems.append(f"{name}[{key}]: {exc}")
        return problems
