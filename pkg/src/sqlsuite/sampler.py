"""Random database instances that respect a schema's types and foreign keys.

Tables are filled parents-first. A foreign-key child column draws each value
uniformly from its parent column; any other column mixes its base generator
with the gold query's constants and their close variants.
"""

from __future__ import annotations

import hashlib
import os
import random
import sqlite3
import string
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from decimal import Decimal
from pathlib import Path

from .schema import BOOLEAN, INTEGER, REAL, TEXT, TIME, Column, Schema, fk_table_order

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
REAL_BOUND = 1e6
STRING_ALPHABET = string.ascii_lowercase + string.digits
FLOAT_STEP = Decimal("0.001")

DEFAULT_ROW_RANGE = (2, 16)
DEFAULT_P_GOLD = 0.5
NULL_RATE = 0.05

_SQL_TYPES = {INTEGER: "INTEGER", REAL: "REAL", TEXT: "TEXT", BOOLEAN: "BOOLEAN", TIME: "TEXT"}
_EPOCH = datetime(1970, 1, 1)
_TIME_SPAN_SECONDS = int((datetime(2037, 12, 31) - _EPOCH).total_seconds())


class SamplingError(RuntimeError):
    """Constraints that cannot be met, e.g. too few distinct key values."""


@dataclass(frozen=True)
class GoldConstants:
    ints: tuple = ()
    floats: tuple = ()
    strings: tuple = ()

    def merge(self, other: "GoldConstants") -> "GoldConstants":
        def union(a, b):
            return tuple(dict.fromkeys(a + b))
        return GoldConstants(union(self.ints, other.ints), union(self.floats, other.floats),
                             union(self.strings, other.strings))

    def __bool__(self):
        return bool(self.ints or self.floats or self.strings)

    def to_json(self) -> dict:
        return {"ints": list(self.ints), "floats": list(self.floats), "strings": list(self.strings)}


def instance_seed(base_seed: int, db_id: str, t: int) -> int:
    """Per-instance 64-bit seed, independent of generation order."""
    digest = hashlib.sha256(f"{base_seed}/{db_id}/{t}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def random_string(rng: random.Random, lo: int = 1, hi: int = 10) -> str:
    return "".join(rng.choices(STRING_ALPHABET, k=rng.randint(lo, hi)))


def random_int(rng: random.Random) -> int:
    return rng.randint(INT64_MIN, INT64_MAX)


def random_real(rng: random.Random) -> float:
    return rng.uniform(-REAL_BOUND, REAL_BOUND)


def random_time(rng: random.Random) -> str:
    return (_EPOCH + timedelta(seconds=rng.randint(0, _TIME_SPAN_SECONDS))).strftime("%Y-%m-%d %H:%M:%S")


def random_substring(value: str, rng: random.Random) -> str | None:
    """A non-empty proper substring, or None when ``value`` is too short."""
    n = len(value)
    if n < 2:
        return None
    length = rng.randint(1, n - 1)
    start = rng.randint(0, n - length)
    return value[start:start + length]


def step_float(value: float, sign: int) -> float:
    return float(Decimal(repr(value)) + sign * FLOAT_STEP)


def constant_variants(c, rng: random.Random) -> list:
    """The constant itself plus close variants that sit right around it."""
    if isinstance(c, bool):
        c = int(c)
    if isinstance(c, int):
        return [v for v in (c, c - 1, c + 1) if INT64_MIN <= v <= INT64_MAX]
    if isinstance(c, float):
        return [c, step_float(c, -1), step_float(c, +1)]
    if isinstance(c, str):
        out = [c, random_string(rng, 1, 3) + c + random_string(rng, 1, 3)]
        sub = random_substring(c, rng)
        if sub is not None:
            out.append(sub)
        return out
    raise TypeError(f"unsupported constant {c!r}")


def _strip_wildcards(s: str) -> str:
    # LIKE patterns contribute their literal core to the data pool
    return s.strip("%") if "%" in s else s


def gold_pool(decl_type: str, gold: GoldConstants, rng: random.Random) -> list:
    """Gold constants and variants usable as values of a ``decl_type`` column."""
    pool: list = []
    if decl_type == INTEGER:
        for c in gold.ints:
            pool.extend(constant_variants(c, rng))
    elif decl_type == REAL:
        for c in gold.floats:
            pool.extend(constant_variants(c, rng))
        for c in gold.ints:
            pool.extend(float(v) for v in constant_variants(c, rng))
    elif decl_type in (TEXT, TIME):
        for c in gold.strings:
            core = _strip_wildcards(c)
            if core:
                pool.extend(constant_variants(core, rng))
    return list(dict.fromkeys(pool))


def base_value(decl_type: str, rng: random.Random):
    if decl_type == INTEGER:
        return random_int(rng)
    if decl_type == REAL:
        return random_real(rng)
    if decl_type == BOOLEAN:
        return rng.randint(0, 1)
    if decl_type == TIME:
        return random_time(rng)
    return random_string(rng)


def sample_column(col: Column, parent_values, gold: GoldConstants, n_rows: int, rng: random.Random,
                  p_gold: float = DEFAULT_P_GOLD, unique: bool | None = None, nulls: bool = False) -> list:
    """Draw ``n_rows`` values for ``col``.

    ``parent_values`` is the referenced column's content for a foreign-key
    child, else None. Primary-key columns are unique.
    """
    unique = col.is_primary_key if unique is None else unique
    if parent_values is not None:
        if n_rows and not parent_values:
            raise SamplingError(f"foreign-key column {col.name!r} has an empty parent column")
        if not unique:
            return [rng.choice(parent_values) for _ in range(n_rows)]
        distinct = list(dict.fromkeys(parent_values))
        if len(distinct) < n_rows:
            raise SamplingError(
                f"key column {col.name!r}: {n_rows} distinct values needed, parent has {len(distinct)}")
        return rng.sample(distinct, n_rows)

    pool = gold_pool(col.decl_type, gold, rng)
    use_nulls = nulls and not unique

    def draw():
        if use_nulls and rng.random() < NULL_RATE:
            return None
        if pool and rng.random() < p_gold:
            return rng.choice(pool)
        return base_value(col.decl_type, rng)

    if not unique:
        return [draw() for _ in range(n_rows)]

    values, seen = [], set()
    attempts = 0
    limit = 100 + 50 * n_rows
    while len(values) < n_rows:
        if attempts >= limit:
            raise SamplingError(f"key column {col.name!r}: cannot draw {n_rows} distinct {col.decl_type} values")
        attempts += 1
        v = draw()
        if v not in seen:
            seen.add(v)
            values.append(v)
    return values


def _quote(name: str) -> str:
    return '"' + name.replace('"', '""') + '"'


def create_statements(schema: Schema) -> list[str]:
    stmts = []
    for table in schema.tables:
        cols = []
        for col in table.columns:
            cols.append(f"{_quote(col.name)} {_SQL_TYPES[col.decl_type]}")
        pk = [c.name for c in table.columns if c.is_primary_key]
        if pk:
            cols.append("PRIMARY KEY (" + ", ".join(_quote(c) for c in pk) + ")")
        for child, parent in schema.foreign_keys:
            if child.table.lower() == table.name.lower():
                cols.append(f"FOREIGN KEY ({_quote(child.column)}) REFERENCES "
                            f"{_quote(parent.table)} ({_quote(parent.column)})")
        stmts.append(f"CREATE TABLE {_quote(table.name)} (" + ", ".join(cols) + ")")
    return stmts


@dataclass
class DatabaseInstance:
    """One concrete database: table name -> rows, in declared column order."""

    schema: Schema
    instance_id: int
    tables: dict[str, list[tuple]] | None
    origin_seed: int | None = None
    path: Path | None = None
    _conn: sqlite3.Connection | None = field(default=None, repr=False, compare=False)

    @property
    def db_id(self) -> str:
        return self.schema.db_id

    def _populate(self, conn: sqlite3.Connection) -> None:
        for stmt in create_statements(self.schema):
            conn.execute(stmt)
        for table in self.schema.tables:
            rows = self.tables.get(table.name, [])
            if rows:
                marks = ", ".join("?" * len(table.columns))
                conn.executemany(f"INSERT INTO {_quote(table.name)} VALUES ({marks})", rows)
        conn.commit()

    def connect(self) -> sqlite3.Connection:
        """A read-only connection: the file if persisted, else an in-memory copy."""
        if self.path is not None and Path(self.path).exists():
            return sqlite3.connect(f"file:{Path(self.path).resolve()}?mode=ro", uri=True,
                                   check_same_thread=False)
        if self.tables is None:
            raise FileNotFoundError(f"instance {self.db_id}/{self.instance_id}: no file and no content")
        conn = sqlite3.connect(":memory:", check_same_thread=False)
        self._populate(conn)
        conn.execute("PRAGMA query_only = ON")
        return conn

    def connection(self) -> sqlite3.Connection:
        """Cached connection for repeated execution; release with :meth:`close`."""
        if self._conn is None:
            self._conn = self.connect()
        return self._conn

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def write(self, path: str | Path) -> Path:
        """Persist as a single-file database; identical content gives identical bytes."""
        if self.tables is None:
            raise ValueError("instance has no in-memory content to write")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        if tmp.exists():
            tmp.unlink()
        conn = sqlite3.connect(tmp)
        try:
            self._populate(conn)
        finally:
            conn.close()
        os.replace(tmp, path)
        self.path = path
        return path

    def read_tables(self) -> dict[str, list[tuple]]:
        if self.tables is not None:
            return self.tables
        conn = self.connect()
        try:
            return {
                t.name: conn.execute(f"SELECT * FROM {_quote(t.name)}").fetchall()
                for t in self.schema.tables
            }
        finally:
            conn.close()

    @classmethod
    def from_file(cls, schema: Schema, path: str | Path, instance_id: int = 0, origin_seed=None):
        return cls(schema, instance_id, None, origin_seed, Path(path))


def _row_capacity(schema: Schema, table, columns: dict) -> int | None:
    """Upper bound on rows imposed by unique columns, or None if unbounded."""
    cap = None
    for col in table.columns:
        if not col.is_primary_key:
            continue
        parents = schema.fk_parents(table.name, col.name)
        if parents:
            limit = len(set(_parent_values(parents, columns)))
        elif col.decl_type == BOOLEAN:
            limit = 2
        else:
            continue
        cap = limit if cap is None else min(cap, limit)
    return cap


def _parent_values(parents, columns: dict) -> list:
    lists = [columns[(p.table.lower(), p.column.lower())] for p in parents]
    values = [v for v in lists[0] if v is not None]
    for other in lists[1:]:
        allowed = set(other)
        values = [v for v in values if v in allowed]
    return values


def sample_database(schema: Schema, gold: GoldConstants, rng: random.Random,
                    row_range=DEFAULT_ROW_RANGE, p_gold: float = DEFAULT_P_GOLD, nulls: bool = False,
                    instance_id: int = 0, origin_seed: int | None = None) -> DatabaseInstance:
    """Fill every table, parents before children, with a random row count."""
    lo, hi = row_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad row range {row_range}")
    columns: dict[tuple[str, str], list] = {}
    tables: dict[str, list[tuple]] = {}
    for name in fk_table_order(schema):
        table = schema.table(name)
        n_rows = rng.randint(lo, hi)
        cap = _row_capacity(schema, table, columns)
        if cap is not None:
            n_rows = min(n_rows, cap)
        parents_of = {c.name: schema.fk_parents(table.name, c.name) for c in table.columns}
        if any(parents and not _parent_values(parents, columns) for parents in parents_of.values()):
            n_rows = 0
        col_values = []
        for col in table.columns:
            parents = parents_of[col.name]
            parent_values = _parent_values(parents, columns) if parents else None
            values = sample_column(col, parent_values, gold, n_rows, rng, p_gold=p_gold, nulls=nulls)
            columns[(table.name.lower(), col.name.lower())] = values
            col_values.append(values)
        tables[table.name] = list(zip(*col_values)) if n_rows else []
    return DatabaseInstance(schema, instance_id, tables, origin_seed)


def sample_instance(schema: Schema, gold: GoldConstants, base_seed: int, t: int, **kwargs) -> DatabaseInstance:
    """Instance ``t`` of the stream seeded by ``base_seed`` for ``schema``."""
    seed = instance_seed(base_seed, schema.db_id, t)
    return sample_database(schema, gold, random.Random(seed), instance_id=t, origin_seed=seed, **kwargs)


def check_integrity(instance: DatabaseInstance) -> list[str]:
    """Direct scan for foreign-key, key-uniqueness and type violations."""
    schema = instance.schema
    tables = instance.read_tables()
    problems = []

    def column_values(ref):
        table = schema.table(ref.table)
        idx = [c.name.lower() for c in table.columns].index(ref.column.lower())
        return [row[idx] for row in tables.get(table.name, [])]

    for child, parent in schema.foreign_keys:
        allowed = set(column_values(parent))
        bad = [v for v in column_values(child) if v is not None and v not in allowed]
        if bad:
            problems.append(f"{child} -> {parent}: {len(bad)} dangling value(s)")
    expected = {INTEGER: int, REAL: float, BOOLEAN: int, TEXT: str, TIME: str}
    for table in schema.tables:
        for i, col in enumerate(table.columns):
            values = [row[i] for row in tables.get(table.name, [])]
            if col.is_primary_key and len(set(values)) != len(values):
                problems.append(f"{table.name}.{col.name}: duplicate key values")
            wrong = [v for v in values if v is not None and type(v) is not expected[col.decl_type]]
            if wrong:
                problems.append(f"{table.name}.{col.name}: {len(wrong)} value(s) not {col.decl_type}")
    return problems
