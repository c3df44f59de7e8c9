"""Database schemas: loading, validation and foreign-key generation order.

Schemas are read from a JSON array of schema objects::

    {"db_id": "...", "table_names": [...],
     "columns": [[table_index, column_name, type_string], ...],
     "primary_keys": [column_index, ...],
     "foreign_keys": [[child_column_index, parent_column_index], ...]}

Column indices address the flat ``columns`` array. The native layout of the
Spider family (``column_names_original`` + ``column_types``, with a leading
``[-1, "*"]`` entry) is accepted too.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

logger = logging.getLogger(__name__)

INTEGER = "integer"
REAL = "real"
TEXT = "text"
BOOLEAN = "boolean"
TIME = "time"
COLUMN_TYPES = (INTEGER, REAL, TEXT, BOOLEAN, TIME)

_TYPE_ALIASES = {
    INTEGER: ("int", "integer", "bigint", "smallint", "tinyint", "mediumint", "number"),
    REAL: ("real", "float", "double", "decimal", "numeric"),
    TEXT: ("text", "varchar", "char", "string", "clob", "nvarchar", "nchar"),
    BOOLEAN: ("bool", "boolean", "bit"),
    TIME: ("time", "date", "datetime", "timestamp", "year"),
}


class SchemaError(ValueError):
    """Malformed or inconsistent schema description."""


class ColumnRef(NamedTuple):
    table: str
    column: str

    def __str__(self) -> str:
        return f"{self.table}.{self.column}"


def normalize_type(type_string: str) -> str:
    """Map a declared SQL type onto one of :data:`COLUMN_TYPES`."""
    raw = (type_string or "").strip().lower()
    base = raw.split("(")[0].strip()
    for canonical, aliases in _TYPE_ALIASES.items():
        if base == canonical or base in aliases:
            return canonical
    # affinity-style fallbacks for things like "unsigned big int" or "character varying"
    if "int" in base:
        return INTEGER
    if any(tok in base for tok in ("char", "text")):
        return TEXT
    if any(tok in base for tok in ("real", "floa", "doub")):
        return REAL
    logger.warning("unknown column type %r mapped to text", type_string)
    return TEXT


@dataclass(frozen=True)
class Column:
    name: str
    decl_type: str
    is_primary_key: bool = False

    def __post_init__(self):
        if self.decl_type not in COLUMN_TYPES:
            raise SchemaError(f"column {self.name!r}: unsupported type {self.decl_type!r}")


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[Column, ...]

    def __post_init__(self):
        if not self.columns:
            raise SchemaError(f"table {self.name!r} has no columns")

    def column(self, name: str) -> Column | None:
        lowered = name.lower()
        for col in self.columns:
            if col.name.lower() == lowered:
                return col
        return None


@dataclass(frozen=True)
class Schema:
    db_id: str
    tables: tuple[Table, ...]
    foreign_keys: tuple[tuple[ColumnRef, ColumnRef], ...] = ()
    primary_keys: tuple[ColumnRef, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {t.name.lower(): t for t in self.tables})

    def table(self, name: str) -> Table | None:
        return self._index.get(name.lower())

    def column(self, ref: ColumnRef) -> Column | None:
        table = self.table(ref.table)
        return table.column(ref.column) if table else None

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    def fk_parents(self, table: str, column: str) -> list[ColumnRef]:
        """Parent columns referenced by ``table.column`` (usually zero or one)."""
        key = (table.lower(), column.lower())
        return [p for c, p in self.foreign_keys if (c.table.lower(), c.column.lower()) == key]

    def to_json(self) -> dict:
        """Serialize back into the flat-index JSON layout."""
        columns, where = [], {}
        for ti, table in enumerate(self.tables):
            for col in table.columns:
                where[(table.name, col.name)] = len(columns)
                columns.append([ti, col.name, col.decl_type])
        return {
            "db_id": self.db_id,
            "table_names": [t.name for t in self.tables],
            "columns": columns,
            "primary_keys": [where[(r.table, r.column)] for r in self.primary_keys],
            "foreign_keys": [[where[tuple(c)], where[tuple(p)]] for c, p in self.foreign_keys],
        }


SchemaSet = dict  # db_id -> Schema


def validate_schema(schema: Schema) -> None:
    """Raise :class:`SchemaError` unless every structural invariant holds."""
    seen = set()
    for table in schema.tables:
        lowered = table.name.lower()
        if lowered in seen:
            raise SchemaError(f"{schema.db_id}: duplicate table name {table.name!r}")
        seen.add(lowered)
        names = [c.name.lower() for c in table.columns]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"{schema.db_id}: duplicate column(s) {sorted(dupes)} in table {table.name!r}")

    for ref in schema.primary_keys:
        if schema.column(ref) is None:
            raise SchemaError(f"{schema.db_id}: primary key {ref} names no existing column")

    parents_by_pair: dict[tuple[str, str], set[str]] = {}
    for child, parent in schema.foreign_keys:
        c_col, p_col = schema.column(child), schema.column(parent)
        if c_col is None or p_col is None:
            missing = child if c_col is None else parent
            raise SchemaError(f"{schema.db_id}: foreign key {child} -> {parent}: {missing} does not exist")
        if c_col.decl_type != p_col.decl_type:
            raise SchemaError(
                f"{schema.db_id}: foreign key type mismatch: {child} ({c_col.decl_type}) "
                f"-> {parent} ({p_col.decl_type})"
            )
        pair = (child.table.lower(), parent.table.lower())
        parents_by_pair.setdefault(pair, set()).add(parent.column.lower())
    for (child_t, parent_t), cols in parents_by_pair.items():
        if len(cols) > 1:
            logger.warning(
                "%s: multiple foreign keys %s -> %s look composite; composite keys are unsupported, "
                "each edge is sampled independently", schema.db_id, child_t, parent_t,
            )

    _topological_order(schema)  # raises on cycles


def _topological_order(schema: Schema) -> list[str]:
    names = [t.name for t in schema.tables]
    pos = {n.lower(): i for i, n in enumerate(names)}
    # parents[i] = indices of tables that table i refers to
    parents: list[set[int]] = [set() for _ in names]
    for child, parent in schema.foreign_keys:
        ci, pi = pos[child.table.lower()], pos[parent.table.lower()]
        parents[ci].add(pi)

    order, placed = [], set()
    while len(order) < len(names):
        # smallest declaration index whose parents are all placed
        ready = next((i for i in range(len(names)) if i not in placed and parents[i] <= placed), None)
        if ready is None:
            stuck = [names[i] for i in range(len(names)) if i not in placed]
            raise SchemaError(f"{schema.db_id}: foreign-key cycle among tables {stuck}")
        order.append(names[ready])
        placed.add(ready)
    return order


def fk_table_order(schema: Schema) -> list[str]:
    """Tables ordered so that every referenced table precedes its referrers.

    Ties are broken by declaration order.
    """
    return _topological_order(schema)


def _build_schema(obj: dict) -> Schema:
    try:
        db_id = obj["db_id"]
        table_names = obj.get("table_names_original") or obj["table_names"]
        if "columns" in obj:
            raw_columns = [tuple(c) for c in obj["columns"]]
        else:
            names = obj.get("column_names_original") or obj["column_names"]
            raw_columns = [(ti, name, typ) for (ti, name), typ in zip(names, obj["column_types"])]
        pk_idx = obj.get("primary_keys", [])
        fk_idx = obj.get("foreign_keys", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed schema object ({obj.get('db_id', '?') if isinstance(obj, dict) else '?'}): {exc}") from exc

    flat: list[ColumnRef | None] = []
    for entry in raw_columns:
        if len(entry) != 3:
            raise SchemaError(f"{db_id}: column entry {list(entry)} is not [table_index, name, type]")
        ti, name, _ = entry
        if ti == -1:
            flat.append(None)  # the '*' pseudo-column of the native layout
            continue
        if not isinstance(ti, int) or not 0 <= ti < len(table_names):
            raise SchemaError(f"{db_id}: column {name!r} has bad table index {ti}")
        flat.append(ColumnRef(table_names[ti], name))

    def ref(i) -> ColumnRef:
        if isinstance(i, list):
            raise SchemaError(f"{db_id}: composite key {i} is unsupported")
        if not isinstance(i, int) or not 0 <= i < len(flat) or flat[i] is None:
            raise SchemaError(f"{db_id}: column index {i} out of range")
        return flat[i]

    primary = tuple(ref(i) for i in pk_idx)
    pk_set = {(r.table, r.column) for r in primary}
    tables = []
    for ti, tname in enumerate(table_names):
        cols = tuple(
            Column(name, normalize_type(typ), (tname, name) in pk_set)
            for t, name, typ in raw_columns
            if t == ti
        )
        tables.append(Table(tname, cols))
    fks = []
    for pair in fk_idx:
        if len(pair) != 2:
            raise SchemaError(f"{db_id}: foreign key entry {pair} is not [child, parent]")
        fks.append((ref(pair[0]), ref(pair[1])))
    schema = Schema(db_id, tuple(tables), tuple(fks), primary)
    validate_schema(schema)
    return schema


def schemas_from_json(data) -> SchemaSet:
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise SchemaError("schema file must hold a JSON array of schema objects")
    out: SchemaSet = {}
    for obj in data:
        if not isinstance(obj, dict):
            raise SchemaError(f"schema entry is not an object: {obj!r}")
        schema = _build_schema(obj)
        if schema.db_id in out:
            raise SchemaError(f"duplicate db_id {schema.db_id!r}")
        out[schema.db_id] = schema
    return out


def load_schemas(path: str | Path) -> SchemaSet:
    """Load every schema in ``path`` keyed by ``db_id``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read schema file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return schemas_from_json(data)


def make_schema(db_id: str, tables: dict[str, Iterable], foreign_keys=(), primary_keys=()) -> Schema:
    """Convenience constructor, mostly for tests.

    ``tables`` maps table name to ``[(column, type), ...]``; keys are given as
    ``"table.column"`` strings.
    """
    def parse_ref(s):
        t, c = s.split(".")
        return ColumnRef(t, c)

    pks = tuple(parse_ref(p) for p in primary_keys)
    pk_set = {(r.table, r.column) for r in pks}
    built = tuple(
        Table(name, tuple(Column(c, normalize_type(t), (name, c) in pk_set) for c, t in cols))
        for name, cols in tables.items()
    )
    fks = tuple((parse_ref(c), parse_ref(p)) for c, p in foreign_keys)
    schema = Schema(db_id, built, fks, pks)
    validate_schema(schema)
    return schema
