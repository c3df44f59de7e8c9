"""Query execution under a time budget and denotation comparison."""

from __future__ import annotations

import math
import sqlite3
import time
import warnings
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass

DEFAULT_TIMEOUT_MS = 30_000
PERMUTATION_PROBE_CAP = 10_000
_PROGRESS_OPS = 1_000


class ExecError(Exception):
    """The engine rejected the query (syntax, unknown name, runtime error)."""


class PermutationSearchExhausted(UserWarning):
    """Column-permutation search hit its probe cap; the pair was judged unequal."""


@dataclass(frozen=True)
class Denotation:
    """Rows produced by a query, or bottom (``rows is None``) on timeout."""

    column_count: int
    rows: tuple | None

    @property
    def is_bottom(self) -> bool:
        return self.rows is None

    @property
    def is_empty(self) -> bool:
        return self.rows is not None and len(self.rows) == 0

    @classmethod
    def of(cls, rows, column_count: int | None = None) -> "Denotation":
        rows = tuple(tuple(r) for r in rows)
        if column_count is None:
            column_count = len(rows[0]) if rows else 0
        if any(len(r) != column_count for r in rows):
            raise ValueError("rows of unequal arity")
        return cls(column_count, rows)


BOTTOM = Denotation(0, None)


@dataclass(frozen=True)
class CompareFlags:
    order_sensitive: bool = False
    column_order_insensitive: bool = False


def _run(conn: sqlite3.Connection, sql: str, timeout_ms: float) -> Denotation:
    if sql is None or not sql.strip():
        raise ExecError("empty query")
    deadline = time.monotonic() + timeout_ms / 1000.0
    timed_out = False

    def check():
        nonlocal timed_out
        if time.monotonic() > deadline:
            timed_out = True
            return 1
        return 0

    conn.set_progress_handler(check, _PROGRESS_OPS)
    try:
        cur = conn.execute(sql)
        rows = cur.fetchall()
        width = len(cur.description) if cur.description else 0
    except (sqlite3.Error, sqlite3.Warning, ValueError, OverflowError) as exc:
        if timed_out:
            return BOTTOM
        raise ExecError(str(exc)) from exc
    finally:
        conn.set_progress_handler(None, 0)
    if cur.description is None:
        raise ExecError("statement returned no result set")
    return Denotation(width, tuple(rows))


@contextmanager
def _connected(db):
    if isinstance(db, sqlite3.Connection):
        yield db
        return
    cached = getattr(db, "_conn", None)
    if cached is not None:
        yield cached
        return
    conn = db.connect()
    try:
        yield conn
    finally:
        conn.close()


def execute(query: str, db, timeout_ms: float = DEFAULT_TIMEOUT_MS) -> Denotation:
    """Run ``query`` read-only on ``db`` (an instance or an open connection).

    Returns :data:`BOTTOM` when the budget elapses and raises
    :class:`ExecError` when the engine rejects the query.
    """
    with _connected(db) as conn:
        return _run(conn, query, timeout_ms)


def normalize_value(v):
    if isinstance(v, float) and math.isfinite(v) and v.is_integer():
        return int(v)
    return v


def _sort_key(v):
    if v is None:
        return (0, 0)
    if isinstance(v, (int, float)):
        return (1, v)
    if isinstance(v, str):
        return (2, v)
    return (3, bytes(v))


def _row_key(row):
    return tuple(_sort_key(v) for v in row)


def _column_signature(column, order_sensitive: bool):
    if order_sensitive:
        return tuple(_sort_key(v) for v in column)
    return tuple(sorted(_sort_key(v) for v in column))


def _same_rows(a_rows, b_rows, order_sensitive: bool) -> bool:
    if order_sensitive:
        return a_rows == b_rows
    return Counter(a_rows) == Counter(b_rows)


def _permutation_match(a_rows, b_rows, width: int, order_sensitive: bool) -> bool:
    a_cols = list(zip(*a_rows))
    b_cols = list(zip(*b_rows))
    a_sig = [_column_signature(c, order_sensitive) for c in a_cols]
    b_sig = [_column_signature(c, order_sensitive) for c in b_cols]
    if sorted(a_sig) != sorted(b_sig):
        return False
    # candidates[j] = columns of a that could sit at position j of b
    candidates = [[i for i in range(width) if a_sig[i] == b_sig[j]] for j in range(width)]
    target = b_rows if order_sensitive else Counter(b_rows)
    probes = 0
    chosen: list[int] = []
    used = [False] * width

    def search(j: int) -> bool | None:
        nonlocal probes
        if j == width:
            probes += 1
            permuted = [tuple(row[i] for i in chosen) for row in a_rows]
            if order_sensitive:
                return tuple(permuted) == target
            return Counter(permuted) == target
        for i in candidates[j]:
            if used[i]:
                continue
            if probes >= PERMUTATION_PROBE_CAP:
                return None
            used[i] = True
            chosen.append(i)
            found = search(j + 1)
            chosen.pop()
            used[i] = False
            if found or found is None:
                return found
        return False

    result = search(0)
    if result is None:
        warnings.warn(f"column permutation search gave up after {PERMUTATION_PROBE_CAP} probes",
                      PermutationSearchExhausted, stacklevel=3)
        return False
    return result


def denotations_equal(a: Denotation, b: Denotation, flags: CompareFlags = CompareFlags()) -> bool:
    if a.is_bottom or b.is_bottom:
        return a.is_bottom and b.is_bottom
    if a.column_count != b.column_count or len(a.rows) != len(b.rows):
        return False
    a_rows = tuple(tuple(normalize_value(v) for v in r) for r in a.rows)
    b_rows = tuple(tuple(normalize_value(v) for v in r) for r in b.rows)
    if _same_rows(a_rows, b_rows, flags.order_sensitive):
        return True
    if not flags.column_order_insensitive or a.column_count < 2 or not a_rows:
        return False
    return _permutation_match(a_rows, b_rows, a.column_count, flags.order_sensitive)


def distinguishes(db, g: str, q: str, timeout_ms: float = DEFAULT_TIMEOUT_MS,
                  flags: CompareFlags = CompareFlags()) -> bool:
    """True when ``db`` tells ``q`` apart from ``g``.

    An engine error on ``q`` counts as distinguished; on ``g`` it propagates.
    """
    with _connected(db) as conn:
        gold = _run(conn, g, timeout_ms)
        try:
            pred = _run(conn, q, timeout_ms)
        except ExecError:
            return True
    return not denotations_equal(gold, pred, flags)
