"""Greedy distillation of a small database test suite for a group of gold queries.

All gold queries of one schema share a single stream of sampled databases. A
sampled database is kept when it tells apart at least one neighbor query that
no kept database has told apart yet.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .execution import DEFAULT_TIMEOUT_MS, CompareFlags, ExecError, denotations_equal, execute
from .mutation import (Mutation, Neighbor, NeighborSet, QueryAst, compare_flags_for, extract_constants,
                       generate_neighbors, parse_sql)
from .sampler import DEFAULT_P_GOLD, DEFAULT_ROW_RANGE, DatabaseInstance, GoldConstants, sample_instance
from .schema import Schema, schemas_from_json

logger = logging.getLogger(__name__)

DEFAULT_BUDGET = 1000
DEFAULT_AUX_BUDGET = 1000
SUITE_FILE = "suite.json"
PROGRESS_FILE = "progress.csv"

DISTINGUISH = "distinguish"
NON_EMPTY = "non_empty_gold"


class DistillError(RuntimeError):
    pass


@dataclass
class Member:
    t: int
    seed: int
    reason: str
    file: str | None = None
    instance: DatabaseInstance | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"t": self.t, "seed": self.seed, "reason": self.reason, "file": self.file}


@dataclass
class QueryRecord:
    qid: str
    gold: str
    order_sensitive: bool
    neighbors: list[Neighbor]
    distinguished: dict[int, int] = field(default_factory=dict)  # neighbor id -> member t
    undistinguished: set[int] = field(default_factory=set)
    nonempty_members: list[int] = field(default_factory=list)

    def fraction_left(self) -> float:
        return len(self.undistinguished) / len(self.neighbors) if self.neighbors else 0.0

    def to_json(self) -> dict:
        return {
            "gold": self.gold,
            "order_sensitive": self.order_sensitive,
            "neighbors": [{"id": i, "text": n.text, "provenance": n.mutation.to_json()}
                          for i, n in enumerate(self.neighbors)],
            "distinguished": {str(k): v for k, v in sorted(self.distinguished.items())},
            "undistinguished": sorted(self.undistinguished),
            "nonempty_members": self.nonempty_members,
        }

    @classmethod
    def from_json(cls, qid: str, d: dict) -> "QueryRecord":
        neighbors = [Neighbor(n["text"], Mutation.from_json(n["provenance"])) for n in d["neighbors"]]
        return cls(qid, d["gold"], d["order_sensitive"], neighbors,
                   {int(k): v for k, v in d["distinguished"].items()},
                   set(d["undistinguished"]), list(d.get("nonempty_members", [])))


@dataclass
class TestSuite:
    __test__ = False  # not a pytest class

    schema: Schema
    members: list[Member] = field(default_factory=list)
    per_query: dict[str, QueryRecord] = field(default_factory=dict)
    budget_used: int = 0
    discarded: int = 0
    config: dict = field(default_factory=dict)
    nonempty_failures: list[str] = field(default_factory=list)
    root: Path | None = None

    @property
    def db_id(self) -> str:
        return self.schema.db_id

    def instances(self, sped_up: bool = False) -> list[DatabaseInstance]:
        """Member databases; ``sped_up`` keeps only the first one."""
        members = self.members[:1] if sped_up else self.members
        out = []
        for m in members:
            if m.instance is not None:
                out.append(m.instance)
            elif m.file is not None and self.root is not None:
                out.append(DatabaseInstance.from_file(self.schema, self.root / m.file, m.t, m.seed))
            else:
                raise DistillError(f"suite {self.db_id}: member {m.t} has no database")
        return out

    def member_paths(self) -> list[Path]:
        return [self.root / m.file for m in self.members if m.file and self.root]

    def to_json(self) -> dict:
        return {
            "db_id": self.db_id,
            "config": self.config,
            "budget_used": self.budget_used,
            "discarded": self.discarded,
            "members": [m.to_json() for m in self.members],
            "queries": {qid: rec.to_json() for qid, rec in self.per_query.items()},
            "nonempty_failures": self.nonempty_failures,
            "schema": self.schema.to_json(),
        }

    def save(self, out_dir: str | Path, trace=None) -> Path:
        """Write member databases, ``suite.json`` and ``progress.csv`` under ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for m in self.members:
            m.file = f"db_{m.t}.sqlite3"
            if m.instance is not None and m.instance.tables is not None:
                m.instance.write(out_dir / m.file)
        self.root = out_dir
        (out_dir / SUITE_FILE).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")
        if trace is not None:
            with open(out_dir / PROGRESS_FILE, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["t", "undistinguished_fraction"])
                for t, frac in trace:
                    writer.writerow([t, f"{frac:.6f}"])
        return out_dir

    @classmethod
    def load(cls, suite_dir: str | Path) -> "TestSuite":
        suite_dir = Path(suite_dir)
        try:
            data = json.loads((suite_dir / SUITE_FILE).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DistillError(f"unreadable suite in {suite_dir}: {exc}") from exc
        schema = schemas_from_json([data["schema"]])[data["db_id"]]
        members = [Member(m["t"], m["seed"], m["reason"], m.get("file")) for m in data["members"]]
        per_query = {qid: QueryRecord.from_json(qid, d) for qid, d in data["queries"].items()}
        return cls(schema, members, per_query, data["budget_used"], data.get("discarded", 0),
                   data.get("config", {}), data.get("nonempty_failures", []), suite_dir)


def read_trace(suite_dir: str | Path) -> list[tuple[int, float]]:
    with open(Path(suite_dir) / PROGRESS_FILE, newline="", encoding="utf-8") as f:
        return [(int(r["t"]), float(r["undistinguished_fraction"])) for r in csv.DictReader(f)]


@dataclass
class CoverageSummary:
    suite_size: int
    per_query: dict[str, float]
    undistinguished_fraction: float
    pivotal: dict[int, list[tuple[str, int]]]
    first_member_fraction: float
    nonempty_failures: list[str]


def evaluate_coverage(suite: TestSuite) -> CoverageSummary:
    """Summarize the suite's bookkeeping without executing anything."""
    total = sum(len(r.neighbors) for r in suite.per_query.values())
    left = sum(len(r.undistinguished) for r in suite.per_query.values())
    pivotal: dict[int, list[tuple[str, int]]] = {m.t: [] for m in suite.members}
    for qid, rec in suite.per_query.items():
        for nid, t in sorted(rec.distinguished.items()):
            pivotal.setdefault(t, []).append((qid, nid))
    first = suite.members[0].t if suite.members else None
    # neighbors are credited to the earliest member that distinguishes them
    by_first = len(pivotal.get(first, [])) if first is not None else 0
    return CoverageSummary(
        suite_size=len(suite.members),
        per_query={qid: rec.fraction_left() for qid, rec in suite.per_query.items()},
        undistinguished_fraction=left / total if total else 0.0,
        pivotal=pivotal,
        first_member_fraction=(total - by_first) / total if total else 0.0,
        nonempty_failures=list(suite.nonempty_failures),
    )


@dataclass
class GoldQuery:
    qid: str
    ast: QueryAst
    neighbors: NeighborSet


def empty_instance(schema: Schema) -> DatabaseInstance:
    """All tables created, no rows. Used to weed out mutants the engine rejects."""
    return DatabaseInstance(schema, 0, {t.name: [] for t in schema.tables})


def neighbor_rng(base_seed: int, db_id: str, qid: str) -> random.Random:
    digest = hashlib.sha256(f"{base_seed}/{db_id}/neighbors/{qid}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def prepare_gold(qid: str, sql: str, schema: Schema, base_seed: int = 0,
                 timeout_ms: float = DEFAULT_TIMEOUT_MS, probe: DatabaseInstance | None = None) -> GoldQuery:
    """Parse ``sql`` against ``schema`` and enumerate its neighbors."""
    ast = parse_sql(sql, schema)
    probe = probe or empty_instance(schema)
    neighbors = generate_neighbors(ast, schema, probe, neighbor_rng(base_seed, schema.db_id, qid), timeout_ms)
    return GoldQuery(qid, ast, neighbors)


def _distinguished_set(conn, rec: QueryRecord, gold_den, flags: CompareFlags, candidates, timeout_ms):
    hit = []
    for nid in candidates:
        try:
            den = execute(rec.neighbors[nid].text, conn, timeout_ms)
        except ExecError:
            hit.append(nid)
            continue
        if not denotations_equal(gold_den, den, flags):
            hit.append(nid)
    return hit


def _gold_denotations(conn, records, timeout_ms):
    """Gold denotation per query, or None when the candidate is unusable."""
    dens, errors = {}, []
    usable = True
    for qid, rec in records.items():
        try:
            den = execute(rec.gold, conn, timeout_ms)
        except ExecError:
            errors.append(qid)
            usable = False
            continue
        if den.is_bottom:
            usable = False
        dens[qid] = den
    return (dens if usable else None), dens, errors


def distill(gold_queries: list[GoldQuery], schema: Schema, budget: int = DEFAULT_BUDGET, base_seed: int = 0,
            timeout_ms: float = DEFAULT_TIMEOUT_MS, column_order_insensitive: bool = True,
            row_range=DEFAULT_ROW_RANGE, p_gold: float = DEFAULT_P_GOLD, nulls: bool = False,
            aux_budget: int = DEFAULT_AUX_BUDGET, max_members: int | None = None,
            prune: bool = True) -> tuple[TestSuite, list[tuple[int, float]]]:
    """Run the greedy loop over ``budget`` sampled databases.

    Returns the suite and the progress trace ``[(t, undistinguished fraction)]``
    starting at ``t = 0``.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    constants = GoldConstants()
    for g in gold_queries:
        constants = constants.merge(extract_constants(g.ast))
    records: dict[str, QueryRecord] = {}
    flags: dict[str, CompareFlags] = {}
    for g in gold_queries:
        if g.qid in records:
            raise DistillError(f"duplicate query id {g.qid!r}")
        flags[g.qid] = compare_flags_for(g.ast, column_order_insensitive)
        records[g.qid] = QueryRecord(g.qid, g.ast.original_text, flags[g.qid].order_sensitive,
                                     list(g.neighbors.neighbors),
                                     undistinguished=set(range(len(g.neighbors))))
    total = sum(len(r.neighbors) for r in records.values())

    def fraction():
        return sum(len(r.undistinguished) for r in records.values()) / total if total else 0.0

    config = {
        "budget": budget, "seed": base_seed, "timeout_ms": timeout_ms, "row_range": list(row_range),
        "p_gold": p_gold, "nulls": nulls, "aux_budget": aux_budget, "max_members": max_members,
        "column_order_insensitive": column_order_insensitive, "prune": prune,
        "gold_constants": constants.to_json(),
    }
    suite = TestSuite(schema, config=config, per_query=records)
    trace = [(0, fraction())]
    ever_ok = {qid: False for qid in records}
    last_error: dict[str, str] = {}

    def attempt(t: int, want_nonempty: set[str] | None):
        instance = sample_instance(schema, constants, base_seed, t, row_range=row_range, p_gold=p_gold, nulls=nulls)
        conn = instance.connect()
        try:
            gold_dens, partial, errors = _gold_denotations(conn, records, timeout_ms)
            for qid in records:
                if qid not in errors:
                    ever_ok[qid] = True
            for qid in errors:
                last_error[qid] = "gold query failed"
            if gold_dens is None:
                suite.discarded += 1
                return
            hits = {qid: _distinguished_set(conn, rec, gold_dens[qid], flags[qid], sorted(rec.undistinguished),
                                            timeout_ms)
                    for qid, rec in records.items()}
            nonempty = [qid for qid, d in gold_dens.items() if not d.is_empty]
            if max_members is not None and len(suite.members) >= max_members:
                return
            if any(hits.values()):
                reason = DISTINGUISH
            elif want_nonempty is not None and want_nonempty.intersection(nonempty):
                reason = NON_EMPTY
            else:
                return
            suite.members.append(Member(t, instance.origin_seed, reason, instance=instance))
            for qid, nids in hits.items():
                rec = records[qid]
                for nid in nids:
                    rec.distinguished[nid] = t
                    rec.undistinguished.discard(nid)
            for qid in nonempty:
                records[qid].nonempty_members.append(t)
        finally:
            conn.close()

    t = 0
    for t in range(1, budget + 1):
        attempt(t, None)
        suite.budget_used = t
        trace.append((t, fraction()))

    if budget > 0:
        broken = [qid for qid, ok in ever_ok.items() if not ok]
        if broken:
            raise DistillError(f"{schema.db_id}: gold queries {broken} fail on every sampled database")
        lacking = {qid for qid, rec in records.items() if not rec.nonempty_members}
        extra = 0
        while lacking and extra < aux_budget:
            extra += 1
            t += 1
            attempt(t, lacking)
            suite.budget_used = t
            trace.append((t, fraction()))
            lacking = {qid for qid, rec in records.items() if not rec.nonempty_members}
        suite.nonempty_failures = sorted(lacking)
        if lacking:
            logger.warning("%s: no member with a non-empty gold result for %s", schema.db_id, sorted(lacking))

    if prune and suite.members:
        _prune(suite, flags, timeout_ms)
    return suite, trace


def coverage_matrix(suite: TestSuite, flags: dict[str, CompareFlags], timeout_ms: float):
    """For each member, the (query, neighbor) pairs it distinguishes and the golds it makes non-empty."""
    matrix = {}
    for member, instance in zip(suite.members, suite.instances()):
        conn = instance.connect()
        try:
            pairs, nonempty = set(), set()
            for qid, rec in suite.per_query.items():
                gold = execute(rec.gold, conn, timeout_ms)
                if not gold.is_empty and not gold.is_bottom:
                    nonempty.add(qid)
                for nid in _distinguished_set(conn, rec, gold, flags[qid], range(len(rec.neighbors)), timeout_ms):
                    pairs.add((qid, nid))
            matrix[member.t] = (pairs, nonempty)
        finally:
            conn.close()
    return matrix


def _prune(suite: TestSuite, flags: dict[str, CompareFlags], timeout_ms: float) -> None:
    """Drop members whose every contribution is also made by another member.

    Afterwards each member is the only one distinguishing some pair or the
    only one giving some gold query a non-empty result.
    """
    matrix = coverage_matrix(suite, flags, timeout_ms)

    def contributions(t):
        pairs, nonempty = matrix[t]
        return pairs | {("nonempty", q) for q in nonempty}

    kept = [m.t for m in suite.members]
    for t in reversed([m.t for m in suite.members]):
        others = set()
        for o in kept:
            if o != t:
                others |= contributions(o)
        if contributions(t) <= others:
            kept.remove(t)
    kept_set = set(kept)
    suite.members = [m for m in suite.members if m.t in kept_set]
    for qid, rec in suite.per_query.items():
        rec.distinguished = {}
        for m in suite.members:
            for q, nid in sorted(matrix[m.t][0]):
                if q == qid and nid not in rec.distinguished:
                    rec.distinguished[nid] = m.t
        rec.undistinguished = set(range(len(rec.neighbors))) - set(rec.distinguished)
        rec.nonempty_members = [m.t for m in suite.members if qid in matrix[m.t][1]]
    for m in suite.members:
        others = set()
        for o in suite.members:
            if o.t != m.t:
                others |= matrix[o.t][0]
        m.reason = DISTINGUISH if matrix[m.t][0] - others else NON_EMPTY
