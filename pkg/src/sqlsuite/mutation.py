"""SQL parsing with addressable mutation sites, and neighbor-query generation.

A neighbor query differs from the gold query at exactly one site: a constant,
a comparison operator, a column reference, or a dropped span.
"""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, SqlglotError

from .execution import DEFAULT_TIMEOUT_MS, CompareFlags, ExecError, execute
from .sampler import INT64_MAX, INT64_MIN, REAL_BOUND, GoldConstants, random_string, random_substring, step_float
from .schema import Schema

logger = logging.getLogger(__name__)

DIALECT = "sqlite"

INT_CONST = "int_const"
FLOAT_CONST = "float_const"
STRING_CONST = "string_const"
COMPARISON_OP = "comparison_op"
COLUMN_REF = "column_ref"
DROPPABLE_SPAN = "droppable_span"
SITE_KINDS = (INT_CONST, FLOAT_CONST, STRING_CONST, COMPARISON_OP, COLUMN_REF, DROPPABLE_SPAN)
CONSTANT_KINDS = (INT_CONST, FLOAT_CONST, STRING_CONST)

COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")
_OP_CLASS = {"=": exp.EQ, "!=": exp.NEQ, "<": exp.LT, "<=": exp.LTE, ">": exp.GT, ">=": exp.GTE}
_CLASS_OP = {cls: op for op, cls in _OP_CLASS.items()}

# Clause order used when enumerating sites of a SELECT, so sites read left to right.
_SELECT_ORDER = ("distinct", "expressions", "from_", "from", "joins", "where", "group", "having",
                 "order", "limit", "offset")

# Spans never dropped because removing them cannot change the result.
SEMANTICS_PRESERVING = {
    "asc": "ASC is the default sort order",
    "parentheses": "redundant parentheses around a whole predicate",
    "inner": "INNER is the default join kind",
}


class SqlParseError(ValueError):
    pass


class UnknownReference(ValueError):
    pass


class NeighborError(RuntimeError):
    """The gold query itself fails on the probe database."""


@dataclass(frozen=True)
class MutationSite:
    kind: str
    location: tuple
    payload: object
    span: str | None = None  # which span a droppable site removes
    table: str | None = None  # resolved table of a column reference

    def describe(self) -> str:
        if self.kind == DROPPABLE_SPAN:
            return f"{self.span}:{self.payload}"
        return f"{self.payload!r}"


@dataclass
class QueryAst:
    original_text: str
    root: exp.Expression
    sites: list[MutationSite]
    preserved: list[tuple[str, str]] = field(default_factory=list)
    schema: Schema | None = None

    def sql(self) -> str:
        return self.root.sql(dialect=DIALECT)

    def node(self, site: MutationSite, root: exp.Expression | None = None) -> exp.Expression:
        return navigate(self.root if root is None else root, site.location)

    def sites_of(self, *kinds) -> list[MutationSite]:
        return [s for s in self.sites if s.kind in kinds]


@dataclass(frozen=True)
class Mutation:
    site_index: int
    kind: str
    rule: str
    replacement: object = None

    @property
    def tag(self) -> str:
        return f"{self.kind}#{self.site_index}:{self.rule}"

    def to_json(self) -> dict:
        return {"site": self.site_index, "kind": self.kind, "rule": self.rule, "replacement": self.replacement}

    @classmethod
    def from_json(cls, d: dict) -> "Mutation":
        return cls(d["site"], d["kind"], d["rule"], d.get("replacement"))


@dataclass(frozen=True)
class Neighbor:
    text: str
    mutation: Mutation


@dataclass
class NeighborSet:
    gold: QueryAst
    neighbors: list[Neighbor]
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.neighbors)

    @property
    def texts(self) -> list[str]:
        return [n.text for n in self.neighbors]


# --------------------------------------------------------------------------- paths

def node_path(node: exp.Expression) -> tuple:
    steps = []
    while node.parent is not None:
        steps.append((node.arg_key, node.index))
        node = node.parent
    return tuple(reversed(steps))


def navigate(root: exp.Expression, path) -> exp.Expression:
    node = root
    for key, idx in path:
        child = node.args[key]
        node = child[idx] if idx is not None else child
    return node


def _children(node: exp.Expression):
    keys = list(node.args)
    if isinstance(node, exp.Select):
        keys = [k for k in _SELECT_ORDER if k in node.args] + [k for k in keys if k not in _SELECT_ORDER]
    for key in keys:
        value = node.args.get(key)
        if isinstance(value, list):
            yield from (v for v in value if isinstance(v, exp.Expression))
        elif isinstance(value, exp.Expression):
            yield value


def _preorder(node: exp.Expression):
    yield node
    for child in _children(node):
        yield from _preorder(child)


def _in_join_condition(node: exp.Expression) -> bool:
    while node.parent is not None:
        if node.arg_key in ("on", "using") and isinstance(node.parent, exp.Join):
            return True
        node = node.parent
    return False


# --------------------------------------------------------------------------- parsing

def _number_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _literal_value(node: exp.Expression):
    """(kind, value) for a constant node, or None."""
    if isinstance(node, exp.Literal):
        if isinstance(node.parent, exp.Neg):
            return None  # addressed through the Neg node
        if node.is_string:
            return STRING_CONST, node.this
        value = _number_value(node.this)
    elif isinstance(node, exp.Neg) and isinstance(node.this, exp.Literal) and not node.this.is_string:
        value = -_number_value(node.this.this)
    else:
        return None
    if isinstance(value, int):
        return INT_CONST, value
    return FLOAT_CONST, value


def make_literal(value) -> exp.Expression:
    if isinstance(value, str):
        return exp.Literal.string(value)
    if isinstance(value, float):
        text = repr(value)
        if "inf" in text or "nan" in text:
            raise ValueError(f"non-finite constant {value!r}")
        return exp.Literal.number(text) if value >= 0 else exp.Neg(this=exp.Literal.number(text[1:]))
    if value >= 0:
        return exp.Literal.number(value)
    return exp.Neg(this=exp.Literal.number(-value))


def _enclosing_selects(node: exp.Expression):
    cur = node.parent
    while cur is not None:
        if isinstance(cur, exp.Select):
            yield cur
        cur = cur.parent


def _select_sources(select: exp.Select) -> dict:
    """Visible qualifier -> base table name (None for derived tables)."""
    sources = {}
    from_ = select.args.get("from_") or select.args.get("from")
    items = [from_.this] if from_ is not None else []
    items += [j.this for j in select.args.get("joins") or []]
    for item in items:
        if isinstance(item, exp.Table):
            sources[(item.alias or item.name).lower()] = item.name
        elif item is not None and item.alias:
            sources[item.alias.lower()] = None
    return sources


def _select_aliases(select: exp.Select) -> set[str]:
    return {e.alias.lower() for e in select.expressions if isinstance(e, exp.Alias)}


def _resolve_column(col: exp.Column, schema: Schema):
    """Return the base table of ``col``; None when valid but not a base column.

    Raises :class:`UnknownReference` when nothing in scope provides the column.
    """
    name = col.name.lower()
    qualifier = col.table.lower() if col.table else None
    selects = list(_enclosing_selects(col))
    for select in selects:
        sources = _select_sources(select)
        if qualifier:
            if qualifier not in sources:
                continue
            table_name = sources[qualifier]
            if table_name is None:
                return None
            table = schema.table(table_name)
            if table is None:
                raise UnknownReference(f"table {table_name!r} is not in schema {schema.db_id!r}")
            if table.column(name) is None:
                raise UnknownReference(f"no column {col.name!r} in table {table.name!r}")
            return table.name
        hits = []
        for table_name in sources.values():
            table = schema.table(table_name) if table_name else None
            if table is not None and table.column(name) is not None:
                hits.append(table.name)
        if hits:
            return hits[0]
        if any(t is None for t in sources.values()):
            return None
    if not qualifier and any(name in _select_aliases(s) for s in selects):
        return None
    if not selects:
        return None  # e.g. ORDER BY on a set operation names output columns
    where = f"{col.table}.{col.name}" if col.table else col.name
    raise UnknownReference(f"column {where!r} not found in schema {schema.db_id!r}")


def _check_tables(root: exp.Expression, schema: Schema) -> None:
    ctes = {c.alias.lower() for c in root.find_all(exp.CTE)}
    for table in root.find_all(exp.Table):
        if table.name and table.name.lower() not in ctes and schema.table(table.name) is None:
            raise UnknownReference(f"table {table.name!r} is not in schema {schema.db_id!r}")


def _unquote_string_identifiers(root: exp.Expression, schema: Schema) -> None:
    # sqlite reads an unresolvable "double-quoted" name as a string literal
    for col in list(root.find_all(exp.Column)):
        ident = col.this
        if col.table or not isinstance(ident, exp.Identifier) or not ident.quoted:
            continue
        try:
            _resolve_column(col, schema)
        except UnknownReference:
            col.replace(exp.Literal.string(ident.this))


def _connector_operands(node: exp.Expression) -> list[exp.Expression]:
    if isinstance(node, (exp.And, exp.Or)):
        return list(node.flatten())
    return [node]


def _enumerate_sites(root: exp.Expression, schema: Schema | None):
    sites: list[MutationSite] = []
    preserved: list[tuple[str, str]] = []

    def add(kind, node, payload, span=None, table=None):
        sites.append(MutationSite(kind, node_path(node), payload, span, table))

    def predicate_clause(clause: exp.Expression, span: str):
        body = clause.this
        while isinstance(body, exp.Paren):
            preserved.append(("parentheses", body.sql(dialect=DIALECT)))
            body = body.this
        operands = _connector_operands(body)
        if len(operands) == 1:
            add(DROPPABLE_SPAN, clause, clause.sql(dialect=DIALECT), span)
        else:
            for operand in operands:
                add(DROPPABLE_SPAN, operand, operand.sql(dialect=DIALECT), f"{span}_conjunct")

    for node in _preorder(root):
        if isinstance(node, exp.Select):
            for key in ("where", "having"):
                clause = node.args.get(key)
                if clause is not None:
                    predicate_clause(clause, key)
            for key in ("group", "order", "limit", "offset"):
                clause = node.args.get(key)
                if clause is not None:
                    add(DROPPABLE_SPAN, clause, clause.sql(dialect=DIALECT), key)
            if node.args.get("distinct") is not None:
                add(DROPPABLE_SPAN, node.args["distinct"], "DISTINCT", "distinct")
            for join in node.args.get("joins") or []:
                if (join.args.get("kind") or "").upper() == "INNER":
                    preserved.append(("inner", "INNER"))
                add(DROPPABLE_SPAN, join, join.sql(dialect=DIALECT), "join")
        elif isinstance(node, exp.SetOperation):
            add(DROPPABLE_SPAN, node, node.expression.sql(dialect=DIALECT), "set_right")
            add(DROPPABLE_SPAN, node, node.this.sql(dialect=DIALECT), "set_left")
            if isinstance(node, exp.Union) and not node.args.get("distinct"):
                add(DROPPABLE_SPAN, node, "ALL", "union_all")
            for key in ("order", "limit"):
                if node.args.get(key) is not None:
                    add(DROPPABLE_SPAN, node.args[key], node.args[key].sql(dialect=DIALECT), key)
        elif isinstance(node, exp.Ordered):
            if node.args.get("desc"):
                add(DROPPABLE_SPAN, node, "DESC", "desc")
            elif node.args.get("desc") is False:
                preserved.append(("asc", "ASC"))
        elif isinstance(node, exp.Distinct) and isinstance(node.parent, exp.AggFunc):
            add(DROPPABLE_SPAN, node, "DISTINCT", "agg_distinct")

        if _in_join_condition(node):
            continue
        lit = _literal_value(node)
        if lit is not None:
            add(lit[0], node, lit[1])
        elif type(node) in _CLASS_OP:
            add(COMPARISON_OP, node, _CLASS_OP[type(node)])
        elif isinstance(node, exp.Column) and isinstance(node.this, exp.Identifier):
            table = _resolve_column(node, schema) if schema is not None else None
            add(COLUMN_REF, node, node.name, table=table)
    return sites, preserved


def parse_sql(text: str, schema: Schema | None = None) -> QueryAst:
    """Parse one SQL query and enumerate its mutation sites.

    With a schema, table and column references are checked and resolved.
    """
    if text is None or not text.strip():
        raise SqlParseError("empty query")
    try:
        statements = [s for s in sqlglot.parse(text, read=DIALECT) if s is not None]
    except ParseError as exc:
        detail = exc.errors[0] if exc.errors else {}
        where = f" at line {detail.get('line')}, col {detail.get('col')}" if detail else ""
        raise SqlParseError(f"cannot parse{where}: {detail.get('description', exc)}") from exc
    except SqlglotError as exc:
        raise SqlParseError(f"cannot parse: {exc}") from exc
    if len(statements) != 1:
        raise SqlParseError(f"expected one statement, found {len(statements)}")
    root = statements[0]
    outer_parens = 0
    while isinstance(root, exp.Subquery) and not root.alias and isinstance(root.this, exp.Query) \
            and not any(root.args.get(k) for k in ("order", "limit", "offset")):
        root = root.this.pop()
        outer_parens += 1
    if not isinstance(root, exp.Query):
        raise SqlParseError(f"not a query: {type(root).__name__}")
    if isinstance(root, exp.Select) and not root.expressions:
        raise SqlParseError("SELECT without result columns")
    if schema is not None:
        _check_tables(root, schema)
        _unquote_string_identifiers(root, schema)
    sites, preserved = _enumerate_sites(root, schema)
    preserved = [("parentheses", "(...)")] * outer_parens + list(preserved)
    return QueryAst(text, root, sites, preserved, schema)


def try_parse(text: str, schema: Schema | None = None) -> QueryAst | None:
    try:
        return parse_sql(text, schema)
    except (SqlParseError, UnknownReference):
        return None


def has_top_level_order_by(sql_or_ast) -> bool:
    root = sql_or_ast.root if isinstance(sql_or_ast, QueryAst) else None
    if root is None:
        try:
            root = sqlglot.parse_one(sql_or_ast, read=DIALECT)
        except SqlglotError:
            return "order by" in sql_or_ast.lower()
    while isinstance(root, exp.Subquery):
        root = root.this
    return root.args.get("order") is not None


def compare_flags_for(gold, column_order_insensitive: bool) -> CompareFlags:
    """Rows are compared as a sequence exactly when the gold has a top-level ORDER BY."""
    return CompareFlags(has_top_level_order_by(gold), column_order_insensitive)


def extract_constants(ast: QueryAst) -> GoldConstants:
    """All literal constants of ``ast``, one entry per constant site, in site order."""
    ints, floats, strings = [], [], []
    bucket = {INT_CONST: ints, FLOAT_CONST: floats, STRING_CONST: strings}
    for site in ast.sites_of(*CONSTANT_KINDS):
        bucket[site.kind].append(site.payload)
    return GoldConstants(tuple(ints), tuple(floats), tuple(strings))


# --------------------------------------------------------------------------- mutation rules

def mutate_constant(site: MutationSite, rng: random.Random) -> list:
    """Replacement values for a constant site (close variants plus one random value)."""
    return [v for _, v in _constant_rules(site, rng)]


def _constant_rules(site: MutationSite, rng: random.Random):
    v = site.payload
    if site.kind == INT_CONST:
        out = [("minus_one", v - 1), ("plus_one", v + 1), ("random", rng.randint(INT64_MIN, INT64_MAX))]
        return [(r, x) for r, x in out if INT64_MIN <= x <= INT64_MAX]
    if site.kind == FLOAT_CONST:
        return [("minus_step", step_float(v, -1)), ("plus_step", step_float(v, +1)),
                ("random", round(rng.uniform(-REAL_BOUND, REAL_BOUND), 3))]
    if site.kind == STRING_CONST:
        out = [("random", random_string(rng))]
        sub = random_substring(v, rng)
        if sub is not None:
            out.append(("substring", sub))
        out.append(("concat", v + random_string(rng)))
        return out
    raise ValueError(f"not a constant site: {site.kind}")


def mutate_operator(site: MutationSite) -> list[str]:
    return [op for op in COMPARISON_OPS if op != site.payload]


def mutate_column(site: MutationSite, schema: Schema) -> list[str]:
    """Other columns of the same table with the same declared type."""
    if site.table is None or schema is None:
        return []
    table = schema.table(site.table)
    original = table.column(site.payload) if table else None
    if original is None:
        return []
    return [c.name for c in table.columns
            if c.name.lower() != original.name.lower() and c.decl_type == original.decl_type]


def _site_rules(site: MutationSite, schema: Schema | None, rng: random.Random):
    if site.kind in CONSTANT_KINDS:
        return _constant_rules(site, rng)
    if site.kind == COMPARISON_OP:
        return [("replace", op) for op in mutate_operator(site)]
    if site.kind == COLUMN_REF:
        return [("replace", name) for name in mutate_column(site, schema)]
    return [("drop", None)]


def _drop(node: exp.Expression, site: MutationSite) -> exp.Expression | None:
    """Remove the span in place; returns the new root when ``node`` was the root."""
    span = site.span
    if span.endswith("_conjunct"):
        parent = node.parent
        if not isinstance(parent, (exp.And, exp.Or)):
            raise ValueError("conjunct is not inside a connector")
        sibling = parent.expression if node is parent.this else parent.this
        parent.replace(sibling)
    elif span == "desc":
        node.replace(exp.Ordered(this=node.this, nulls_first=True))
    elif span == "agg_distinct":
        inner = node.expressions
        node.replace(inner[0] if len(inner) == 1 else exp.Tuple(expressions=inner))
    elif span in ("set_left", "set_right"):
        keep = (node.this if span == "set_right" else node.expression).copy()
        for key in ("order", "limit", "offset"):
            if node.args.get(key) is not None and keep.args.get(key) is None:
                keep.set(key, node.args[key].copy())
        if node.parent is None:
            return keep
        node.replace(keep)
    elif span == "union_all":
        node.set("distinct", True)
    else:
        node.pop()
    return None


def apply_mutation(ast: QueryAst, mutation: Mutation) -> str:
    """Serialize ``ast`` with ``mutation`` applied; replaying provenance uses this too."""
    site = ast.sites[mutation.site_index]
    root = ast.root.copy()
    node = navigate(root, site.location)
    if site.kind in CONSTANT_KINDS:
        node.replace(make_literal(mutation.replacement))
    elif site.kind == COMPARISON_OP:
        node.replace(_OP_CLASS[mutation.replacement](this=node.this, expression=node.expression))
    elif site.kind == COLUMN_REF:
        node.set("this", exp.Identifier(this=mutation.replacement, quoted=node.this.quoted))
    else:
        root = _drop(node, site) or root
    return root.sql(dialect=DIALECT)


def drop_spans(ast: QueryAst) -> list[str]:
    """One query per droppable span with that span removed; unparseable results are skipped."""
    out = []
    for i, site in enumerate(ast.sites):
        if site.kind != DROPPABLE_SPAN:
            continue
        text = apply_mutation(ast, Mutation(i, site.kind, "drop"))
        if try_parse(text) is not None:
            out.append(text)
    return out


def candidate_mutations(ast: QueryAst, schema: Schema | None, rng: random.Random):
    """Every single-site mutation of ``ast`` as ``(Mutation, text)`` pairs, in site order."""
    for i, site in enumerate(ast.sites):
        for rule, replacement in _site_rules(site, schema, rng):
            m = Mutation(i, site.kind, rule, replacement)
            try:
                text = apply_mutation(ast, m)
            except (ValueError, SqlglotError) as exc:
                logger.debug("mutation %s not applicable: %s", m.tag, exc)
                continue
            yield m, text


def generate_neighbors(gold: QueryAst, schema: Schema | None, probe_db, rng: random.Random,
                       timeout_ms: float = DEFAULT_TIMEOUT_MS) -> NeighborSet:
    """Distinct single-site mutants of ``gold`` that execute on ``probe_db``."""
    try:
        execute(gold.original_text, probe_db, timeout_ms)
    except ExecError as exc:
        raise NeighborError(f"gold query fails on the probe database: {exc}") from exc
    seen = {gold.sql(), gold.original_text.strip()}
    neighbors = []
    stats: Counter = Counter()
    for m, text in candidate_mutations(gold, schema, rng):
        if text in seen:
            continue
        seen.add(text)
        if m.kind == DROPPABLE_SPAN and try_parse(text) is None:
            continue
        try:
            execute(text, probe_db, timeout_ms)
        except ExecError:
            stats["filtered"] += 1
            continue
        neighbors.append(Neighbor(text, m))
        stats[m.kind] += 1
    return NeighborSet(gold, neighbors, dict(stats))
