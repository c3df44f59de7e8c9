import random

import pytest

from sqlsuite.distiller import empty_instance
from sqlsuite.execution import execute
from sqlsuite.mutation import (COLUMN_REF, COMPARISON_OP, DROPPABLE_SPAN, FLOAT_CONST, INT_CONST, STRING_CONST,
                               NeighborError, SqlParseError, UnknownReference, apply_mutation, drop_spans,
                               extract_constants, generate_neighbors, has_top_level_order_by, mutate_column,
                               mutate_constant, mutate_operator, parse_sql)
from sqlsuite.sampler import DatabaseInstance
from sqlsuite.schema import make_schema

from conftest import one_table


def _people():
    return make_schema("fig5", {"people": [("name", "text"), ("age", "int"), ("born_state", "text")]})


def _neighbors(sql, schema, seed=0):
    return generate_neighbors(parse_sql(sql, schema), schema, empty_instance(schema), random.Random(seed))


class TestParse:
    """Parsing and site enumeration."""

    def test_sites_of_simple_filter(self, ps_schema):
        ast = parse_sql("SELECT name FROM people WHERE age > 34", ps_schema)
        found = {(s.kind, s.payload) for s in ast.sites}
        assert found == {(INT_CONST, 34), (COMPARISON_OP, ">"), (COLUMN_REF, "name"), (COLUMN_REF, "age"),
                         (DROPPABLE_SPAN, "WHERE age > 34")}

    def test_asc_is_preserved_not_droppable(self):
        ast = parse_sql("SELECT 1 FROM t ORDER BY a ASC", one_table("a"))
        assert ("asc", "ASC") in ast.preserved
        assert "ASC" not in [s.payload for s in ast.sites_of(DROPPABLE_SPAN)]

    def test_outer_parentheses_are_preserved(self):
        ast = parse_sql("((SELECT a FROM t))", one_table("a"))
        assert ast.sql() == "SELECT a FROM t"
        assert [p[0] for p in ast.preserved] == ["parentheses", "parentheses"]

    @pytest.mark.parametrize("bad", ["SELECT FROM WHERE", "", "SELECT 1; SELECT 2", "DELETE FROM t"])
    def test_rejects(self, bad):
        with pytest.raises(SqlParseError):
            parse_sql(bad)

    def test_unknown_column_and_table(self):
        with pytest.raises(UnknownReference):
            parse_sql("SELECT b FROM t", one_table("a"))
        with pytest.raises(UnknownReference):
            parse_sql("SELECT a FROM nowhere", one_table("a"))

    def test_alias_resolution(self, ps_schema):
        ast = parse_sql("SELECT T1.name FROM people AS T1 JOIN state AS T2 ON T1.born_state = T2.state_id "
                        "WHERE T2.state_name = 'x'", ps_schema)
        tables = {s.payload: s.table for s in ast.sites_of(COLUMN_REF)}
        assert tables == {"name": "people", "state_name": "state"}

    def test_join_condition_is_not_a_site(self, ps_schema):
        ast = parse_sql("SELECT T1.name FROM people AS T1 JOIN state AS T2 ON T1.born_state = T2.state_id",
                        ps_schema)
        assert [s.payload for s in ast.sites_of(COMPARISON_OP)] == []

    def test_double_quoted_value_becomes_string(self, ps_schema):
        ast = parse_sql('SELECT name FROM people WHERE name = "Alice"', ps_schema)
        assert extract_constants(ast).strings == ("Alice",)

    def test_constants_in_site_order(self):
        ast = parse_sql("SELECT a FROM t WHERE a > 3 AND a < 2.5 AND b = 'x' AND a != -4",
                        one_table("a", "b"))
        gc = extract_constants(ast)
        assert gc.ints == (3, -4) and gc.floats == (2.5,) and gc.strings == ("x",)

    def test_top_level_order_by(self):
        assert has_top_level_order_by("SELECT a FROM t ORDER BY a")
        assert not has_top_level_order_by("SELECT a FROM (SELECT a FROM t ORDER BY a)")
        assert has_top_level_order_by("SELECT a FROM t UNION SELECT a FROM t ORDER BY a")


class TestRules:
    """Per-site replacement rules."""

    def _site(self, sql, kind, schema=None):
        return parse_sql(sql, schema).sites_of(kind)[0]

    def test_int(self, rng):
        values = mutate_constant(self._site("SELECT a FROM t WHERE a > 34", INT_CONST), rng)
        assert values[:2] == [33, 35] and len(values) == 3

    def test_float(self, rng):
        values = mutate_constant(self._site("SELECT a FROM t WHERE a > 2.5", FLOAT_CONST), rng)
        assert values[:2] == [2.499, 2.501] and len(values) == 3
        assert -1e6 <= values[2] <= 1e6

    def test_string(self, rng):
        rand, sub, concat = mutate_constant(self._site("SELECT a FROM t WHERE b = 'Alice'", STRING_CONST), rng)
        assert sub in "Alice" and 0 < len(sub) < 5
        assert concat.startswith("Alice") and len(concat) > 5
        assert 1 <= len(rand) <= 10

    @pytest.mark.parametrize("op,expected", [
        (">", {">=", "<", "<=", "=", "!="}), ("=", {"!=", "<", "<=", ">", ">="}),
    ])
    def test_operator(self, op, expected):
        site = self._site(f"SELECT a FROM t WHERE a {op} 1", COMPARISON_OP)
        assert set(mutate_operator(site)) == expected

    def test_operator_count(self):
        out = mutate_operator(self._site("SELECT a FROM t WHERE a <= 1", COMPARISON_OP))
        assert len(out) == 5 and "<=" not in out

    def test_column_siblings(self):
        schema = _people()
        ast = parse_sql("SELECT name FROM people WHERE age > 1", schema)
        by_name = {s.payload: s for s in ast.sites_of(COLUMN_REF)}
        assert mutate_column(by_name["age"], schema) == []
        assert mutate_column(by_name["name"], schema) == ["born_state"]
        single = one_table("a")
        assert mutate_column(parse_sql("SELECT a FROM t", single).sites_of(COLUMN_REF)[0], single) == []


class TestDrop:
    """Span dropping."""

    def test_where_and_limit(self):
        out = drop_spans(parse_sql("SELECT a FROM t WHERE a > 0 LIMIT 5"))
        assert "SELECT a FROM t LIMIT 5" in out and "SELECT a FROM t WHERE a > 0" in out

    def test_asc_not_dropped(self):
        out = drop_spans(parse_sql("SELECT a FROM t ORDER BY a ASC"))
        assert out == ["SELECT a FROM t"]

    def test_distinct(self):
        assert "SELECT a FROM t" in drop_spans(parse_sql("SELECT DISTINCT a FROM t"))

    def test_each_conjunct(self):
        out = drop_spans(parse_sql("SELECT a FROM t WHERE a > 0 AND b < 3"))
        assert set(out) == {"SELECT a FROM t WHERE b < 3", "SELECT a FROM t WHERE a > 0"}

    def test_desc_and_set_arms(self):
        out = drop_spans(parse_sql("SELECT a FROM t UNION ALL SELECT b FROM u ORDER BY a DESC"))
        assert "SELECT a FROM t UNION SELECT b FROM u ORDER BY a DESC" in out
        assert "SELECT a FROM t UNION ALL SELECT b FROM u ORDER BY a" in out
        assert "SELECT a FROM t ORDER BY a DESC" in out

    def test_aggregate_distinct(self):
        assert "SELECT COUNT(a) FROM t" in drop_spans(parse_sql("SELECT count(DISTINCT a) FROM t"))


class TestNeighbors:
    """Neighbor generation."""

    def test_simple_filter(self):
        schema = one_table("a")
        texts = set(_neighbors("SELECT a FROM t WHERE a > 0", schema).texts)
        expected = {f"SELECT a FROM t WHERE a {op} 0" for op in (">=", "<", "<=", "=", "<>")}
        expected |= {"SELECT a FROM t WHERE a > 1", "SELECT a FROM t WHERE a > -1", "SELECT a FROM t"}
        assert expected <= texts
        assert len(texts) == len(expected) + 1  # plus the random constant

    def test_having_without_group_by_is_filtered(self):
        schema = one_table("a", "b")
        ns = _neighbors("SELECT a, count(*) FROM t GROUP BY a HAVING count(*) > 1", schema)
        assert ns.stats.get("filtered", 0) >= 1
        assert not any("HAVING" in t and "GROUP BY" not in t for t in ns.texts)

    def test_provenance_replays(self, ps_schema):
        gold = parse_sql("SELECT T2.state_name, count(*) FROM people AS T1 JOIN state AS T2 "
                         "ON T1.born_state = T2.state_id WHERE T1.age >= 18 AND T1.name != 'x' "
                         "GROUP BY T2.state_name ORDER BY count(*) DESC LIMIT 3", ps_schema)
        ns = generate_neighbors(gold, ps_schema, empty_instance(ps_schema), random.Random(4))
        assert len(ns) > 20
        for n in ns.neighbors:
            assert apply_mutation(gold, n.mutation) == n.text

    def test_distinct_and_executable(self, ps_schema):
        ns = _neighbors("SELECT name FROM people WHERE age > 34 AND born_state = 2", ps_schema)
        assert len(set(ns.texts)) == len(ns.texts)
        assert "SELECT name FROM people WHERE age > 34 AND born_state = 2" not in ns.texts
        probe = empty_instance(ps_schema)
        for t in ns.texts:
            execute(t, probe)

    def test_deterministic(self, ps_schema):
        sql = "SELECT name FROM people WHERE age > 34 AND name LIKE '%a%'"
        assert _neighbors(sql, ps_schema, 5).texts == _neighbors(sql, ps_schema, 5).texts

    def test_gold_failure(self):
        schema = one_table("a")
        gold = parse_sql("SELECT a FROM t WHERE a > 0")
        probe = DatabaseInstance(make_schema("other", {"u": [("a", "int")]}), 0, {"u": []})
        with pytest.raises(NeighborError):
            generate_neighbors(gold, schema, probe, random.Random(0))
