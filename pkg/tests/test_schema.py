import itertools
import json

import pytest

from sqlsuite.schema import (BOOLEAN, INTEGER, REAL, TEXT, TIME, SchemaError, fk_table_order, load_schemas,
                             make_schema, normalize_type, schemas_from_json)


def _write(tmp_path, data):
    path = tmp_path / "schemas.json"
    path.write_text(json.dumps(data))
    return path


def _fig5():
    return {
        "db_id": "fig5",
        "table_names": ["People", "State"],
        "columns": [[0, "NAME", "text"], [0, "AGE", "number"], [0, "BORN_STATE", "text"], [1, "STATE", "text"]],
        "primary_keys": [3],
        "foreign_keys": [[2, 3]],
    }


class TestLoad:
    """Reading schema files."""

    def test_minimal_single_table(self, tmp_path):
        data = [{"db_id": "d", "table_names": ["t"], "columns": [[0, "a", "integer"]],
                 "primary_keys": [], "foreign_keys": []}]
        schemas = load_schemas(_write(tmp_path, data))
        assert list(schemas) == ["d"]
        assert schemas["d"].table("t").columns[0].decl_type == INTEGER

    def test_people_state_has_one_fk_edge(self, tmp_path):
        schemas = load_schemas(_write(tmp_path, [_fig5()]))
        fks = schemas["fig5"].foreign_keys
        assert len(fks) == 1
        child, parent = fks[0]
        assert (str(child), str(parent)) == ("People.BORN_STATE", "State.STATE")

    def test_fk_type_mismatch_names_both_columns(self, tmp_path):
        bad = _fig5()
        bad["columns"][2] = [0, "BORN_STATE", "integer"]
        with pytest.raises(SchemaError) as err:
            load_schemas(_write(tmp_path, [bad]))
        assert "People.BORN_STATE" in str(err.value) and "State.STATE" in str(err.value)

    def test_duplicate_db_id(self, tmp_path):
        with pytest.raises(SchemaError, match="duplicate db_id"):
            load_schemas(_write(tmp_path, [_fig5(), _fig5()]))

    def test_unreadable_and_malformed(self, tmp_path):
        with pytest.raises(SchemaError):
            load_schemas(tmp_path / "missing.json")
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(SchemaError, match="invalid JSON"):
            load_schemas(path)
        with pytest.raises(SchemaError):
            schemas_from_json([{"db_id": "x"}])

    def test_native_layout_with_star_column(self):
        obj = {"db_id": "n", "table_names_original": ["t"], "table_names": ["t"],
               "column_names_original": [[-1, "*"], [0, "id"], [0, "label"]],
               "column_types": ["text", "number", "text"], "primary_keys": [1], "foreign_keys": []}
        schema = schemas_from_json([obj])["n"]
        assert [c.name for c in schema.table("t").columns] == ["id", "label"]
        assert schema.table("t").column("id").is_primary_key

    def test_loading_twice_is_identical(self, tmp_path):
        path = _write(tmp_path, [_fig5()])
        assert load_schemas(path) == load_schemas(path)

    def test_cycle_rejected(self):
        with pytest.raises(SchemaError, match="cycle"):
            make_schema("c", {"a": [("x", "int"), ("y", "int")], "b": [("x", "int"), ("y", "int")]},
                        foreign_keys=[("a.y", "b.x"), ("b.y", "a.x")])

    def test_duplicate_names_rejected(self):
        with pytest.raises(SchemaError, match="duplicate column"):
            make_schema("d", {"t": [("a", "int"), ("A", "int")]})

    def test_missing_fk_endpoint(self):
        with pytest.raises(SchemaError, match="does not exist"):
            make_schema("d", {"t": [("a", "int")]}, foreign_keys=[("t.a", "u.b")])

    def test_round_trip_json(self, ps_schema):
        again = schemas_from_json([ps_schema.to_json()])["people_state"]
        assert again == ps_schema


class TestTypes:
    """Declared type normalization."""

    @pytest.mark.parametrize("raw,expected", [
        ("INT", INTEGER), ("number", INTEGER), ("varchar(20)", TEXT), ("double", REAL),
        ("bool", BOOLEAN), ("datetime", TIME), ("unsigned big int", INTEGER),
    ])
    def test_aliases(self, raw, expected):
        assert normalize_type(raw) == expected

    def test_unknown_maps_to_text_with_warning(self, caplog):
        assert normalize_type("blob") == TEXT
        assert "unknown column type" in caplog.text


class TestOrder:
    """Topological table order."""

    def test_no_fks_keeps_declaration_order(self):
        schema = make_schema("d", {"x": [("a", "int")], "y": [("a", "int")]})
        assert fk_table_order(schema) == ["x", "y"]

    def test_people_state(self, tmp_path):
        schema = load_schemas(_write(tmp_path, [_fig5()]))["fig5"]
        assert fk_table_order(schema) == ["State", "People"]

    def test_chain(self):
        schema = make_schema("chain", {"C": [("b", "int")], "B": [("id", "int"), ("a", "int")], "A": [("id", "int")]},
                             foreign_keys=[("C.b", "B.id"), ("B.a", "A.id")])
        edges = [(c.table, p.table) for c, p in schema.foreign_keys]
        valid = [list(p) for p in itertools.permutations(["A", "B", "C"])
                 if all(p.index(parent) < p.index(child) for child, parent in edges)]
        # the brute-force search over all orders leaves exactly one candidate
        assert valid == [["A", "B", "C"]]
        assert fk_table_order(schema) == ["A", "B", "C"]
