import json
import subprocess
import sys

import pytest

from sqlsuite.cli import EXIT_DATA, EXIT_USAGE, main
from sqlsuite.distiller import TestSuite
from sqlsuite.sampler import DatabaseInstance, check_integrity
from sqlsuite.schema import load_schemas

from conftest import people_state

GOLD = [
    ("SELECT name FROM people WHERE age > 30", "people_state", "easy"),
    ("SELECT T2.state_name FROM people AS T1 JOIN state AS T2 ON T1.born_state = T2.state_id "
     "WHERE T1.name = 'Alice'", "people_state", "hard"),
]


@pytest.fixture
def inputs(tmp_path):
    schemas = tmp_path / "schemas.json"
    schemas.write_text(json.dumps([people_state().to_json()]))
    gold = tmp_path / "gold.tsv"
    gold.write_text("".join("\t".join(row) + "\n" for row in GOLD))
    return schemas, gold


def _distill(tmp_path, schemas, gold, *extra):
    out = tmp_path / "suites"
    code = main(["distill", "--schemas", str(schemas), "--gold", str(gold), "--out", str(out),
                 "--budget", "50", "--seed", "7", *extra])
    return code, out


class TestDistillCommand:
    """sqlsuite distill"""

    def test_happy_path(self, tmp_path, inputs, capsys):
        code, out = _distill(tmp_path, *inputs)
        assert code == 0
        assert (out / "people_state" / "suite.json").exists()
        assert (out / "people_state" / "progress.csv").exists()
        assert "undistinguished=" in capsys.readouterr().out
        suite = TestSuite.load(out / "people_state")
        assert suite.config["seed"] == 7 and suite.config["row_range"] == [2, 16]

    def test_budget_zero_warns(self, tmp_path, inputs, caplog):
        schemas, gold = inputs
        out = tmp_path / "zero"
        assert main(["distill", "--schemas", str(schemas), "--gold", str(gold), "--out", str(out),
                     "--budget", "0"]) == 0
        assert "budget is 0" in caplog.text
        assert TestSuite.load(out / "people_state").members == []

    def test_missing_schema(self, tmp_path, inputs, capsys):
        schemas, gold = inputs
        gold.write_text("SELECT 1\tatlantis\n")
        code, _ = _distill(tmp_path, schemas, gold)
        assert code == EXIT_DATA
        assert "atlantis" in capsys.readouterr().err

    def test_bad_flags(self, tmp_path, inputs):
        assert _distill(tmp_path, *inputs, "--row-min", "5", "--row-max", "2")[0] == EXIT_USAGE
        assert _distill(tmp_path, *inputs, "--p-gold", "1.5")[0] == EXIT_USAGE
        with pytest.raises(SystemExit) as err:
            main(["distill", "--budget", "x"])
        assert err.value.code == EXIT_USAGE


class TestEvaluateCommand:
    """sqlsuite evaluate"""

    def test_gold_against_itself(self, tmp_path, inputs, capsys):
        schemas, gold = inputs
        _, suites = _distill(tmp_path, schemas, gold)
        pred = tmp_path / "pred.txt"
        pred.write_text("".join(row[0] + "\n" for row in GOLD))
        report = tmp_path / "report.json"
        capsys.readouterr()
        assert main(["evaluate", "--gold", str(gold), "--pred", str(pred), "--suites", str(suites),
                     "--out", str(report)]) == 0
        assert "accuracy: 1.000" in capsys.readouterr().out
        assert json.loads(report.read_text())["accuracy"] == 1.0

    def test_sped_up_is_at_least_full(self, tmp_path, inputs):
        schemas, gold = inputs
        _, suites = _distill(tmp_path, schemas, gold)
        pred = tmp_path / "pred.txt"
        pred.write_text("SELECT name FROM people WHERE age >= 30\n"
                        "SELECT T2.state_name FROM people AS T1 JOIN state AS T2 ON T1.born_state = T2.state_id\n")
        accs = []
        for extra in ([], ["--sped-up"]):
            out = tmp_path / f"r{len(extra)}.json"
            main(["evaluate", "--gold", str(gold), "--pred", str(pred), "--suites", str(suites),
                  "--out", str(out), *extra])
            accs.append(json.loads(out.read_text())["accuracy"])
        assert accs[1] >= accs[0]

    def test_line_mismatch(self, tmp_path, inputs):
        schemas, gold = inputs
        _, suites = _distill(tmp_path, schemas, gold)
        pred = tmp_path / "pred.txt"
        pred.write_text("SELECT 1\n")
        assert main(["evaluate", "--gold", str(gold), "--pred", str(pred), "--suites", str(suites)]) == EXIT_DATA


class TestDebugCommands:
    """sqlsuite neighbors / sample-db"""

    def test_neighbors(self, tmp_path, capsys):
        schemas = tmp_path / "s.json"
        schemas.write_text(json.dumps([{"db_id": "d", "table_names": ["t"], "columns": [[0, "a", "int"]],
                                        "primary_keys": [], "foreign_keys": []}]))
        assert main(["neighbors", "--schemas", str(schemas), "--db-id", "d",
                     "--query", "SELECT a FROM t WHERE a > 0"]) == 0
        lines = capsys.readouterr().out.splitlines()
        tags = [line.split("\t")[0] for line in lines]
        assert "comparison_op#2:replace" in tags and "int_const#4:plus_one" in tags
        assert "droppable_span#0:drop\tSELECT a FROM t" in lines

    def test_sample_db_twice(self, tmp_path, inputs):
        schemas, _ = inputs
        paths = [tmp_path / "a.sqlite3", tmp_path / "b.sqlite3"]
        for p in paths:
            assert main(["sample-db", "--schemas", str(schemas), "--db-id", "people_state", "--out", str(p),
                         "--seed", "3", "--query", "SELECT name FROM people WHERE age > 30"]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
        schema = load_schemas(schemas)["people_state"]
        assert check_integrity(DatabaseInstance.from_file(schema, paths[0])) == []

    def test_module_entry_point(self):
        result = subprocess.run([sys.executable, "-m", "sqlsuite", "--version"], capture_output=True, text=True)
        assert result.returncode == 0 and "sqlsuite" in result.stdout
