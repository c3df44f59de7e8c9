import random
from importlib import resources
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from sqlsuite.distiller import TestSuite, distill, prepare_gold
from sqlsuite.evaluator import read_gold_file
from sqlsuite.schema import load_schemas, make_schema

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CORPUS = resources.files("sqlsuite") / "corpus"
CORPUS_SCHEMAS = Path(str(CORPUS / "schemas.json"))
CORPUS_GOLD = Path(str(CORPUS / "gold.tsv"))


def people_state():
    """Two tables where people.born_state references state.state_id."""
    return make_schema(
        "people_state",
        {"state": [("state_id", "integer"), ("state_name", "text")],
         "people": [("person_id", "integer"), ("name", "text"), ("age", "integer"), ("born_state", "integer")]},
        foreign_keys=[("people.born_state", "state.state_id")],
        primary_keys=["state.state_id", "people.person_id"],
    )


def one_table(*columns):
    return make_schema("t_only", {"t": [(c, "integer") for c in columns]})


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def ps_schema():
    return people_state()


@pytest.fixture
def small_suite(ps_schema):
    golds = [prepare_gold("0", "SELECT name FROM people WHERE age > 30", ps_schema),
             prepare_gold("1", "SELECT T2.state_name FROM people AS T1 JOIN state AS T2 "
                               "ON T1.born_state = T2.state_id WHERE T1.name = 'Alice'", ps_schema)]
    suite, trace = distill(golds, ps_schema, budget=60, base_seed=3)
    return suite, trace


@pytest.fixture(scope="session")
def corpus_schemas():
    return load_schemas(CORPUS_SCHEMAS)


@pytest.fixture(scope="session")
def corpus_suites(tmp_path_factory):
    """The bundled corpus distilled once at the default budget, keyed by db_id."""
    from sqlsuite.cli import main

    out = tmp_path_factory.mktemp("corpus_suites")
    assert main(["distill", "--schemas", str(CORPUS_SCHEMAS), "--gold", str(CORPUS_GOLD),
                 "--out", str(out), "--budget", "1000"]) == 0
    db_ids = {g.db_id for g in read_gold_file(CORPUS_GOLD)}
    return out, {d: TestSuite.load(out / d) for d in db_ids}


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
