"""Command-line entry point: ``sqlsuite distill|evaluate|neighbors|sample-db|coverage``."""

from __future__ import annotations

import argparse
import json
import logging
import sqlite3
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .distiller import (DEFAULT_AUX_BUDGET, DEFAULT_BUDGET, DistillError, TestSuite, distill, evaluate_coverage,
                        prepare_gold)
from .evaluator import DEFAULT_PLUG_CAP, CorpusError, EvalOptions, evaluate_corpus, read_gold_file
from .execution import DEFAULT_TIMEOUT_MS, ExecError
from .mutation import NeighborError, SqlParseError, UnknownReference, extract_constants, parse_sql
from .sampler import DEFAULT_P_GOLD, DEFAULT_ROW_RANGE, SamplingError, sample_instance
from .schema import SchemaError, load_schemas

logger = logging.getLogger("sqlsuite")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

DATA_ERRORS = (SchemaError, CorpusError, DistillError, SqlParseError, UnknownReference, NeighborError, ExecError,
               SamplingError, OSError, json.JSONDecodeError, sqlite3.Error)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_timeout(p):
    p.add_argument("--timeout-ms", type=float, default=DEFAULT_TIMEOUT_MS,
                   help="per-query execution budget in milliseconds (default %(default)s)")


def _add_order(p):
    p.add_argument("--strict-column-order", action="store_true",
                   help="compare result columns positionally instead of up to permutation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sqlsuite", description="Distill database test suites and judge predicted SQL with them.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("distill", help="build one test suite per schema")
    p.add_argument("--schemas", required=True, help="schema JSON file")
    p.add_argument("--gold", required=True, help="gold file, one 'SQL<TAB>db_id' per line")
    p.add_argument("--out", required=True, help="output directory; one sub-directory per db_id")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--aux-budget", type=int, default=DEFAULT_AUX_BUDGET,
                   help="extra samples spent on giving every gold query a non-empty result")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--row-min", type=int, default=DEFAULT_ROW_RANGE[0])
    p.add_argument("--row-max", type=int, default=DEFAULT_ROW_RANGE[1])
    p.add_argument("--p-gold", type=float, default=DEFAULT_P_GOLD)
    p.add_argument("--nulls", action="store_true", help="allow NULLs in nullable columns")
    p.add_argument("--max-members", type=int, default=None)
    p.add_argument("--no-prune", action="store_true", help="keep redundant members")
    p.add_argument("--jobs", type=int, default=1, help="schemas distilled in parallel")
    _add_timeout(p)
    _add_order(p)

    p = sub.add_parser("evaluate", help="judge predictions against gold queries")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True, help="prediction file, one SQL per line aligned with --gold")
    p.add_argument("--suites", required=True, help="directory written by 'distill'")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--sped-up", action="store_true", help="use only the first member of each suite")
    p.add_argument("--no-plug", action="store_true", help="disable gold-constant plugging")
    p.add_argument("--plug-cap", type=int, default=DEFAULT_PLUG_CAP)
    p.add_argument("--jobs", type=int, default=1)
    _add_timeout(p)
    _add_order(p)

    p = sub.add_parser("neighbors", help="list the neighbor queries of one gold query")
    p.add_argument("--schemas", required=True)
    p.add_argument("--db-id", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_timeout(p)

    p = sub.add_parser("sample-db", help="write one sampled database")
    p.add_argument("--schemas", required=True)
    p.add_argument("--db-id", required=True)
    p.add_argument("--out", required=True, help="sqlite file to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t", type=int, default=1, help="position in the sample stream")
    p.add_argument("--query", action="append", default=[], help="gold query whose constants seed the values")
    p.add_argument("--row-min", type=int, default=DEFAULT_ROW_RANGE[0])
    p.add_argument("--row-max", type=int, default=DEFAULT_ROW_RANGE[1])
    p.add_argument("--p-gold", type=float, default=DEFAULT_P_GOLD)
    p.add_argument("--nulls", action="store_true")

    p = sub.add_parser("coverage", help="summarize a distilled suite")
    p.add_argument("suite", help="a per-schema suite directory")
    return parser


def _schema_for(schemas, db_id):
    if db_id not in schemas:
        raise CorpusError(f"no schema for db_id {db_id!r}")
    return schemas[db_id]


def _distill_one(schema, items, args_dict):
    a = args_dict
    golds = []
    for qid, sql in items:
        try:
            golds.append(prepare_gold(qid, sql, schema, a["seed"], a["timeout_ms"]))
        except (SqlParseError, UnknownReference, NeighborError) as exc:
            raise CorpusError(f"gold line {int(qid) + 1} ({schema.db_id}): {exc}") from exc
    suite, trace = distill(golds, schema, budget=a["budget"], base_seed=a["seed"], timeout_ms=a["timeout_ms"],
                           column_order_insensitive=not a["strict_column_order"],
                           row_range=(a["row_min"], a["row_max"]), p_gold=a["p_gold"], nulls=a["nulls"],
                           aux_budget=a["aux_budget"], max_members=a["max_members"], prune=not a["no_prune"])
    suite.save(Path(a["out"]) / schema.db_id, trace)
    return schema.db_id, len(suite.members), evaluate_coverage(suite)


def cmd_distill(args) -> int:
    if args.budget < 0:
        raise UsageError("--budget must be non-negative")
    if args.budget == 0:
        logger.warning("budget is 0: suites will be empty and every prediction is judged correct")
    if not 0 <= args.row_min <= args.row_max:
        raise UsageError("need 0 <= --row-min <= --row-max")
    if not 0.0 <= args.p_gold <= 1.0:
        raise UsageError("--p-gold must lie in [0, 1]")
    schemas = load_schemas(args.schemas)
    groups: dict[str, list] = defaultdict(list)
    for i, line in enumerate(read_gold_file(args.gold)):
        _schema_for(schemas, line.db_id)
        groups[line.db_id].append((str(i), line.sql))
    args_dict = vars(args).copy()
    args_dict.pop("func", None)
    order = sorted(groups)
    if args.jobs > 1 and len(order) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_distill_one, schemas[d], groups[d], args_dict) for d in order]
            results = [f.result() for f in futures]
    else:
        results = [_distill_one(schemas[d], groups[d], args_dict) for d in order]
    for db_id, size, cov in results:
        print(f"{db_id}\tmembers={size}\tundistinguished={cov.undistinguished_fraction:.4f}")
        for qid, frac in cov.per_query.items():
            print(f"  line {int(qid) + 1}\tundistinguished={frac:.4f}")
        if cov.nonempty_failures:
            logger.warning("%s: no member gives a non-empty result for lines %s", db_id,
                           ", ".join(str(int(q) + 1) for q in cov.nonempty_failures))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    options = EvalOptions(timeout_ms=args.timeout_ms, sped_up=args.sped_up, plug=not args.no_plug,
                          plug_cap=args.plug_cap, column_order_insensitive=not args.strict_column_order,
                          jobs=args.jobs)
    report = evaluate_corpus(args.gold, args.pred, args.suites, options)
    if args.out:
        report.write(args.out)
    for name, acc in report.buckets.items():
        print(f"{name}: {acc:.3f}")
    print(f"accuracy: {report.accuracy:.3f}")
    return EXIT_OK


def cmd_neighbors(args) -> int:
    schema = _schema_for(load_schemas(args.schemas), args.db_id)
    gold = prepare_gold("cli", args.query, schema, args.seed, args.timeout_ms)
    for n in gold.neighbors.neighbors:
        print(f"{n.mutation.tag}\t{n.text}")
    return EXIT_OK


def cmd_sample_db(args) -> int:
    schema = _schema_for(load_schemas(args.schemas), args.db_id)
    from .sampler import GoldConstants
    constants = GoldConstants()
    for q in args.query:
        constants = constants.merge(extract_constants(parse_sql(q, schema)))
    out = Path(args.out)
    if out.exists():
        raise UsageError(f"{out} already exists")
    instance = sample_instance(schema, constants, args.seed, args.t, row_range=(args.row_min, args.row_max),
                               p_gold=args.p_gold, nulls=args.nulls)
    instance.write(out)
    print(out)
    return EXIT_OK


def cmd_coverage(args) -> int:
    suite = TestSuite.load(args.suite)
    cov = evaluate_coverage(suite)
    print(f"members: {cov.suite_size}")
    print(f"undistinguished: {cov.undistinguished_fraction:.4f}")
    print(f"first member alone: {cov.first_member_fraction:.4f}")
    for qid, frac in cov.per_query.items():
        print(f"query {qid}: {frac:.4f}")
    if cov.nonempty_failures:
        print(f"no non-empty member: {', '.join(cov.nonempty_failures)}")
    return EXIT_OK


COMMANDS = {"distill": cmd_distill, "evaluate": cmd_evaluate, "neighbors": cmd_neighbors,
            "sample-db": cmd_sample_db, "coverage": cmd_coverage}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sqlsuite: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"sqlsuite: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.debug("internal error", exc_info=True)
        print(f"sqlsuite: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
