"""Judging predicted queries against gold queries on a distilled test suite."""

from __future__ import annotations

import itertools
import json
import logging
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .distiller import DistillError, TestSuite
from .execution import DEFAULT_TIMEOUT_MS, CompareFlags, ExecError, denotations_equal, execute
from .mutation import (CONSTANT_KINDS, FLOAT_CONST, INT_CONST, STRING_CONST, DIALECT, compare_flags_for,
                       extract_constants, make_literal, navigate, try_parse)
from .sampler import GoldConstants

logger = logging.getLogger(__name__)

DEFAULT_PLUG_CAP = 10_000

EQUAL = "equal"
EQUAL_BOTTOM = "equal_bottom"  # both timed out: vacuous agreement
DIFFERENT = "different"
EXEC_ERROR = "exec_error"


class CorpusError(ValueError):
    pass


@dataclass
class Verdict:
    qid: object
    correct: bool
    failing_member: int | None = None
    plugged_variant: str | None = None
    diagnostics: list = field(default_factory=list)  # [(member t, outcome)] for the reported candidate
    candidates_tried: int = 0

    def to_json(self) -> dict:
        return {"id": self.qid, "correct": self.correct, "failing_member": self.failing_member,
                "plugged_variant": self.plugged_variant}


def plug_constants(pred, gold_constants: GoldConstants, cap: int = DEFAULT_PLUG_CAP) -> list[str]:
    """The prediction followed by every way of writing gold constants into its constant sites.

    Each constant site draws from the gold constants of its own type; a site
    with no same-typed gold constant keeps its value.
    """
    pools = {INT_CONST: gold_constants.ints, FLOAT_CONST: gold_constants.floats,
             STRING_CONST: gold_constants.strings}
    original = pred.original_text.strip()
    sites = [s for s in pred.sites_of(*CONSTANT_KINDS) if pools[s.kind]]
    out = [original]
    if not sites:
        return out
    seen = {original, pred.sql()}
    choices = [list(dict.fromkeys(pools[s.kind])) for s in sites]
    for combo in itertools.product(*choices):
        if len(out) >= cap:
            logger.warning("constant plugging truncated at %d candidates", cap)
            break
        root = pred.root.copy()
        targets = [navigate(root, s.location) for s in sites]
        for node, value in zip(targets, combo):
            node.replace(make_literal(value))
        text = root.sql(dialect=DIALECT)
        if text not in seen:
            seen.add(text)
            out.append(text)
    return out


def suite_verdict(gold: str, pred: str, suite, gold_constants: GoldConstants | None = None,
                  timeout_ms: float = DEFAULT_TIMEOUT_MS, flags: CompareFlags | None = None,
                  column_order_insensitive: bool = True, sped_up: bool = False,
                  plug_cap: int = DEFAULT_PLUG_CAP, qid=None) -> Verdict:
    """Correct iff some candidate matches the gold on every suite member.

    ``suite`` is a :class:`TestSuite` or a list of database instances.
    Candidates are the prediction itself and, when ``gold_constants`` is
    given, its constant-plugged variants. Engine errors on the gold raise
    :class:`ExecError`.
    """
    if isinstance(suite, TestSuite):
        instances = suite.instances(sped_up=sped_up)
    else:
        instances = list(suite)[:1] if sped_up else list(suite)
    if flags is None:
        flags = compare_flags_for(gold, column_order_insensitive)
    if pred is None or not pred.strip():
        return Verdict(qid, False, instances[0].instance_id if instances else None, None,
                       [(None, EXEC_ERROR)], 0)

    candidates = [pred.strip()]
    if gold_constants:
        parsed = try_parse(pred)
        if parsed is not None:
            candidates = plug_constants(parsed, gold_constants, plug_cap)

    conns = [inst.connect() for inst in instances]
    try:
        gold_dens = []
        for inst, conn in zip(instances, conns):
            try:
                gold_dens.append(execute(gold, conn, timeout_ms))
            except ExecError as exc:
                raise ExecError(f"gold fails on member {inst.instance_id}: {exc}") from exc

        best = None  # (members passed, verdict)
        for idx, cand in enumerate(candidates):
            diag = []
            failed_at = None
            for inst, conn, gden in zip(instances, conns, gold_dens):
                try:
                    den = execute(cand, conn, timeout_ms)
                except ExecError:
                    diag.append((inst.instance_id, EXEC_ERROR))
                    failed_at = inst.instance_id
                    break
                if denotations_equal(gden, den, flags):
                    diag.append((inst.instance_id, EQUAL_BOTTOM if den.is_bottom else EQUAL))
                else:
                    diag.append((inst.instance_id, DIFFERENT))
                    failed_at = inst.instance_id
                    break
            if failed_at is None:
                return Verdict(qid, True, None, cand if idx > 0 else None, diag, idx + 1)
            passed = len(diag) - 1
            if best is None or passed > best[0]:
                best = (passed, Verdict(qid, False, failed_at, None, diag))
        verdict = best[1]
        verdict.candidates_tried = len(candidates)
        return verdict
    finally:
        for conn in conns:
            conn.close()


# --------------------------------------------------------------------------- corpus level

@dataclass
class GoldLine:
    sql: str
    db_id: str
    difficulty: str | None = None


def read_gold_file(path) -> list[GoldLine]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for i, line in enumerate(lines):
        parts = line.rstrip("\r").split("\t")
        if len(parts) < 2 or not parts[0].strip() or not parts[1].strip():
            raise CorpusError(f"{path}:{i + 1}: expected 'SQL<TAB>db_id[<TAB>difficulty]'")
        out.append(GoldLine(parts[0].strip(), parts[1].strip(), parts[2].strip() if len(parts) > 2 else None))
    return out


def read_pred_file(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line.rstrip("\r").strip() for line in lines]


@dataclass
class EvalOptions:
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    sped_up: bool = False
    plug: bool = True
    plug_cap: int = DEFAULT_PLUG_CAP
    column_order_insensitive: bool = True
    jobs: int = 1


@dataclass
class MetricComparison:
    both_correct: list = field(default_factory=list)
    both_wrong: list = field(default_factory=list)
    baseline_false_negatives: list = field(default_factory=list)  # baseline wrong, suite correct
    baseline_only_correct: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return (len(self.both_correct) + len(self.both_wrong) + len(self.baseline_false_negatives)
                + len(self.baseline_only_correct))

    @property
    def agreement_rate(self) -> float:
        return (len(self.both_correct) + len(self.both_wrong)) / self.n if self.n else 1.0

    def to_json(self) -> dict:
        return {"agreement_rate": self.agreement_rate,
                "baseline_false_negatives": self.baseline_false_negatives,
                "baseline_only_correct": self.baseline_only_correct}


@dataclass
class Report:
    examples: list[Verdict]
    buckets: dict[str, float] = field(default_factory=dict)
    baseline: MetricComparison | None = None
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.examples)

    @property
    def accuracy(self) -> float:
        return sum(v.correct for v in self.examples) / self.n if self.n else 0.0

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "buckets": self.buckets,
            "examples": [v.to_json() for v in self.examples],
            "baseline": self.baseline.to_json() if self.baseline else None,
            "config": self.config,
        }

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


_QUOTED = re.compile(r"('(?:[^']|'')*'|\"(?:[^\"]|\"\")*\"|`[^`]*`)")


def normalize_sql(sql: str) -> str:
    """Whitespace-, case- and parenthesis-insensitive form for exact-match comparison."""
    text = sql.strip().rstrip(";").strip()
    while text.startswith("(") and text.endswith(")") and _balanced(text[1:-1]):
        text = text[1:-1].strip()
    parts = _QUOTED.split(text)
    out = []
    for i, part in enumerate(parts):
        if i % 2:
            out.append(part)
            continue
        part = re.sub(r"\s+", " ", part.lower())
        part = re.sub(r"\s*([(),])\s*", r"\1", part)
        out.append(part)
    return "".join(out).strip()


def _balanced(s: str) -> bool:
    depth = 0
    for ch in s:
        depth += ch == "("
        depth -= ch == ")"
        if depth < 0:
            return False
    return depth == 0


def exact_match(gold: str, pred: str) -> bool:
    return bool(pred) and normalize_sql(gold) == normalize_sql(pred)


def compare_with_baseline(report: Report, gold_file, pred_file) -> MetricComparison:
    """Cross-tabulate suite verdicts against normalized exact string match."""
    golds, preds = read_gold_file(gold_file), read_pred_file(pred_file)
    if len(golds) != len(preds) or len(golds) != report.n:
        raise CorpusError("report, gold file and prediction file are not aligned")
    out = MetricComparison()
    for verdict, g, p in zip(report.examples, golds, preds):
        em = exact_match(g.sql, p)
        if em and verdict.correct:
            out.both_correct.append(verdict.qid)
        elif not em and not verdict.correct:
            out.both_wrong.append(verdict.qid)
        elif verdict.correct:
            out.baseline_false_negatives.append(verdict.qid)
        else:
            out.baseline_only_correct.append(verdict.qid)
    return out


def _judge_group(suite_dir: str, items: list, options: EvalOptions) -> list[Verdict]:
    suite = TestSuite.load(suite_dir)
    verdicts = []
    for idx, gold, pred in items:
        constants = None
        if options.plug:
            gold_ast = try_parse(gold)
            if gold_ast is None:
                raise CorpusError(f"line {idx + 1}: gold query does not parse: {gold}")
            constants = extract_constants(gold_ast)
        verdicts.append(suite_verdict(gold, pred, suite, constants, options.timeout_ms,
                                      column_order_insensitive=options.column_order_insensitive,
                                      sped_up=options.sped_up, plug_cap=options.plug_cap, qid=idx))
    return verdicts


def evaluate_corpus(gold_file, pred_file, suites_root, options: EvalOptions | None = None) -> Report:
    options = options or EvalOptions()
    golds, preds = read_gold_file(gold_file), read_pred_file(pred_file)
    if len(golds) != len(preds):
        raise CorpusError(f"{len(golds)} gold lines but {len(preds)} predictions")
    groups: dict[str, list] = defaultdict(list)
    for i, (g, p) in enumerate(zip(golds, preds)):
        groups[g.db_id].append((i, g.sql, p))
    suites_root = Path(suites_root)
    for db_id in groups:
        if not (suites_root / db_id / "suite.json").exists():
            raise CorpusError(f"no test suite for db_id {db_id!r} under {suites_root}")

    verdicts: dict[int, Verdict] = {}
    order = sorted(groups)
    if options.jobs > 1 and len(order) > 1:
        with ProcessPoolExecutor(max_workers=options.jobs) as pool:
            futures = [pool.submit(_judge_group, str(suites_root / d), groups[d], options) for d in order]
            results = [f.result() for f in futures]
    else:
        results = [_judge_group(str(suites_root / d), groups[d], options) for d in order]
    for batch in results:
        for v in batch:
            verdicts[v.qid] = v

    examples = [verdicts[i] for i in range(len(golds))]
    buckets: dict[str, list[bool]] = defaultdict(list)
    for g, v in zip(golds, examples):
        if g.difficulty:
            buckets[g.difficulty].append(v.correct)
    config = asdict(options)
    config.pop("jobs")
    report = Report(examples, {k: sum(v) / len(v) for k, v in sorted(buckets.items())}, None, config)
    report.baseline = compare_with_baseline(report, gold_file, pred_file)
    return report


__all__ = [
    "CorpusError", "DistillError", "EvalOptions", "MetricComparison", "Report", "Verdict",
    "compare_with_baseline", "evaluate_corpus", "exact_match", "normalize_sql", "plug_constants",
    "read_gold_file", "read_pred_file", "suite_verdict",
]
