"""Acceptance gate: eleven criteria, one test and one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v` to get the per-criterion lines.
Each test recomputes its expectation from scratch (brute force, exact
arithmetic, or construction-time ground truth) rather than trusting the
code under test.
"""
from __future__ import annotations

import csv
import hashlib
import json
import random
import time
from fractions import Fraction
from pathlib import Path

import pytest

from critforge.answers import AnswerExpr, SolutionLabel, answers_equivalent
from critforge.domain import (
    NO_ERROR,
    MalformedCritique,
    parse_critique,
    render_critique,
)
from critforge.engines import CritiqueMode, CritiqueRecord, run_contrastive_critic
from critforge.harness import EvalRecord, Protocol, ScoredResult, compute_f1, score_error_identification
from critforge.io_utils import read_jsonl
from critforge.pooling import (
    CritiquePair,
    InsufficientItems,
    PairKind,
    ProblemPool,
    filter_valid_problems,
    make_pairs,
)
from critforge.validation import build_training_instance, export_sft, self_validate
from critforge.config import load_config
from critforge.pipeline import run_pipeline

from conftest import (
    make_critique,
    make_problem,
    make_solution,
    random_valid_critique,
    script_gateway,
)
from golden_fixture import EXPECTED, write_fixture
from test_answers import build_equivalence_suite
from test_domain import _mutated_transcript


def _random_pools(rng: random.Random, n: int) -> list[ProblemPool]:
    pools = []
    for i in range(n):
        pid = f"p{i:04d}"
        n_cor, n_inc = rng.randint(0, 4), rng.randint(0, 4)
        correct = tuple(
            make_solution(f"{pid}-c{c}", pid, answer="21", label=SolutionLabel.CORRECT)
            for c in range(n_cor))
        incorrect = tuple(
            make_solution(f"{pid}-i{c}", pid, answer="20", label=SolutionLabel.INCORRECT)
            for c in range(n_inc))
        pools.append(ProblemPool(problem_id=pid, correct=correct, incorrect=incorrect))
    return pools


def test_criterion_01_valid_problem_filter_matches_brute_force():
    rng = random.Random(501)
    pools = _random_pools(rng, 500)
    start = time.monotonic()
    kept = filter_valid_problems(pools)
    elapsed = time.monotonic() - start
    expected_ids = {p.problem_id for p in pools
                    if len(p.correct) > 0 and len(p.incorrect) > 0}
    assert {p.problem_id for p in kept} == expected_ids
    assert len(kept) == len(expected_ids)
    assert elapsed < 1.0


def test_criterion_02_pair_counts_follow_the_pool_sizes():
    rng = random.Random(502)
    pools = filter_valid_problems(_random_pools(rng, 500))
    assert pools  # the brute-force set is nonempty at these sizes
    for pool in pools:
        pairs = make_pairs(pool, seed=77)
        n_ci = sum(1 for p in pairs if p.kind is PairKind.CORRECT_INCORRECT)
        n_cc = sum(1 for p in pairs if p.kind is PairKind.CORRECT_CORRECT)
        assert n_ci == len(pool.incorrect)
        assert n_cc == (len(pool.correct) if len(pool.correct) >= 2 else 0)


def test_criterion_03_parser_total_on_fuzz_and_exact_on_round_trips():
    rng = random.Random(503)
    crashes = []
    for i in range(10_000):
        roll = rng.random()
        if roll < 0.3:
            text = "".join(
                rng.choice("ab :=[]{}#\n\tStepConclusionFinal0123456789ду∞")
                for _ in range(rng.randint(0, 400)))
        elif roll < 0.8:
            text = _mutated_transcript(rng)
        else:
            text = render_critique(random_valid_critique(rng))
        try:
            parse_critique(text, target_step_count=rng.randint(1, 8))
        except MalformedCritique:
            pass
        except Exception as exc:
            crashes.append((i, type(exc).__name__))
    assert crashes == []

    for _ in range(500):
        critique = random_valid_critique(rng)
        k = (len(critique.steps) if critique.conclusion.solution_correct
             else len(critique.steps) + rng.randint(0, 3))
        assert parse_critique(render_critique(critique), target_step_count=k) == critique


def test_criterion_04_accepted_set_equals_the_scripted_verdicts(tmp_path):
    rng = random.Random(504)
    problem = make_problem()
    records, should_accept = [], set()
    rules = []
    for i in range(40):
        token = f"TOK{i:02d}X"
        malformed = i % 13 == 0
        record = CritiqueRecord(
            mode=CritiqueMode.DIRECT, problem_id=problem.id,
            target_solution_id=f"s{i}", critic_model_id="critic",
            transcript="t", template_digest="d",
            critique=None if malformed else make_critique(
                k=2, j=rng.choice([NO_ERROR, 1, 2]),
                correction_steps=(f"Recompute using {token}.",),
                correction_answer="21"),
            malformed_reason="no sections" if malformed else None,
        )
        records.append(record)
        if malformed:
            continue
        if rng.random() < 0.4:  # scripted to a rejecting conclusion
            rules.append({"purpose": "direct_conclusion", "contains": token,
                          "response": "Conclusion: incorrect, first_error_step=1"})
        else:
            should_accept.add(record.target_solution_id)
    gateway = script_gateway(rules, tmp_path)  # default rule concludes correct

    accepted = {
        r.target_solution_id
        for r, triplet in ((r, self_validate(gateway, "critic", problem, r))
                           for r in records)
        if triplet.accepted
    }
    assert accepted == should_accept


def test_criterion_05_exported_instances_never_leak_the_reference(tmp_path):
    problems, pairs = [], []
    for i in range(100):
        pid = f"p{i:03d}"
        problem = make_problem(pid, statement=f"Compute item {i}.", answer="21")
        problems.append(problem)
        reference = make_solution(
            f"{pid}-ref", pid, answer="21", label=SolutionLabel.CORRECT,
            steps=(f"Use REFSTEP{i}A to set up.", f"REFSTEP{i}B finishes it."))
        if i % 2 == 0:
            target = make_solution(
                f"{pid}-t", pid, answer="21", label=SolutionLabel.CORRECT,
                steps=(f"Target {i} sets up.", f"Target {i} concludes 21."))
            kind = PairKind.CORRECT_CORRECT
        else:
            target = make_solution(
                f"{pid}-t", pid, answer="99", label=SolutionLabel.INCORRECT,
                steps=(f"Target {i} sets up.", f"Target {i} BADMOVE gives 99."))
            kind = PairKind.CORRECT_INCORRECT
        pairs.append(CritiquePair(problem_id=pid, target=target,
                                  reference=reference, kind=kind))

    capture = r"(?P<refline>REFSTEP\d+A)"
    flagged = ("## Reference Analysis\nNotes on <<refline>> and its pitfalls.\n\n"
               "## Step-wise Critique\nStep 1 [ok]: Setup holds.\n"
               "Step 2 [error: calculation]: The slip changes the value.\n\n"
               "## Conclusion\nConclusion: incorrect, first_error_step=2\n\n"
               "## Correction\nStep 1: Redo the computation.\nFinal answer: 21")
    clean = ("## Reference Analysis\nNotes on <<refline>> and its pitfalls.\n\n"
             "## Step-wise Critique\nStep 1 [ok]: Setup holds.\n"
             "Step 2 [ok]: The conclusion follows.\n\n"
             "## Conclusion\nConclusion: correct\n\n"
             "## Correction\nStep 1: Keep the computation.\nFinal answer: 21")
    gateway = script_gateway([
        {"purpose": "contrastive_critic", "contains": "BADMOVE",
         "pattern": capture, "response": flagged},
        {"purpose": "contrastive_critic", "pattern": capture, "response": clean},
    ], tmp_path)

    instances = []
    for problem, pair in zip(problems, pairs):
        record = run_contrastive_critic(gateway, "critic", problem, pair)
        assert record.parsed and f"REFSTEP" in record.critique.reference_analysis
        instances.append(build_training_instance(problem, record))

    out = tmp_path / "sft.jsonl"
    export_sft(instances, out, ratio=(1.0, 1.0), total=100, seed=9)
    rows = list(read_jsonl(out))
    assert len(rows) == 100
    text = out.read_text(encoding="utf-8")
    assert "REFSTEP" not in text      # reference solution step text
    assert "Notes on" not in text     # stage-1 analysis text
    assert "## Reference Analysis" not in text


def test_criterion_06_f1_matches_exact_harmonic_mean_within_1e12():
    rng = random.Random(506)
    for _ in range(200):
        scored = []
        n_inc, n_cor = rng.randint(0, 30), rng.randint(0, 30)
        hits_inc = hits_cor = 0
        for i in range(n_inc):
            hit = rng.random() < 0.6
            hits_inc += hit
            scored.append(ScoredResult(f"i{i}", "s", "src", Protocol.EI, hit=hit,
                                       gt_solution_correct=False))
        for i in range(n_cor):
            hit = rng.random() < 0.6
            hits_cor += hit
            scored.append(ScoredResult(f"c{i}", "s", "src", Protocol.EI, hit=hit,
                                       gt_solution_correct=True))
        rng.shuffle(scored)

        if n_inc == 0 or n_cor == 0 or hits_inc == 0 or hits_cor == 0:
            expected = 0.0
        else:
            a = Fraction(hits_inc, n_inc)
            b = Fraction(hits_cor, n_cor)
            expected = float(2 * a * b / (a + b))
        assert abs(compute_f1(scored).f1 - expected) <= 1e-12


def test_criterion_07_tolerance_window_and_correction_gate():
    problem = make_problem("pe", statement="Compute 3 * 7.", answer="21")
    solution = make_solution("se", "pe", steps=tuple(f"Step text {i}." for i in range(7)),
                             answer="99", label=SolutionLabel.INCORRECT)
    record = EvalRecord(id="e1", problem=problem, solution=solution,
                        scenario="buggy", gt_first_error_step=4)

    def crit(j: int | None, answer: str) -> CritiqueRecord:
        return CritiqueRecord(
            mode=CritiqueMode.DIRECT, problem_id="pe", target_solution_id="se",
            critic_model_id="critic", transcript="t", template_digest="d",
            critique=make_critique(k=7, j=NO_ERROR if j is None else j,
                                   correction_answer=answer),
        )

    for j in (3, 4, 5):  # inside the window
        assert score_error_identification(record, crit(j, "21")).hit is True
        assert score_error_identification(record, crit(j, "99")).hit is False
    for j in (1, 2, 6, 7):  # outside, correct answer notwithstanding
        assert score_error_identification(record, crit(j, "21")).hit is False
    assert score_error_identification(record, crit(None, "21")).hit is False

    clean = EvalRecord(id="e2", problem=problem,
                       solution=make_solution("sc", "pe", answer="21",
                                              label=SolutionLabel.CORRECT),
                       scenario="clean", gt_first_error_step=NO_ERROR)
    assert score_error_identification(clean, crit(None, "21")).hit is True
    assert score_error_identification(clean, crit(1, "21")).hit is False


def _instances(n_good: int, n_bad: int) -> list:
    problem = make_problem()
    out = []
    for i in range(n_good + n_bad):
        good = i < n_good
        record = CritiqueRecord(
            mode=CritiqueMode.DIRECT, problem_id=problem.id,
            target_solution_id=f"s{i:03d}", critic_model_id="critic",
            transcript="t", template_digest="d",
            critique=make_critique(k=2, j=NO_ERROR if good else 2),
            target_steps=("Multiply 3 by 7.", f"Attempt {i} concludes."),
            target_final_answer="21" if good else "20",
            target_label=(SolutionLabel.CORRECT if good
                          else SolutionLabel.INCORRECT).value,
        )
        out.append(build_training_instance(problem, record))
    return out


def test_criterion_08_export_ratios_are_exact_or_reported_infeasible(tmp_path):
    out = tmp_path / "sft.jsonl"

    report = export_sft(_instances(30, 50), out, ratio=(1.0, 1.0), total=60, seed=8)
    rows = list(read_jsonl(out))
    assert report.written == 60
    assert sum(1 for r in rows if r["meta"]["conclusion_correct"]) == 30
    assert sum(1 for r in rows if not r["meta"]["conclusion_correct"]) == 30

    report = export_sft(_instances(30, 50), out, ratio=(0.25, 0.75), total=40, seed=8)
    rows = list(read_jsonl(out))
    assert report.written == 40
    assert sum(1 for r in rows if r["meta"]["conclusion_correct"]) == 10
    assert sum(1 for r in rows if not r["meta"]["conclusion_correct"]) == 30

    with pytest.raises(InsufficientItems) as exc_info:
        export_sft(_instances(30, 50), out, ratio=(1.0, 1.0), total=80, seed=8)
    assert exc_info.value.max_total == 60
    assert exc_info.value.available_good == 30


def _tree_digests(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file() and path.name != ".lock":
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def golden_determinism(tmp_path_factory):
    """Three full runs over the same corpus: repeat, then a different thread count."""
    base = tmp_path_factory.mktemp("determinism")
    timings = []

    def run(name: str, concurrency: int, reuse: Path | None = None) -> tuple[Path, dict]:
        root = reuse if reuse is not None else base / name
        config_path = write_fixture(root, concurrency=concurrency)
        config = load_config(config_path)
        start = time.monotonic()
        run_pipeline(config)
        timings.append(time.monotonic() - start)
        return root, _tree_digests(config.round_dir())

    root_a, first = run("a", concurrency=2)
    _, repeated = run("a", concurrency=2, reuse=root_a)
    _, other_threads = run("b", concurrency=1)
    return root_a / "out" / "round-1", first, repeated, other_threads, timings


def test_criterion_09_golden_run_is_byte_identical_and_fast(golden_determinism):
    _, first, repeated, other_threads, timings = golden_determinism
    assert first  # the run left artifacts
    assert repeated == first
    assert other_threads == first
    assert max(timings) < 30.0


def test_criterion_10_histograms_normalize_and_breakdowns_cover_all_axes(golden_determinism):
    report_dir = golden_determinism[0] / "report"
    with open(report_dir / "error_positions.csv", newline="") as fh:
        fractions = [float(row["fraction"]) for row in csv.DictReader(fh)]
    assert fractions and abs(sum(fractions) - 1.0) <= 1e-9

    summary = json.loads((report_dir / "summary.json").read_text())
    for axis in ("by_source", "by_complexity", "by_model"):
        rows = summary["validation_rates"][axis]
        assert rows, axis
        assert all({"key", "total", "accepted", "rate"} <= set(r) for r in rows)
    assert {r["key"] for r in summary["validation_rates"]["by_source"]} == {"alpha", "beta"}
    assert {r["key"] for r in summary["validation_rates"]["by_model"]} == {"gen-a", "gen-b"}


def test_criterion_11_answer_equivalence_agrees_with_the_rational_oracle():
    suite = build_equivalence_suite(200)
    assert len(suite) == 200
    disagreements = [
        (a, b, expected)
        for a, b, expected in suite
        if answers_equivalent(AnswerExpr.from_raw(a), AnswerExpr.from_raw(b)) is not expected
    ]
    assert disagreements == []
