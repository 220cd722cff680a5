"""Self-validation predicate, training-instance construction, SFT export."""
from __future__ import annotations

import json

import pytest

from critforge.answers import SolutionLabel
from critforge.domain import NO_ERROR, render_critique
from critforge.engines import CritiqueMode, CritiqueRecord, run_contrastive_critic
from critforge.io_utils import read_jsonl
from critforge.pooling import CritiquePair, InsufficientItems, PairKind
from critforge.validation import (
    REASON_ACCEPTED,
    REASON_ANSWER_MISMATCH,
    REASON_MALFORMED,
    REASON_REJECTED,
    REASON_VALIDATOR_MALFORMED,
    build_training_instance,
    export_sft,
    self_validate,
)

from conftest import make_critique, make_problem, make_solution, make_transcript, script_gateway


PROBLEM = make_problem("p1", "What is 3 * 7?", "21")


def _record(correction_answer="21", j=2, parsed=True, mode=CritiqueMode.CONTRASTIVE,
            solution_id="s-bad", problem_id="p1", **critique_kwargs) -> CritiqueRecord:
    critique = make_critique(k=2, j=j, correction_answer=correction_answer,
                             **critique_kwargs) if parsed else None
    return CritiqueRecord(
        mode=mode, problem_id=problem_id, target_solution_id=solution_id,
        critic_model_id="critic-1", transcript="(raw)", template_digest="t0",
        critique=critique,
        malformed_reason=None if parsed else "missing section '## Conclusion'",
        target_steps=("Multiply 3 by 7.", "Get 24."), target_final_answer="24",
        target_label=SolutionLabel.INCORRECT.value,
    )


def _validator_gateway(tmp_path, reject_marker="999999"):
    """Validator that rejects corrections carrying the marker answer."""
    return script_gateway([
        {"purpose": "direct_conclusion", "contains": reject_marker,
         "response": "Conclusion: incorrect, first_error_step=1"},
        {"purpose": "direct_conclusion", "response": "Conclusion: correct"},
    ], tmp_path)


# ---------------------------------------------------------------------------
# self_validate
# ---------------------------------------------------------------------------

def test_accepts_when_validator_approves_correction(tmp_path):
    gw = _validator_gateway(tmp_path)
    triplet = self_validate(gw, "critic-1", PROBLEM, _record("21"))
    assert triplet.accepted and triplet.reason == REASON_ACCEPTED
    assert triplet.validator_said_correct is True


def test_rejects_when_validator_flags_correction(tmp_path):
    gw = _validator_gateway(tmp_path)
    triplet = self_validate(gw, "critic-1", PROBLEM, _record("999999"))
    assert not triplet.accepted and triplet.reason == REASON_REJECTED
    assert triplet.validator_said_correct is False


def test_malformed_record_skips_validator(tmp_path):
    gw = _validator_gateway(tmp_path)
    triplet = self_validate(gw, "critic-1", PROBLEM, _record(parsed=False))
    assert not triplet.accepted and triplet.reason == REASON_MALFORMED
    assert gw.stats.calls == 0


def test_validator_gibberish_counts_as_rejection(tmp_path):
    gw = script_gateway([
        {"purpose": "direct_conclusion", "response": "uh, let me think..."},
    ], tmp_path)
    triplet = self_validate(gw, "critic-1", PROBLEM, _record("21"))
    assert not triplet.accepted and triplet.reason == REASON_VALIDATOR_MALFORMED


def test_strict_answer_check_gates_on_ground_truth(tmp_path):
    gw = _validator_gateway(tmp_path)
    # validator approves, but the correction answer differs from gt
    wrong = self_validate(gw, "critic-1", PROBLEM, _record("22"),
                          strict_answer_check=True)
    assert not wrong.accepted and wrong.reason == REASON_ANSWER_MISMATCH
    right = self_validate(gw, "critic-1", PROBLEM, _record("21.0"),
                          strict_answer_check=True)
    assert right.accepted
    # without strict checking the same record is accepted
    lax = self_validate(gw, "critic-1", PROBLEM, _record("22"))
    assert lax.accepted


def test_validation_does_not_consult_gt_by_default(tmp_path):
    # the default predicate is exactly "validator says correct", so a
    # correction with a non-gt answer still passes when the validator approves
    gw = script_gateway([
        {"purpose": "direct_conclusion", "response": "Conclusion: correct"},
    ], tmp_path)
    triplet = self_validate(gw, "critic-1", PROBLEM, _record("12345"))
    assert triplet.accepted


def test_acceptance_set_matches_scripted_verdicts(tmp_path):
    gw = _validator_gateway(tmp_path)
    records = []
    expect_accepted = set()
    for i in range(30):
        sid = f"s{i:02d}"
        if i % 5 == 0:
            records.append(_record(parsed=False, solution_id=sid))
        elif i % 3 == 0:
            records.append(_record("999999", solution_id=sid))
        else:
            records.append(_record("21", solution_id=sid))
            expect_accepted.add(sid)
    triplets = [self_validate(gw, "critic-1", PROBLEM, r) for r in records]
    accepted = {t.record.target_solution_id for t in triplets if t.accepted}
    assert accepted == expect_accepted


# ---------------------------------------------------------------------------
# Training instances
# ---------------------------------------------------------------------------

def test_training_instance_shape():
    record = _record("21")
    inst = build_training_instance(PROBLEM, record)
    assert "What is 3 * 7?" in inst.input_text
    assert "Step 1: Multiply 3 by 7.\nStep 2: Get 24.\nFinal answer: 24" in inst.input_text
    assert inst.target_text == render_critique(record.critique)
    assert inst.meta["problem_id"] == "p1"
    assert inst.meta["solution_id"] == "s-bad"
    assert inst.meta["mode"] == "contrastive"
    assert inst.meta["conclusion_correct"] is False
    assert inst.meta["input_template_digest"]


def test_training_instance_refuses_malformed():
    with pytest.raises(ValueError):
        build_training_instance(PROBLEM, _record(parsed=False))


def test_training_instance_is_reference_free(tmp_path):
    reference = make_solution(
        "s-ref", "p1", steps=("UNIQUEREF multiply carefully.", "UNIQUEREF obtain 21."),
        answer="21", label=SolutionLabel.CORRECT)
    target = make_solution("s-tgt", "p1", steps=("Multiply.", "Get 24."),
                           answer="24", label=SolutionLabel.INCORRECT)
    pair = CritiquePair("p1", target=target, reference=reference,
                        kind=PairKind.CORRECT_INCORRECT)
    reply = make_transcript(j=2, k=2, correction_answer="21",
                            reference_analysis="REFNOTES the key step is the product.")
    gw = script_gateway([{"purpose": "contrastive_critic", "response": reply}], tmp_path)
    record = run_contrastive_critic(gw, "critic-1", PROBLEM, pair)
    inst = build_training_instance(PROBLEM, record)
    for leak in ("UNIQUEREF", "REFNOTES", "Reference solution"):
        assert leak not in inst.input_text
        assert leak not in inst.target_text


# ---------------------------------------------------------------------------
# export_sft
# ---------------------------------------------------------------------------

def _instances(n_good: int, n_bad: int):
    out = []
    for i in range(n_good):
        record = _record("21", j=NO_ERROR, solution_id=f"g{i:03d}")
        out.append(build_training_instance(PROBLEM, record))
    for i in range(n_bad):
        record = _record("21", j=2, solution_id=f"b{i:03d}")
        out.append(build_training_instance(PROBLEM, record))
    return out


def test_export_all_without_ratio(tmp_path):
    path = tmp_path / "sft.jsonl"
    report = export_sft(_instances(3, 5), path)
    assert report.written == 8
    rows = list(read_jsonl(path))
    assert len(rows) == 8
    assert all(set(r) == {"input", "target", "meta"} for r in rows)


def test_export_balanced_with_explicit_total(tmp_path):
    report = export_sft(_instances(10, 30), tmp_path / "sft.jsonl",
                        ratio=(1, 1), total=20, seed=4)
    assert report.written == 20
    assert report.n_conclusion_correct == 10
    assert report.n_conclusion_incorrect == 10


def test_export_ratio_without_total_downsamples_larger_side(tmp_path):
    report = export_sft(_instances(10, 30), tmp_path / "sft.jsonl", ratio=(1, 1))
    assert report.written == 20
    assert report.n_conclusion_correct == 10
    assert report.n_conclusion_incorrect == 10

    report = export_sft(_instances(10, 30), tmp_path / "s2.jsonl", ratio=(0.25, 0.75))
    assert report.n_conclusion_correct * 3 == report.n_conclusion_incorrect


def test_export_insufficient_items_propagates(tmp_path):
    with pytest.raises(InsufficientItems) as err:
        export_sft(_instances(2, 50), tmp_path / "sft.jsonl", ratio=(1, 1), total=50)
    assert err.value.max_total == 4


def test_export_rows_are_sorted_and_deterministic(tmp_path):
    insts = _instances(4, 4)
    export_sft(list(reversed(insts)), tmp_path / "a.jsonl", ratio=(1, 1), total=6, seed=1)
    export_sft(list(reversed(insts)), tmp_path / "b.jsonl", ratio=(1, 1), total=6, seed=1)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    ids = [json.loads(ln)["meta"]["solution_id"]
           for ln in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert ids == sorted(ids)
