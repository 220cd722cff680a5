"""Self-validation of synthesized critiques and export to SFT training rows.

A critique is kept only if the critic itself, judging the critique's own
corrected solution with no reference in sight, concludes that the correction
is fully correct. Accepted critiques become (input, target) training rows
whose input shows the problem and the critiqued solution only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .answers import answers_equivalent
from .domain import Critique, Problem, render_critique, render_solution, render_steps
from .engines import CritiqueRecord, MalformedConclusion, run_direct_conclusion
from .gateway import ModelGateway
from .io_utils import SCHEMA_VERSION, write_jsonl
from .pooling import InsufficientItems, max_feasible_total, sample_balanced
from .templates import load_template

logger = logging.getLogger(__name__)

REASON_ACCEPTED = "accepted"
REASON_MALFORMED = "malformed_critique"
REASON_REJECTED = "validator_rejected_correction"
REASON_VALIDATOR_MALFORMED = "validator_conclusion_malformed"
REASON_ANSWER_MISMATCH = "strict_answer_mismatch"


@dataclass(frozen=True)
class ValidatedTriplet:
    """A critique record plus the self-validation verdict on it."""

    record: CritiqueRecord
    accepted: bool
    reason: str
    validator_said_correct: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "record": self.record.to_dict(), "accepted": self.accepted,
            "reason": self.reason, "validator_said_correct": self.validator_said_correct,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValidatedTriplet":
        return cls(
            record=CritiqueRecord.from_dict(d["record"]), accepted=d["accepted"],
            reason=d["reason"], validator_said_correct=d.get("validator_said_correct"),
        )


def self_validate(gateway: ModelGateway, model_id: str, problem: Problem,
                  record: CritiqueRecord, strict_answer_check: bool = False,
                  temperature: float = 0.0, seed: Optional[int] = None) -> ValidatedTriplet:
    """Accept a critique iff the critic judges its own correction fully correct.

    The validator sees only the problem and the correction text. With
    strict_answer_check the correction's final answer must additionally be
    equivalent to the problem's ground-truth answer.
    """
    if record.critique is None:
        return ValidatedTriplet(record=record, accepted=False, reason=REASON_MALFORMED)

    correction = record.critique.correction
    correction_text = render_steps(correction.steps, correction.final_answer.raw)
    try:
        conclusion = run_direct_conclusion(
            gateway, model_id, problem, correction_text,
            temperature=temperature, seed=seed,
        )
    except MalformedConclusion:
        return ValidatedTriplet(record=record, accepted=False,
                                reason=REASON_VALIDATOR_MALFORMED)

    if not conclusion.solution_correct:
        return ValidatedTriplet(record=record, accepted=False, reason=REASON_REJECTED,
                                validator_said_correct=False)
    if strict_answer_check and not answers_equivalent(correction.final_answer,
                                                      problem.gt_answer):
        return ValidatedTriplet(record=record, accepted=False,
                                reason=REASON_ANSWER_MISMATCH,
                                validator_said_correct=True)
    return ValidatedTriplet(record=record, accepted=True, reason=REASON_ACCEPTED,
                            validator_said_correct=True)


@dataclass(frozen=True)
class TrainingInstance:
    input_text: str
    target_text: str
    meta: dict

    @property
    def conclusion_correct(self) -> bool:
        return bool(self.meta["conclusion_correct"])

    def to_row(self) -> dict:
        return {"input": self.input_text, "target": self.target_text, "meta": self.meta}


def build_training_instance(problem: Problem, record: CritiqueRecord) -> TrainingInstance:
    """Turn an accepted critique into one SFT row.

    The input is the reference-free critic prompt over the critiqued solution;
    the target is the rendered critique. Neither carries any reference
    solution content or stage-1 analysis.
    """
    if record.critique is None:
        raise ValueError("cannot build a training instance from a malformed record")
    template, digest = load_template("direct_critic.txt")
    target_text = render_solution(record.target_solution())
    input_text = template.format(problem=problem.statement, solution=target_text)
    critique: Critique = record.critique
    meta = {
        "schema_version": SCHEMA_VERSION,
        "problem_id": problem.id,
        "source": problem.source,
        "solution_id": record.target_solution_id,
        "mode": record.mode.value,
        "critic_model_id": record.critic_model_id,
        "input_template_digest": digest,
        "conclusion_correct": critique.conclusion.solution_correct,
    }
    return TrainingInstance(
        input_text=input_text, target_text=render_critique(critique), meta=meta,
    )


@dataclass(frozen=True)
class ExportReport:
    written: int
    n_conclusion_correct: int
    n_conclusion_incorrect: int
    ratio: Optional[tuple[float, float]]
    requested_total: Optional[int]

    def to_dict(self) -> dict:
        return {
            "written": self.written,
            "n_conclusion_correct": self.n_conclusion_correct,
            "n_conclusion_incorrect": self.n_conclusion_incorrect,
            "ratio": list(self.ratio) if self.ratio else None,
            "requested_total": self.requested_total,
        }


def export_sft(instances: Sequence[TrainingInstance], path,
               ratio: Optional[tuple[float, float]] = None,
               total: Optional[int] = None, seed: int = 0) -> ExportReport:
    """Write training rows as JSONL, optionally balanced to a target ratio.

    With a ratio set, instances whose critique concludes correct form the
    good side and error-finding ones the bad side. A missing total means
    "as many as the ratio allows" (the larger side is downsampled);
    an explicit total that cannot be met raises InsufficientItems.
    """
    chosen = list(instances)
    if ratio is None and total is not None:
        raise ValueError("a total requires a ratio")
    if ratio is not None:
        good = [inst for inst in instances if inst.conclusion_correct]
        bad = [inst for inst in instances if not inst.conclusion_correct]
        if total is None:
            total = max_feasible_total(len(good), len(bad), ratio)
        chosen = sample_balanced(good, bad, ratio, total, seed=seed)
    chosen.sort(key=lambda inst: (inst.meta["problem_id"], inst.meta["solution_id"]))
    write_jsonl(path, (inst.to_row() for inst in chosen))
    return ExportReport(
        written=len(chosen),
        n_conclusion_correct=sum(1 for i in chosen if i.conclusion_correct),
        n_conclusion_incorrect=sum(1 for i in chosen if not i.conclusion_correct),
        ratio=ratio, requested_total=total,
    )


__all__ = [
    "ValidatedTriplet", "TrainingInstance", "ExportReport",
    "self_validate", "build_training_instance", "export_sft",
    "InsufficientItems",
    "REASON_ACCEPTED", "REASON_MALFORMED", "REASON_REJECTED",
    "REASON_VALIDATOR_MALFORMED", "REASON_ANSWER_MISMATCH",
]
