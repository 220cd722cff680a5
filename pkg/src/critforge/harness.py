"""Scoring critic models on held-out solutions.

Two protocols are supported. Critique-correction accuracy treats the critic
as an answer fixer: the effective answer is the correction's answer when the
critic flags an error, otherwise the original answer, and it must match
ground truth. Error-identification scores location: a flagged record counts
only when the predicted first-error step lands within one step of the true
one and the correction reaches the ground-truth answer; the final score is
the harmonic mean of the accuracies on truly-incorrect and truly-correct
records.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .answers import AnswerExpr, SolutionLabel, answers_equivalent
from .domain import NO_ERROR, Problem, Solution
from .engines import CritiqueRecord, run_direct_critic
from .gateway import ModelGateway
from .io_utils import read_jsonl

logger = logging.getLogger(__name__)


class Protocol(str, Enum):
    CC = "cc"   # critique-correction accuracy
    EI = "ei"   # error identification F1


@dataclass(frozen=True)
class EvalRecord:
    """One held-out problem/solution pair, optionally with error-step ground truth."""

    id: str
    problem: Problem
    solution: Solution
    scenario: str
    gt_first_error_step: Optional[int] = None

    @property
    def gt_solution_correct(self) -> Optional[bool]:
        if self.gt_first_error_step is None:
            return None
        return self.gt_first_error_step == NO_ERROR


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    """Load held-out records from JSONL.

    Required keys: problem, steps, final_answer, gt_answer, scenario.
    Optional: id, source, model_id, gt_first_error_step (-1 means no error).
    """
    records = []
    for i, row in enumerate(read_jsonl(path)):
        record_id = str(row.get("id", f"eval-{i:05d}"))
        problem = Problem(
            id=f"{record_id}/problem", source=str(row.get("source", "")),
            statement=str(row["problem"]),
            gt_answer=AnswerExpr.from_raw(str(row["gt_answer"])),
        )
        gt_step = row.get("gt_first_error_step")
        gt_step = int(gt_step) if gt_step is not None else None
        if gt_step is not None and gt_step != NO_ERROR and gt_step < 1:
            raise ValueError(f"record {record_id}: gt_first_error_step must be -1 or >= 1")
        label = SolutionLabel.UNKNOWN
        if gt_step is not None:
            label = SolutionLabel.CORRECT if gt_step == NO_ERROR else SolutionLabel.INCORRECT
        solution = Solution(
            id=f"{record_id}/solution", problem_id=problem.id,
            model_id=str(row.get("model_id", "")),
            steps=tuple(str(s) for s in row["steps"]),
            final_answer=AnswerExpr.from_raw(str(row["final_answer"])),
            label=label,
        )
        if gt_step is not None and gt_step != NO_ERROR and gt_step > len(solution.steps):
            raise ValueError(
                f"record {record_id}: gt_first_error_step={gt_step} exceeds "
                f"{len(solution.steps)} steps"
            )
        records.append(EvalRecord(
            id=record_id, problem=problem, solution=solution,
            scenario=str(row["scenario"]), gt_first_error_step=gt_step,
        ))
    return records


def critique_eval_record(gateway: ModelGateway, model_id: str, record: EvalRecord,
                         temperature: float = 0.0,
                         seed: Optional[int] = None) -> CritiqueRecord:
    """Produce the candidate critic's reference-free critique of one record."""
    return run_direct_critic(gateway, model_id, record.problem, record.solution,
                             temperature=temperature, seed=seed)


@dataclass(frozen=True)
class ScoredResult:
    record_id: str
    scenario: str
    source: str
    protocol: Protocol
    hit: bool
    predicted_correct: Optional[bool] = None
    predicted_first_error_step: Optional[int] = None
    gt_solution_correct: Optional[bool] = None
    failure_reason: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id, "scenario": self.scenario,
            "source": self.source, "protocol": self.protocol.value,
            "hit": self.hit, "predicted_correct": self.predicted_correct,
            "predicted_first_error_step": self.predicted_first_error_step,
            "gt_solution_correct": self.gt_solution_correct,
            "failure_reason": self.failure_reason,
        }


def score_critic_correct(record: EvalRecord, crit: CritiqueRecord) -> ScoredResult:
    """Critique-correction accuracy for one record.

    The critic's effective answer is the correction's answer when it flags an
    error and the original answer when it does not; a hit means that answer
    is equivalent to ground truth. A malformed critique scores a miss.
    """
    if crit.critique is None:
        return ScoredResult(
            record_id=record.id, scenario=record.scenario, source=record.problem.source,
            protocol=Protocol.CC, hit=False,
            gt_solution_correct=record.gt_solution_correct,
            failure_reason="malformed_critique",
        )
    conclusion = crit.critique.conclusion
    if conclusion.solution_correct:
        effective = record.solution.final_answer
    else:
        effective = crit.critique.correction.final_answer
    return ScoredResult(
        record_id=record.id, scenario=record.scenario, source=record.problem.source,
        protocol=Protocol.CC, hit=answers_equivalent(effective, record.problem.gt_answer),
        predicted_correct=conclusion.solution_correct,
        predicted_first_error_step=conclusion.first_error_step,
        gt_solution_correct=record.gt_solution_correct,
    )


def score_error_identification(record: EvalRecord, crit: CritiqueRecord,
                               tolerance: int = 1) -> ScoredResult:
    """Error-identification scoring for one record with step-index ground truth.

    For a truly-incorrect solution the critic must flag it, localize the
    first error within the tolerance window, and correct to the ground-truth
    answer. For a truly-correct solution it must simply conclude correct.
    """
    if record.gt_first_error_step is None:
        raise ValueError(f"record {record.id} has no error-step ground truth")
    base = dict(record_id=record.id, scenario=record.scenario,
                source=record.problem.source, protocol=Protocol.EI,
                gt_solution_correct=record.gt_solution_correct)
    if crit.critique is None:
        return ScoredResult(hit=False, failure_reason="malformed_critique", **base)
    conclusion = crit.critique.conclusion
    if record.gt_first_error_step == NO_ERROR:
        hit = conclusion.solution_correct
    else:
        hit = (
            not conclusion.solution_correct
            and abs(conclusion.first_error_step - record.gt_first_error_step) <= tolerance
            and answers_equivalent(crit.critique.correction.final_answer,
                                   record.problem.gt_answer)
        )
    return ScoredResult(
        hit=hit, predicted_correct=conclusion.solution_correct,
        predicted_first_error_step=conclusion.first_error_step, **base,
    )


@dataclass(frozen=True)
class F1Report:
    n_incorrect: int
    n_correct: int
    acc_incorrect: float
    acc_correct: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "n_incorrect": self.n_incorrect, "n_correct": self.n_correct,
            "acc_incorrect": self.acc_incorrect, "acc_correct": self.acc_correct,
            "f1": self.f1,
        }


def compute_f1(scored: Sequence[ScoredResult]) -> F1Report:
    """Harmonic mean of per-class accuracies over error-identification results.

    Either class being empty or scoring zero makes the F1 zero.
    """
    incorrect = [s for s in scored if s.gt_solution_correct is False]
    correct = [s for s in scored if s.gt_solution_correct is True]
    acc_incorrect = (sum(s.hit for s in incorrect) / len(incorrect)) if incorrect else 0.0
    acc_correct = (sum(s.hit for s in correct) / len(correct)) if correct else 0.0
    if acc_incorrect == 0.0 or acc_correct == 0.0:
        f1 = 0.0
    else:
        f1 = 2 * acc_incorrect * acc_correct / (acc_incorrect + acc_correct)
    return F1Report(
        n_incorrect=len(incorrect), n_correct=len(correct),
        acc_incorrect=acc_incorrect, acc_correct=acc_correct, f1=f1,
    )


def cc_accuracy(scored: Sequence[ScoredResult]) -> float:
    """Plain accuracy over critique-correction results."""
    return (sum(s.hit for s in scored) / len(scored)) if scored else 0.0
