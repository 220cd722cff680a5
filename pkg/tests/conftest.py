"""Shared builders for the test suite."""
from __future__ import annotations

import random
from typing import Optional, Sequence

import pytest

from critforge.answers import AnswerExpr, SolutionLabel
from critforge.domain import (
    NO_ERROR,
    Conclusion,
    Correction,
    Critique,
    Problem,
    Solution,
    StepCritique,
    StepVerdict,
)
from critforge.gateway import MockBackend, MockScript, ModelGateway


def make_problem(pid: str = "p1", statement: str = "What is 3 * 7?",
                 answer: str = "21", source: str = "unit") -> Problem:
    return Problem(id=pid, source=source, statement=statement,
                   gt_answer=AnswerExpr.from_raw(answer))


def make_solution(sid: str = "s1", pid: str = "p1", model: str = "m1",
                  steps: Sequence[str] = ("Multiply 3 by 7.", "The product is 21."),
                  answer: str = "21",
                  label: SolutionLabel = SolutionLabel.UNKNOWN) -> Solution:
    return Solution(id=sid, problem_id=pid, model_id=model, steps=tuple(steps),
                    final_answer=AnswerExpr.from_raw(answer), label=label)


def make_critique(k: int = 2, j: int = NO_ERROR,
                  correction_steps: Sequence[str] = ("Multiply 3 by 7.", "The product is 21."),
                  correction_answer: str = "21",
                  reference_analysis: Optional[str] = None,
                  suggestion: Optional[str] = None,
                  error_type: str = "arithmetic") -> Critique:
    """A structurally valid critique: j=-1 means all k steps ok, else stop at j."""
    steps = []
    covered = k if j == NO_ERROR else j
    for i in range(1, covered + 1):
        if j != NO_ERROR and i == j:
            steps.append(StepCritique(
                step_index=i, verdict=StepVerdict.ERROR,
                analysis=f"Step {i} miscomputes the product.",
                error_type=error_type, suggestion=suggestion,
            ))
        else:
            steps.append(StepCritique(
                step_index=i, verdict=StepVerdict.OK,
                analysis=f"Step {i} is sound.",
            ))
    return Critique(
        steps=tuple(steps),
        conclusion=Conclusion(solution_correct=j == NO_ERROR, first_error_step=j),
        correction=Correction(steps=tuple(correction_steps),
                              final_answer=AnswerExpr.from_raw(correction_answer)),
        reference_analysis=reference_analysis,
    )


def make_transcript(j: int = NO_ERROR, k: int = 2,
                    correction_answer: str = "21",
                    correction_steps: Sequence[str] = ("Multiply.", "Conclude."),
                    reference_analysis: Optional[str] = None,
                    error_type: str = "arithmetic") -> str:
    """Hand-assembled transcript text, independent of render_critique."""
    lines = []
    if reference_analysis is not None:
        lines += ["## Reference Analysis", reference_analysis, ""]
    lines.append("## Step-wise Critique")
    covered = k if j == NO_ERROR else j
    for i in range(1, covered + 1):
        if j != NO_ERROR and i == j:
            lines.append(f"Step {i} [error: {error_type}]: This step goes wrong.")
        else:
            lines.append(f"Step {i} [ok]: This step holds up.")
    lines += ["", "## Conclusion"]
    if j == NO_ERROR:
        lines.append("Conclusion: correct")
    else:
        lines.append(f"Conclusion: incorrect, first_error_step={j}")
    lines += ["", "## Correction"]
    for i, text in enumerate(correction_steps, start=1):
        lines.append(f"Step {i}: {text}")
    lines.append(f"Final answer: {correction_answer}")
    return "\n".join(lines)


def script_gateway(rules: list[dict], tmp_path=None, **gateway_kwargs) -> ModelGateway:
    """Gateway over a mock script; appends a default rule if none present."""
    if not any(not (r.get("purpose") or r.get("contains") or r.get("pattern"))
               for r in rules):
        rules = rules + [{"response": "Conclusion: correct"}]
    script = MockScript.from_dict({"rules": rules})
    cache_dir = tmp_path / "cache" if tmp_path is not None else None
    return ModelGateway(MockBackend(script), cache_dir=cache_dir,
                        sleeper=lambda _t: None, **gateway_kwargs)


def random_valid_critique(rng: random.Random) -> Critique:
    """Random structurally valid critique for round-trip properties."""
    k = rng.randint(1, 6)
    correct = rng.random() < 0.5
    j = NO_ERROR if correct else rng.randint(1, k)
    words = ["the", "value", "holds", "since", "7", "x+1", "carries", "replaces"]

    def phrase(allow_multiline: bool = True) -> str:
        text = " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
        if allow_multiline and rng.random() < 0.2:
            text += "\n" + " ".join(rng.choice(words) for _ in range(rng.randint(1, 4)))
        return text

    steps = []
    covered = k if correct else j
    for i in range(1, covered + 1):
        if not correct and i == j:
            steps.append(StepCritique(
                step_index=i, verdict=StepVerdict.ERROR, analysis=phrase(),
                error_type=rng.choice(["arithmetic", "logic", "misread units"]),
                suggestion=phrase() if rng.random() < 0.5 else None,
            ))
        else:
            steps.append(StepCritique(
                step_index=i, verdict=StepVerdict.OK, analysis=phrase(),
                suggestion=phrase() if rng.random() < 0.2 else None,
            ))
    n_corr = rng.randint(1, 4)
    correction = Correction(
        steps=tuple(phrase() for _ in range(n_corr)),
        final_answer=AnswerExpr.from_raw(str(rng.randint(-50, 5000))),
    )
    return Critique(
        steps=tuple(steps),
        conclusion=Conclusion(solution_correct=correct, first_error_step=j),
        correction=correction,
        reference_analysis=None,
    )


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20260823)
