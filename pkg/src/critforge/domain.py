"""Core data model: problems, step-wise solutions, and critique transcripts.

A critique of a k-step solution is a triple of step verdicts, an overall
conclusion, and a corrected solution. The text form is a line-oriented
transcript with fixed section headers; parse_critique is total over arbitrary
text in the sense that it either returns a structurally valid Critique or
raises MalformedCritique, and it never repairs broken structure silently.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .answers import AnswerExpr, SolutionLabel

SECTION_REFERENCE = "## Reference Analysis"
SECTION_CRITIQUE = "## Step-wise Critique"
SECTION_CONCLUSION = "## Conclusion"
SECTION_CORRECTION = "## Correction"

NO_ERROR = -1


class MalformedCritique(Exception):
    """Raised when text cannot be parsed into a structurally valid critique."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class MalformedSolutionText(Exception):
    """Raised when step-wise solution text cannot be segmented."""


@dataclass(frozen=True)
class Problem:
    id: str
    source: str
    statement: str
    gt_answer: AnswerExpr

    def __post_init__(self):
        if not self.id or not self.statement.strip():
            raise ValueError("problem id and statement must be non-empty")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "source": self.source, "statement": self.statement,
            "answer": self.gt_answer.raw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Problem":
        return cls(
            id=str(d["id"]), source=str(d.get("source", "")),
            statement=str(d["statement"]),
            gt_answer=AnswerExpr.from_raw(str(d["answer"])),
        )


@dataclass(frozen=True)
class Solution:
    id: str
    problem_id: str
    model_id: str
    steps: tuple[str, ...]
    final_answer: AnswerExpr
    label: SolutionLabel = SolutionLabel.UNKNOWN

    def __post_init__(self):
        if not self.id or not self.problem_id:
            raise ValueError("solution ids must be non-empty")
        if not self.steps or any(not s.strip() for s in self.steps):
            raise ValueError(f"solution {self.id}: steps must be non-empty and non-blank")

    def to_dict(self) -> dict:
        return {
            "id": self.id, "problem_id": self.problem_id, "model_id": self.model_id,
            "steps": list(self.steps), "final_answer": self.final_answer.raw,
            "label": self.label.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Solution":
        return cls(
            id=str(d["id"]), problem_id=str(d["problem_id"]),
            model_id=str(d.get("model_id", "")),
            steps=tuple(str(s) for s in d["steps"]),
            final_answer=AnswerExpr.from_raw(str(d["final_answer"])),
            label=SolutionLabel(d.get("label", "unknown")),
        )


class StepVerdict(str, Enum):
    OK = "ok"
    ERROR = "error"


@dataclass(frozen=True)
class StepCritique:
    step_index: int
    verdict: StepVerdict
    analysis: str
    error_type: Optional[str] = None
    suggestion: Optional[str] = None

    def __post_init__(self):
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")
        if self.verdict is StepVerdict.ERROR and not (self.error_type or "").strip():
            raise ValueError("error verdict requires an error_type")
        if self.verdict is StepVerdict.OK and self.error_type is not None:
            raise ValueError("ok verdict must not carry an error_type")


@dataclass(frozen=True)
class Conclusion:
    solution_correct: bool
    first_error_step: int

    def __post_init__(self):
        if self.solution_correct != (self.first_error_step == NO_ERROR):
            raise ValueError(
                "conclusion must have first_error_step=-1 exactly when the solution is correct"
            )
        if not self.solution_correct and self.first_error_step < 1:
            raise ValueError("first_error_step must be >= 1 for incorrect solutions")


@dataclass(frozen=True)
class Correction:
    steps: tuple[str, ...]
    final_answer: AnswerExpr

    def __post_init__(self):
        if not self.steps or any(not s.strip() for s in self.steps):
            raise ValueError("correction steps must be non-empty and non-blank")
        if not self.final_answer.raw.strip():
            raise ValueError("correction final answer must be non-empty")


@dataclass(frozen=True)
class Critique:
    steps: tuple[StepCritique, ...]
    conclusion: Conclusion
    correction: Correction
    # Stage-1 analysis of the reference solution, kept for auditing only. It
    # is never rendered back into transcripts or training targets.
    reference_analysis: Optional[str] = field(default=None)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("critique must cover at least one step")
        for i, sc in enumerate(self.steps, start=1):
            if sc.step_index != i:
                raise ValueError("critique step indices must be contiguous from 1")
        errors = [sc for sc in self.steps if sc.verdict is StepVerdict.ERROR]
        if self.conclusion.solution_correct:
            if errors:
                raise ValueError("a correct conclusion cannot carry error verdicts")
        else:
            if len(errors) != 1 or self.steps[-1].verdict is not StepVerdict.ERROR:
                raise ValueError("an incorrect conclusion must end at exactly one error step")
            if self.steps[-1].step_index != self.conclusion.first_error_step:
                raise ValueError("the last critiqued step must be the first error step")

    def to_dict(self) -> dict:
        return {
            "steps": [
                {
                    "step_index": sc.step_index, "verdict": sc.verdict.value,
                    "analysis": sc.analysis, "error_type": sc.error_type,
                    "suggestion": sc.suggestion,
                }
                for sc in self.steps
            ],
            "conclusion": {
                "solution_correct": self.conclusion.solution_correct,
                "first_error_step": self.conclusion.first_error_step,
            },
            "correction": {
                "steps": list(self.correction.steps),
                "final_answer": self.correction.final_answer.raw,
            },
            "reference_analysis": self.reference_analysis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Critique":
        return cls(
            steps=tuple(
                StepCritique(
                    step_index=s["step_index"], verdict=StepVerdict(s["verdict"]),
                    analysis=s["analysis"], error_type=s.get("error_type"),
                    suggestion=s.get("suggestion"),
                )
                for s in d["steps"]
            ),
            conclusion=Conclusion(
                solution_correct=d["conclusion"]["solution_correct"],
                first_error_step=d["conclusion"]["first_error_step"],
            ),
            correction=Correction(
                steps=tuple(d["correction"]["steps"]),
                final_answer=AnswerExpr.from_raw(str(d["correction"]["final_answer"])),
            ),
            reference_analysis=d.get("reference_analysis"),
        )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_steps(steps: tuple[str, ...], final_answer_raw: str) -> str:
    lines = [f"Step {i}: {text}" for i, text in enumerate(steps, start=1)]
    lines.append(f"Final answer: {final_answer_raw}")
    return "\n".join(lines)


def render_solution(solution: Solution) -> str:
    """Canonical text form of a solution: numbered steps plus a final-answer line."""
    return render_steps(solution.steps, solution.final_answer.raw)


def render_conclusion(conclusion: Conclusion) -> str:
    if conclusion.solution_correct:
        return "Conclusion: correct"
    return f"Conclusion: incorrect, first_error_step={conclusion.first_error_step}"


def render_critique(critique: Critique) -> str:
    """Canonical transcript of a critique.

    Only the step verdicts, the conclusion, and the correction are rendered;
    any stage-1 reference analysis on the critique is deliberately left out so
    that rendered transcripts are safe to use as training targets.
    """
    lines = [SECTION_CRITIQUE]
    for sc in critique.steps:
        if sc.verdict is StepVerdict.OK:
            lines.append(f"Step {sc.step_index} [ok]: {sc.analysis}")
        else:
            lines.append(f"Step {sc.step_index} [error: {sc.error_type}]: {sc.analysis}")
        if sc.suggestion is not None:
            lines.append(f"Suggestion: {sc.suggestion}")
    lines.append("")
    lines.append(SECTION_CONCLUSION)
    lines.append(render_conclusion(critique.conclusion))
    lines.append("")
    lines.append(SECTION_CORRECTION)
    lines.append(render_steps(critique.correction.steps, critique.correction.final_answer.raw))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_STEP_LINE_RE = re.compile(r"^Step (\d+) \[([^\]]*)\]: (.*)$")
_SUGGESTION_RE = re.compile(r"^Suggestion: (.*)$")
_SOLUTION_STEP_RE = re.compile(r"^Step (\d+): (.*)$")
_FINAL_ANSWER_RE = re.compile(r"^Final answer: (.*)$")
_CONCLUSION_OK_RE = re.compile(r"^Conclusion: correct$")
_CONCLUSION_BAD_RE = re.compile(r"^Conclusion: incorrect, first_error_step=(\d+)$")


def parse_rendered_solution(text: str) -> tuple[tuple[str, ...], str]:
    """Segment rendered solution text back into (steps, final answer).

    Preamble before the first step line and chatter after the final-answer
    line are tolerated; broken step numbering is not.
    """
    lines = text.splitlines()
    final_idx = None
    for i, ln in enumerate(lines):
        if _FINAL_ANSWER_RE.match(ln.strip()):
            final_idx = i
    if final_idx is None:
        raise MalformedSolutionText("no 'Final answer:' line")
    final_answer = _FINAL_ANSWER_RE.match(lines[final_idx].strip()).group(1).strip()
    if not final_answer:
        raise MalformedSolutionText("empty final answer")

    steps: list[str] = []
    current: Optional[list[str]] = None
    seen_first = False
    for ln in lines[:final_idx]:
        m = _SOLUTION_STEP_RE.match(ln)
        if m:
            if current is not None:
                steps_append_joined(steps, current)
            index = int(m.group(1))
            if index != len(steps) + 1:
                raise MalformedSolutionText(
                    f"step indices must be contiguous from 1, got step {index}"
                )
            current = [m.group(2)]
            seen_first = True
        elif seen_first:
            if ln.strip():
                current.append(ln)
        # anything before the first step line is preamble
    if current is not None:
        steps_append_joined(steps, current)
    if not steps:
        raise MalformedSolutionText("no step lines found")
    if any(not s.strip() for s in steps):
        raise MalformedSolutionText("blank step text")
    return tuple(steps), final_answer


def steps_append_joined(steps: list[str], parts: list[str]) -> None:
    steps.append("\n".join(parts))


def _split_sections(text: str) -> dict[str, str]:
    """Map section header -> body text. Duplicate headers are rejected."""
    headers = (SECTION_REFERENCE, SECTION_CRITIQUE, SECTION_CONCLUSION, SECTION_CORRECTION)
    found: list[tuple[int, str]] = []
    lines = text.splitlines()
    for i, ln in enumerate(lines):
        stripped = ln.strip()
        if stripped in headers:
            if any(h == stripped for _, h in found):
                raise MalformedCritique(f"duplicate section header {stripped!r}")
            found.append((i, stripped))
    required = [SECTION_CRITIQUE, SECTION_CONCLUSION, SECTION_CORRECTION]
    present = [h for _, h in found]
    for h in required:
        if h not in present:
            raise MalformedCritique(f"missing section header {h!r}")
    expected_order = [h for h in (SECTION_REFERENCE, *required) if h in present]
    if present != expected_order:
        raise MalformedCritique(f"section headers out of order: {present}")
    sections: dict[str, str] = {}
    for pos, (i, h) in enumerate(found):
        end = found[pos + 1][0] if pos + 1 < len(found) else len(lines)
        sections[h] = "\n".join(lines[i + 1:end])
    return sections


def _parse_step_critiques(body: str) -> list[StepCritique]:
    parsed: list[dict] = []
    current: Optional[dict] = None
    in_suggestion = False
    for ln in body.splitlines():
        m = _STEP_LINE_RE.match(ln)
        if m:
            if current is not None:
                parsed.append(current)
            index = int(m.group(1))
            marker = m.group(2)
            if marker == "ok":
                verdict, error_type = StepVerdict.OK, None
            elif marker.startswith("error: ") and marker[len("error: "):].strip():
                verdict, error_type = StepVerdict.ERROR, marker[len("error: "):].strip()
            else:
                raise MalformedCritique(f"bad step verdict marker {marker!r}")
            current = {
                "step_index": index, "verdict": verdict, "error_type": error_type,
                "analysis": [m.group(3)], "suggestion": None,
            }
            in_suggestion = False
            continue
        ms = _SUGGESTION_RE.match(ln)
        if ms:
            if current is None:
                raise MalformedCritique("suggestion line before any step line")
            if current["suggestion"] is not None:
                raise MalformedCritique(
                    f"multiple suggestion lines for step {current['step_index']}"
                )
            current["suggestion"] = [ms.group(1)]
            in_suggestion = True
            continue
        if not ln.strip():
            continue
        if current is None:
            raise MalformedCritique("critique content before the first step line")
        (current["suggestion"] if in_suggestion else current["analysis"]).append(ln)
    if current is not None:
        parsed.append(current)
    if not parsed:
        raise MalformedCritique("step-wise critique section has no step lines")

    out = []
    for i, p in enumerate(parsed, start=1):
        if p["step_index"] != i:
            raise MalformedCritique(
                f"critique step indices must be contiguous from 1, got {p['step_index']}"
            )
        try:
            out.append(StepCritique(
                step_index=p["step_index"], verdict=p["verdict"],
                analysis="\n".join(p["analysis"]), error_type=p["error_type"],
                suggestion="\n".join(p["suggestion"]) if p["suggestion"] is not None else None,
            ))
        except ValueError as exc:
            raise MalformedCritique(str(exc)) from exc
    return out


def _parse_conclusion(body: str) -> Conclusion:
    candidates = [ln.strip() for ln in body.splitlines() if ln.strip().startswith("Conclusion:")]
    if len(candidates) != 1:
        raise MalformedCritique(
            f"conclusion section must contain exactly one Conclusion line, found {len(candidates)}"
        )
    line = candidates[0]
    if _CONCLUSION_OK_RE.match(line):
        return Conclusion(solution_correct=True, first_error_step=NO_ERROR)
    m = _CONCLUSION_BAD_RE.match(line)
    if m:
        j = int(m.group(1))
        if j < 1:
            raise MalformedCritique("first_error_step must be >= 1")
        return Conclusion(solution_correct=False, first_error_step=j)
    raise MalformedCritique(f"unrecognized conclusion line {line!r}")


def parse_critique(text: str, target_step_count: int) -> Critique:
    """Parse a critique transcript for a target solution with the given step count.

    Raises MalformedCritique on any structural violation: missing or
    duplicated sections, bad step markers, non-contiguous indexing, a
    conclusion inconsistent with the step verdicts, step coverage that does
    not stop at the claimed first error (or does not cover all steps when the
    verdict is correct), or an unparseable correction.
    """
    if target_step_count < 1:
        raise ValueError("target_step_count must be >= 1")
    sections = _split_sections(text)
    steps = _parse_step_critiques(sections[SECTION_CRITIQUE])
    conclusion = _parse_conclusion(sections[SECTION_CONCLUSION])

    if conclusion.solution_correct:
        if len(steps) != target_step_count:
            raise MalformedCritique(
                f"correct verdict must cover all {target_step_count} steps, covered {len(steps)}"
            )
        if any(sc.verdict is not StepVerdict.OK for sc in steps):
            raise MalformedCritique("correct verdict cannot carry error steps")
    else:
        j = conclusion.first_error_step
        if j > target_step_count:
            raise MalformedCritique(
                f"first_error_step={j} exceeds the {target_step_count}-step solution"
            )
        if len(steps) != j:
            raise MalformedCritique(
                f"critique must stop at the first error: covered {len(steps)} steps, "
                f"claimed error at step {j}"
            )
        if steps[-1].verdict is not StepVerdict.ERROR:
            raise MalformedCritique("the claimed first error step is not marked as an error")
        if any(sc.verdict is not StepVerdict.OK for sc in steps[:-1]):
            raise MalformedCritique("steps before the first error must be marked ok")

    try:
        corr_steps, corr_answer = parse_rendered_solution(sections[SECTION_CORRECTION])
    except MalformedSolutionText as exc:
        raise MalformedCritique(f"bad correction section: {exc}") from exc
    correction = Correction(
        steps=corr_steps,
        final_answer=AnswerExpr.from_raw(corr_answer, source_rule="final_answer_line"),
    )

    reference_analysis: Optional[str] = None
    if SECTION_REFERENCE in sections:
        reference_analysis = sections[SECTION_REFERENCE].strip()

    try:
        return Critique(
            steps=tuple(steps), conclusion=conclusion, correction=correction,
            reference_analysis=reference_analysis,
        )
    except ValueError as exc:  # defense in depth; the checks above should catch first
        raise MalformedCritique(str(exc)) from exc
