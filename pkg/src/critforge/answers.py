"""Final-answer extraction, normalization, and equivalence for math solutions.

Answers are compared exactly: anything that parses as a number is held as a
rational and compared by value, everything else is compared as case- and
whitespace-folded text. The two families never compare equal to each other,
which keeps the relation transitive and makes equivalence-class grouping safe.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from fractions import Fraction
from typing import TYPE_CHECKING, Optional

from .gateway import BackendError, ChatMessage, CompletionRequest
from .templates import load_template

if TYPE_CHECKING:  # pragma: no cover - type hints only
    from .domain import Problem, Solution
    from .gateway import ModelGateway

logger = logging.getLogger(__name__)


class AnswerKind(str, Enum):
    INTEGER = "integer"
    RATIONAL = "rational"
    DECIMAL = "decimal"
    SYMBOLIC = "symbolic"

    @property
    def is_numeric(self) -> bool:
        return self is not AnswerKind.SYMBOLIC


class SolutionLabel(str, Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    UNKNOWN = "unknown"


# Trailing words dropped during normalization so that "42 dollars" and "42"
# denote the same answer. Purely a suffix stop-list; "%" is deliberately not
# here because it changes the value.
DEFAULT_UNIT_SUFFIXES: tuple[str, ...] = (
    "dollars", "dollar", "cents", "cent", "degrees", "degree",
    "meters", "meter", "cm", "mm", "km", "kg", "g",
    "hours", "hour", "minutes", "minute", "seconds", "second",
    "units", "unit", "square units", "cubic units",
)

_INT_RE = re.compile(r"^[+-]?\d+$")
_FRACTION_RE = re.compile(r"^([+-]?\d+)\s*/\s*(\d+)$")
_DECIMAL_RE = re.compile(r"^[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?$")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")
_LATEX_FRAC_RE = re.compile(r"\\[dt]?frac\{([+-]?\d+)\}\{(\d+)\}")
_TEXT_CMD_RE = re.compile(r"\\(?:text|mathrm|textbf|mathbf)\{([^{}]*)\}")


def _strip_boxed(s: str) -> str:
    """Replace every \\boxed{...} with its brace-balanced content."""
    out = []
    i = 0
    while i < len(s):
        m = re.compile(r"\\boxed\s*\{").search(s, i)
        if not m:
            out.append(s[i:])
            break
        out.append(s[i:m.start()])
        depth = 1
        j = m.end()
        while j < len(s) and depth:
            if s[j] == "{":
                depth += 1
            elif s[j] == "}":
                depth -= 1
            j += 1
        out.append(s[m.end():j - 1] if depth == 0 else s[m.end():j])
        i = j
    return "".join(out)


def _strip_math_markup(s: str) -> str:
    s = _strip_boxed(s)
    s = _LATEX_FRAC_RE.sub(r"\1/\2", s)
    s = _TEXT_CMD_RE.sub(r"\1", s)
    for token in ("\\left", "\\right", "\\!", "\\,", "\\;", "\\:", "$$", "\\(", "\\)", "\\[", "\\]"):
        s = s.replace(token, "")
    s = s.strip()
    if s.startswith("$") and s.endswith("$") and len(s) > 1:
        s = s[1:-1].strip()
    if s.startswith("$") and len(s) > 1 and s[1].isdigit():
        s = s[1:]
    return s.strip()


def _strip_units(s: str, suffixes: tuple[str, ...]) -> str:
    ordered = sorted(suffixes, key=len, reverse=True)  # multiword units first
    changed = True
    while changed:
        changed = False
        low = s.lower()
        for unit in ordered:
            if low.endswith(" " + unit):
                s = s[: -len(unit) - 1].rstrip()
                changed = True
                break
    return s


def normalize_answer(raw: str, unit_suffixes: tuple[str, ...] = DEFAULT_UNIT_SUFFIXES) -> str:
    """Canonical text form of a raw answer string."""
    s = _strip_math_markup(raw.strip())
    s = s.rstrip(".")
    s = _strip_units(s, unit_suffixes)
    s = _THOUSANDS_RE.sub("", s)
    s = re.sub(r"\s+", " ", s).strip()
    return s


def _parse_numeric(normalized: str) -> tuple[Optional[Fraction], AnswerKind]:
    if _INT_RE.match(normalized):
        return Fraction(int(normalized)), AnswerKind.INTEGER
    m = _FRACTION_RE.match(normalized)
    if m and int(m.group(2)) != 0:
        return Fraction(int(m.group(1)), int(m.group(2))), AnswerKind.RATIONAL
    if _DECIMAL_RE.match(normalized):
        try:
            return Fraction(Decimal(normalized)), AnswerKind.DECIMAL
        except (InvalidOperation, ValueError):
            return None, AnswerKind.SYMBOLIC
    return None, AnswerKind.SYMBOLIC


@dataclass(frozen=True)
class AnswerExpr:
    """A final answer in raw and normalized form.

    source_rule records which extraction rule produced the expression and is
    ignored for equality.
    """

    raw: str
    normalized: str
    kind: AnswerKind
    source_rule: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_raw(cls, raw: str, source_rule: Optional[str] = None,
                 unit_suffixes: tuple[str, ...] = DEFAULT_UNIT_SUFFIXES) -> "AnswerExpr":
        normalized = normalize_answer(raw, unit_suffixes)
        _, kind = _parse_numeric(normalized)
        return cls(raw=raw, normalized=normalized, kind=kind, source_rule=source_rule)

    @property
    def numeric_value(self) -> Optional[Fraction]:
        value, _ = _parse_numeric(self.normalized)
        return value

    @property
    def symbolic_key(self) -> str:
        return re.sub(r"\s+", "", self.normalized).casefold()

    def to_dict(self) -> dict:
        return {"raw": self.raw, "normalized": self.normalized, "kind": self.kind.value}

    @classmethod
    def from_dict(cls, d: dict) -> "AnswerExpr":
        return cls(raw=d["raw"], normalized=d["normalized"], kind=AnswerKind(d["kind"]))


def answers_equivalent(a: AnswerExpr, b: AnswerExpr) -> bool:
    """Exact equivalence: rational equality for numbers, folded-text equality otherwise."""
    if a.kind.is_numeric and b.kind.is_numeric:
        return a.numeric_value == b.numeric_value
    if a.kind.is_numeric or b.kind.is_numeric:
        return False
    return a.symbolic_key == b.symbolic_key


def _last_boxed_content(text: str) -> str:
    """Brace-balanced content of the last \\boxed{...}, or "" if none."""
    m = None
    for m in re.finditer(r"\\boxed\s*\{", text):
        pass
    if m is None:
        return ""
    depth = 1
    j = m.end()
    while j < len(text) and depth:
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
        j += 1
    return text[m.end():j - 1].strip() if depth == 0 else ""


class NoAnswerFound(Exception):
    """The solution text carries nothing to extract an answer from."""


_FINAL_ANSWER_MARKER_RE = re.compile(r"final answer:\s*", re.IGNORECASE)


def extract_final_answer(text: str) -> AnswerExpr:
    """Pull the final answer out of free-form solution text.

    The last boxed expression wins; failing that, the content after the last
    "Final answer:" marker; failing that, the last non-empty line. The rule
    that fired is recorded on the expression.
    """
    if not text.strip():
        raise NoAnswerFound("solution text is empty")
    content = _last_boxed_content(text)
    if content:
        return AnswerExpr.from_raw(content, source_rule="boxed")
    marker = None
    for marker in _FINAL_ANSWER_MARKER_RE.finditer(text):
        pass
    if marker is not None:
        rest = text[marker.end():].splitlines()
        if rest and rest[0].strip():
            return AnswerExpr.from_raw(rest[0].strip(), source_rule="final_answer_line")
    last = [ln for ln in text.splitlines() if ln.strip()][-1]
    return AnswerExpr.from_raw(last.strip(), source_rule="last_line")


class JudgeUnavailable(Exception):
    """The equivalence judge could not produce a usable verdict."""


_VERDICT_RE = re.compile(r"^verdict:\s*(equivalent|not_equivalent)\s*$", re.IGNORECASE | re.MULTILINE)

JUDGE_PURPOSE = "answer_judge"


class AnswerJudge:
    """Model-backed arbiter for answer equivalence.

    Wraps a gateway call around the judge prompt template and parses a
    single Verdict line from the reply.
    """

    def __init__(self, gateway: "ModelGateway", model_id: Optional[str] = None):
        self.gateway = gateway
        self.model_id = model_id or gateway.default_model_id
        self.template, self.template_digest = load_template("answer_judge.txt")
        self.calls = 0

    def equivalent(self, problem_statement: str, gt_answer: str, candidate_answer: str) -> bool:
        prompt = self.template.format(
            problem=problem_statement, gt_answer=gt_answer, candidate_answer=candidate_answer,
        )
        request = CompletionRequest(
            model_id=self.model_id,
            messages=(ChatMessage(role="user", content=prompt),),
            temperature=0.0,
            purpose_tag=JUDGE_PURPOSE,
        )
        self.calls += 1
        try:
            response = self.gateway.complete(request)
        except BackendError as exc:
            raise JudgeUnavailable(f"judge backend failed: {exc}") from exc
        m = _VERDICT_RE.search(response.text)
        if not m:
            raise JudgeUnavailable("judge reply had no parseable Verdict line")
        return m.group(1).lower() == "equivalent"


@dataclass(frozen=True)
class ClassifyOutcome:
    solution: "Solution"
    provenance: str  # "rule" or "judge"


def classify_solution(solution: "Solution", problem: "Problem",
                      judge: Optional[AnswerJudge] = None,
                      judge_mode: str = "off") -> ClassifyOutcome:
    """Label a solution correct/incorrect by comparing its answer to ground truth.

    judge_mode:
      off      - equivalence rule only.
      fallback - consult the judge only when the rule had to fall back to
                 string comparison and still said not equivalent; exact
                 numeric verdicts stand either way.
      always   - the judge's verdict decides every solution.
    """
    if judge_mode not in ("off", "fallback", "always"):
        raise ValueError(f"unknown judge_mode: {judge_mode!r}")
    if judge_mode != "off" and judge is None:
        raise ValueError(f"judge_mode={judge_mode!r} requires a judge")

    rule_equivalent = answers_equivalent(solution.final_answer, problem.gt_answer)
    numeric_verdict = (solution.final_answer.kind.is_numeric
                       and problem.gt_answer.kind.is_numeric)
    ask_judge = judge_mode == "always" or (
        judge_mode == "fallback" and not rule_equivalent and not numeric_verdict
    )
    if not ask_judge:
        label = SolutionLabel.CORRECT if rule_equivalent else SolutionLabel.INCORRECT
        return ClassifyOutcome(replace(solution, label=label), provenance="rule")

    verdict = judge.equivalent(
        problem.statement, problem.gt_answer.raw, solution.final_answer.raw,
    )
    label = SolutionLabel.CORRECT if verdict else SolutionLabel.INCORRECT
    return ClassifyOutcome(replace(solution, label=label), provenance="judge")
