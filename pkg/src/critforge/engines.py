"""The three critique mechanisms: direct, bug-injection, and contrastive.

Each mechanism builds a single-prompt request, sends it through the gateway,
and parses the reply into a structured critique. Parsing failures are not
fatal: the returned record carries the raw transcript plus the failure
reason so a run can account for every attempted critique.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .answers import AnswerExpr, SolutionLabel
from .domain import (
    Conclusion,
    Critique,
    MalformedCritique,
    MalformedSolutionText,
    Problem,
    Solution,
    parse_critique,
    parse_rendered_solution,
    render_solution,
)
from .gateway import ChatMessage, CompletionRequest, ModelGateway
from .pooling import CritiquePair
from .templates import load_template

logger = logging.getLogger(__name__)


class CritiqueMode(str, Enum):
    DIRECT = "direct"
    BUG = "bug"
    CONTRASTIVE = "contrastive"


class MalformedConclusion(Exception):
    """A conclusion-only reply had no single well-formed verdict line."""


class MalformedInjection(Exception):
    """A bug-injection reply could not be turned into a corrupted solution."""


@dataclass(frozen=True)
class CritiqueRecord:
    """One attempted critique, parsed or not, with full provenance."""

    mode: CritiqueMode
    problem_id: str
    target_solution_id: str
    critic_model_id: str
    transcript: str
    template_digest: str
    critique: Optional[Critique] = None
    malformed_reason: Optional[str] = None
    reference_solution_id: Optional[str] = None
    # bug-injection provenance
    original_solution_id: Optional[str] = None
    injected_step: Optional[int] = None
    injected_description: Optional[str] = None
    target_steps: tuple[str, ...] = field(default=())
    target_final_answer: str = ""
    target_label: str = SolutionLabel.UNKNOWN.value
    target_model_id: str = ""

    @property
    def parsed(self) -> bool:
        return self.critique is not None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "problem_id": self.problem_id,
            "target_solution_id": self.target_solution_id,
            "critic_model_id": self.critic_model_id,
            "transcript": self.transcript, "template_digest": self.template_digest,
            "critique": self.critique.to_dict() if self.critique else None,
            "malformed_reason": self.malformed_reason,
            "reference_solution_id": self.reference_solution_id,
            "original_solution_id": self.original_solution_id,
            "injected_step": self.injected_step,
            "injected_description": self.injected_description,
            "target_steps": list(self.target_steps),
            "target_final_answer": self.target_final_answer,
            "target_label": self.target_label,
            "target_model_id": self.target_model_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CritiqueRecord":
        return cls(
            mode=CritiqueMode(d["mode"]), problem_id=d["problem_id"],
            target_solution_id=d["target_solution_id"],
            critic_model_id=d["critic_model_id"], transcript=d["transcript"],
            template_digest=d["template_digest"],
            critique=Critique.from_dict(d["critique"]) if d.get("critique") else None,
            malformed_reason=d.get("malformed_reason"),
            reference_solution_id=d.get("reference_solution_id"),
            original_solution_id=d.get("original_solution_id"),
            injected_step=d.get("injected_step"),
            injected_description=d.get("injected_description"),
            target_steps=tuple(d.get("target_steps", ())),
            target_final_answer=d.get("target_final_answer", ""),
            target_label=d.get("target_label", SolutionLabel.UNKNOWN.value),
            target_model_id=d.get("target_model_id", ""),
        )

    def target_solution(self) -> Solution:
        """Rebuild the critiqued solution as recorded."""
        return Solution(
            id=self.target_solution_id, problem_id=self.problem_id,
            model_id=self.target_model_id, steps=self.target_steps,
            final_answer=AnswerExpr.from_raw(self.target_final_answer),
            label=SolutionLabel(self.target_label),
        )


@dataclass(frozen=True)
class BugInjection:
    modified: Solution
    injected_step: int
    description: str
    original_solution_id: str
    transcript: str


def _request(model_id: str, prompt: str, purpose_tag: str, temperature: float,
             seed: Optional[int]) -> CompletionRequest:
    return CompletionRequest(
        model_id=model_id,
        messages=(ChatMessage(role="user", content=prompt),),
        temperature=temperature, seed=seed, purpose_tag=purpose_tag,
    )


def run_direct_critic(gateway: ModelGateway, model_id: str, problem: Problem,
                      solution: Solution, temperature: float = 0.0,
                      seed: Optional[int] = None,
                      mode: CritiqueMode = CritiqueMode.DIRECT,
                      reference_solution_id: Optional[str] = None,
                      original_solution_id: Optional[str] = None,
                      injected_step: Optional[int] = None,
                      injected_description: Optional[str] = None) -> CritiqueRecord:
    """Critique a solution from the problem and the solution alone."""
    template, digest = load_template("direct_critic.txt")
    prompt = template.format(problem=problem.statement, solution=render_solution(solution))
    response = gateway.complete(_request(model_id, prompt, "direct_critic", temperature, seed))
    critique = None
    reason = None
    try:
        critique = parse_critique(response.text, target_step_count=len(solution.steps))
    except MalformedCritique as exc:
        reason = exc.reason
    return CritiqueRecord(
        mode=mode, problem_id=problem.id, target_solution_id=solution.id,
        critic_model_id=model_id, transcript=response.text, template_digest=digest,
        critique=critique, malformed_reason=reason,
        reference_solution_id=reference_solution_id,
        original_solution_id=original_solution_id, injected_step=injected_step,
        injected_description=injected_description,
        target_steps=solution.steps, target_final_answer=solution.final_answer.raw,
        target_label=solution.label.value, target_model_id=solution.model_id,
    )


def run_direct_conclusion(gateway: ModelGateway, model_id: str, problem: Problem,
                          solution_text: str, temperature: float = 0.0,
                          seed: Optional[int] = None) -> Conclusion:
    """Ask for a verdict-only judgment of a candidate solution.

    Raises MalformedConclusion unless the reply carries exactly one
    well-formed Conclusion line.
    """
    from .domain import _parse_conclusion  # shared strict line grammar

    template, _ = load_template("conclusion_only.txt")
    prompt = template.format(problem=problem.statement, solution=solution_text)
    response = gateway.complete(
        _request(model_id, prompt, "direct_conclusion", temperature, seed)
    )
    try:
        return _parse_conclusion(response.text)
    except MalformedCritique as exc:
        raise MalformedConclusion(exc.reason) from exc


_INJECTED_STEP_HEADER = "## Injected Error"
_MODIFIED_HEADER = "## Modified Solution"


def inject_bug(gateway: ModelGateway, model_id: str, problem: Problem,
               solution: Solution, temperature: float = 0.0,
               seed: Optional[int] = None) -> BugInjection:
    """Corrupt one step of a correct solution via the backend.

    Raises MalformedInjection when the reply lacks the required sections,
    names an out-of-range step, or fails to actually change the solution.
    """
    import re

    template, _ = load_template("bug_injection.txt")
    prompt = template.format(problem=problem.statement, solution=render_solution(solution))
    response = gateway.complete(_request(model_id, prompt, "bug_injection", temperature, seed))
    text = response.text

    mod_pos = text.find(_MODIFIED_HEADER)
    err_pos = text.find(_INJECTED_STEP_HEADER)
    if mod_pos < 0 or err_pos < 0 or err_pos < mod_pos:
        raise MalformedInjection("reply must contain Modified Solution then Injected Error")
    modified_body = text[mod_pos + len(_MODIFIED_HEADER):err_pos]
    error_body = text[err_pos + len(_INJECTED_STEP_HEADER):]

    try:
        steps, final_answer = parse_rendered_solution(modified_body)
    except MalformedSolutionText as exc:
        raise MalformedInjection(f"bad modified solution: {exc}") from exc

    m_step = re.search(r"^Step:\s*(\d+)\s*$", error_body, re.MULTILINE)
    m_desc = re.search(r"^Description:\s*(.+)$", error_body, re.MULTILINE)
    if not m_step or not m_desc:
        raise MalformedInjection("injected-error section must name a Step and a Description")
    injected_step = int(m_step.group(1))
    if not (1 <= injected_step <= len(steps)):
        raise MalformedInjection(
            f"injected step {injected_step} is outside the {len(steps)}-step solution"
        )
    if steps == solution.steps and final_answer == solution.final_answer.raw:
        raise MalformedInjection("modified solution is identical to the original")

    modified = Solution(
        id=f"{solution.id}#bug", problem_id=solution.problem_id,
        model_id=solution.model_id, steps=steps,
        final_answer=AnswerExpr.from_raw(final_answer),
        label=SolutionLabel.INCORRECT,
    )
    return BugInjection(
        modified=modified, injected_step=injected_step,
        description=m_desc.group(1).strip(),
        original_solution_id=solution.id, transcript=text,
    )


def run_bug_injection_critic(gateway: ModelGateway, model_id: str, problem: Problem,
                             solution: Solution, temperature: float = 0.0,
                             seed: Optional[int] = None) -> CritiqueRecord:
    """Corrupt a correct solution, then critique the corrupted version."""
    try:
        injection = inject_bug(gateway, model_id, problem, solution,
                               temperature=temperature, seed=seed)
    except MalformedInjection as exc:
        return CritiqueRecord(
            mode=CritiqueMode.BUG, problem_id=problem.id,
            target_solution_id=f"{solution.id}#bug", critic_model_id=model_id,
            transcript="", template_digest="",
            malformed_reason=f"injection failed: {exc}",
            original_solution_id=solution.id,
            target_steps=solution.steps, target_final_answer=solution.final_answer.raw,
            target_label=SolutionLabel.UNKNOWN.value,
            target_model_id=solution.model_id,
        )
    return run_direct_critic(
        gateway, model_id, problem, injection.modified,
        temperature=temperature, seed=seed, mode=CritiqueMode.BUG,
        original_solution_id=injection.original_solution_id,
        injected_step=injection.injected_step,
        injected_description=injection.description,
    )


def run_contrastive_critic(gateway: ModelGateway, model_id: str, problem: Problem,
                           pair: CritiquePair, temperature: float = 0.0,
                           seed: Optional[int] = None) -> CritiqueRecord:
    """Reference-guided critique: analysis, step verdicts, conclusion, and
    correction are produced in one four-stage prompt.

    The stage-1 reference analysis must be present in the reply; it stays on
    the parsed critique for auditing but is excluded from rendered transcripts.
    """
    template, digest = load_template("contrastive_critic.txt")
    prompt = template.format(
        problem=problem.statement,
        reference_solution=render_solution(pair.reference),
        target_solution=render_solution(pair.target),
    )
    response = gateway.complete(
        _request(model_id, prompt, "contrastive_critic", temperature, seed)
    )
    critique = None
    reason = None
    try:
        critique = parse_critique(response.text, target_step_count=len(pair.target.steps))
        if not (critique.reference_analysis or "").strip():
            critique = None
            reason = "missing stage-1 reference analysis"
    except MalformedCritique as exc:
        reason = exc.reason
    return CritiqueRecord(
        mode=CritiqueMode.CONTRASTIVE, problem_id=problem.id,
        target_solution_id=pair.target.id, critic_model_id=model_id,
        transcript=response.text, template_digest=digest,
        critique=critique, malformed_reason=reason,
        reference_solution_id=pair.reference.id,
        target_steps=pair.target.steps,
        target_final_answer=pair.target.final_answer.raw,
        target_label=pair.target.label.value,
        target_model_id=pair.target.model_id,
    )
