"""Grouping solutions into per-problem pools and drawing critique pairs.

A problem is usable for reference-guided critique synthesis only when its
pool has at least one correct and at least one incorrect solution; pairing
draws one uniform-random correct reference per target under a seeded RNG so
the same seed always yields the same pairs.
"""
from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, TypeVar

from .answers import SolutionLabel, answers_equivalent
from .domain import Problem, Solution

logger = logging.getLogger(__name__)

T = TypeVar("T")


class UnclassifiedSolution(Exception):
    """A solution reached pooling without a correct/incorrect label."""


class InsufficientItems(Exception):
    """A balanced sample cannot meet its quota at the requested total."""

    def __init__(self, requested_total: int, max_total: int,
                 available_good: int, available_bad: int):
        self.requested_total = requested_total
        self.max_total = max_total
        self.available_good = available_good
        self.available_bad = available_bad
        super().__init__(
            f"cannot draw {requested_total} items at the requested ratio "
            f"from {available_good} good / {available_bad} bad; "
            f"the achievable maximum is {max_total}"
        )


@dataclass(frozen=True)
class ProblemPool:
    problem_id: str
    correct: tuple[Solution, ...]
    incorrect: tuple[Solution, ...]

    @property
    def solutions(self) -> tuple[Solution, ...]:
        return self.correct + self.incorrect

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "correct": [s.id for s in self.correct],
            "incorrect": [s.id for s in self.incorrect],
        }


class PairKind(str, Enum):
    CORRECT_INCORRECT = "correct_incorrect"
    CORRECT_CORRECT = "correct_correct"


@dataclass(frozen=True)
class CritiquePair:
    problem_id: str
    target: Solution
    reference: Solution
    kind: PairKind

    def __post_init__(self):
        if self.target.problem_id != self.problem_id or self.reference.problem_id != self.problem_id:
            raise ValueError("pair members must belong to the pair's problem")
        if self.reference.label is not SolutionLabel.CORRECT:
            raise ValueError("the reference solution must be labeled correct")
        if self.reference.id == self.target.id:
            raise ValueError("a solution cannot reference itself")

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id, "target_solution_id": self.target.id,
            "reference_solution_id": self.reference.id, "kind": self.kind.value,
        }


def build_pools(problems: Sequence[Problem], solutions: Sequence[Solution],
                cap_per_model_per_category: Optional[int] = None,
                seed: int = 0) -> list[ProblemPool]:
    """Group labeled solutions into per-problem pools.

    When a (model, category) pair contributes more than the cap globally, a
    seeded uniform sample of exactly cap solutions from that pair is retained;
    the same seed retains the same solutions.
    """
    problem_ids = {p.id for p in problems}
    for sol in solutions:
        if sol.problem_id not in problem_ids:
            raise ValueError(f"solution {sol.id} references unknown problem {sol.problem_id}")
        if sol.label is SolutionLabel.UNKNOWN:
            raise UnclassifiedSolution(f"solution {sol.id} has no correct/incorrect label")

    retained = list(solutions)
    if cap_per_model_per_category is not None:
        groups: dict[tuple[str, str], list[Solution]] = {}
        for sol in solutions:
            groups.setdefault((sol.model_id, sol.label.value), []).append(sol)
        keep_ids: set[str] = set()
        for (model_id, category), group in sorted(groups.items()):
            group = sorted(group, key=lambda s: s.id)
            if len(group) <= cap_per_model_per_category:
                keep_ids.update(s.id for s in group)
                continue
            rng = random.Random(f"{seed}|cap|{model_id}|{category}")
            sampled = rng.sample(group, cap_per_model_per_category)
            keep_ids.update(s.id for s in sampled)
            logger.info("capped %s/%s from %d to %d solutions",
                        model_id, category, len(group), cap_per_model_per_category)
        retained = [s for s in solutions if s.id in keep_ids]

    by_problem: dict[str, list[Solution]] = {}
    for sol in retained:
        by_problem.setdefault(sol.problem_id, []).append(sol)

    pools = []
    for problem_id in sorted(by_problem):
        members = sorted(by_problem[problem_id], key=lambda s: s.id)
        pools.append(ProblemPool(
            problem_id=problem_id,
            correct=tuple(s for s in members if s.label is SolutionLabel.CORRECT),
            incorrect=tuple(s for s in members if s.label is SolutionLabel.INCORRECT),
        ))
    return pools


def filter_valid_problems(pools: Sequence[ProblemPool]) -> list[ProblemPool]:
    """Keep only pools holding at least one correct and one incorrect solution."""
    return [p for p in pools if p.correct and p.incorrect]


def problem_complexity(pool: ProblemPool) -> int:
    """Number of distinct answer-equivalence classes across the pool's solutions.

    More distinct final answers means models disagree more, which serves as a
    difficulty proxy for the problem.
    """
    representatives = []
    for sol in sorted(pool.solutions, key=lambda s: s.id):
        if not any(answers_equivalent(sol.final_answer, rep) for rep in representatives):
            representatives.append(sol.final_answer)
    return len(representatives)


def make_pairs(pool: ProblemPool, seed: int = 0) -> list[CritiquePair]:
    """Draw critique pairs for one valid pool.

    Every incorrect solution becomes a target with one uniform-random correct
    reference. When the pool has two or more correct solutions, every correct
    solution additionally becomes a target with a distinct correct reference.
    """
    if not pool.correct or not pool.incorrect:
        raise ValueError(f"pool {pool.problem_id} is not valid for pairing")
    rng = random.Random(f"{seed}|pair|{pool.problem_id}")
    pairs = []
    for target in pool.incorrect:
        reference = rng.choice(pool.correct)
        pairs.append(CritiquePair(pool.problem_id, target, reference,
                                  PairKind.CORRECT_INCORRECT))
    if len(pool.correct) >= 2:
        for target in pool.correct:
            candidates = [c for c in pool.correct if c.id != target.id]
            reference = rng.choice(candidates)
            pairs.append(CritiquePair(pool.problem_id, target, reference,
                                      PairKind.CORRECT_CORRECT))
    return pairs


def _good_fraction(ratio: tuple[float, float]) -> Fraction:
    wg, wb = ratio
    if wg <= 0 or wb <= 0:
        raise ValueError(f"ratio weights must be positive, got {ratio}")
    # str() round trip turns 0.75 into 3/4 rather than its binary expansion
    fg = Fraction(str(wg))
    return fg / (fg + Fraction(str(wb)))


def max_feasible_total(n_good: int, n_bad: int, ratio: tuple[float, float]) -> int:
    """Largest total that hits the ratio exactly with the available items."""
    fg = _good_fraction(ratio)
    bound = min(Fraction(n_good) / fg, Fraction(n_bad) / (1 - fg))
    total = int(bound)  # floor
    return max(total - total % fg.denominator, 0)


def sample_balanced(good: Sequence[T], bad: Sequence[T], ratio: tuple[float, float],
                    total: int, seed: int = 0) -> list[T]:
    """Draw a seeded sample of `total` items at exactly the good:bad ratio.

    The quotas are total * wg/(wg+wb) and total * wb/(wg+wb); a total that
    cannot split exactly at the ratio raises ValueError naming the nearest
    totals that can. When a side cannot fill its quota, InsufficientItems
    reports the largest exactly-splittable total that would fit. Output
    preserves the input order of the selected items, good items first.
    """
    fg = _good_fraction(ratio)
    if total < 0:
        raise ValueError("total must be >= 0")
    quota = total * fg
    if quota.denominator != 1:
        step = fg.denominator
        lower = total - total % step
        raise ValueError(
            f"total {total} cannot hit the ratio {ratio[0]}:{ratio[1]} exactly; "
            f"nearest feasible totals are {lower} and {lower + step}"
        )
    n_good_quota = int(quota)
    n_bad_quota = total - n_good_quota
    if n_good_quota > len(good) or n_bad_quota > len(bad):
        raise InsufficientItems(
            requested_total=total,
            max_total=max_feasible_total(len(good), len(bad), ratio),
            available_good=len(good), available_bad=len(bad),
        )
    rng = random.Random(f"{seed}|balanced")
    good_idx = sorted(rng.sample(range(len(good)), n_good_quota))
    bad_idx = sorted(rng.sample(range(len(bad)), n_bad_quota))
    return [good[i] for i in good_idx] + [bad[i] for i in bad_idx]
