"""critforge: synthesize, validate, and export critique training data for
step-by-step math solutions, and score critic models on held-out sets."""

__version__ = "0.1.0"

from .answers import (AnswerExpr, NoAnswerFound, SolutionLabel, answers_equivalent,
                      extract_final_answer)
from .domain import (
    Conclusion,
    Correction,
    Critique,
    MalformedCritique,
    Problem,
    Solution,
    StepCritique,
    StepVerdict,
    parse_critique,
    render_critique,
    render_solution,
)
from .pooling import (
    CritiquePair,
    InsufficientItems,
    ProblemPool,
    build_pools,
    filter_valid_problems,
    make_pairs,
    problem_complexity,
    sample_balanced,
)

__all__ = [
    "AnswerExpr", "NoAnswerFound", "SolutionLabel", "answers_equivalent",
    "extract_final_answer",
    "Conclusion", "Correction", "Critique", "MalformedCritique", "Problem",
    "Solution", "StepCritique", "StepVerdict", "parse_critique",
    "render_critique", "render_solution",
    "CritiquePair", "InsufficientItems", "ProblemPool", "build_pools",
    "filter_valid_problems", "make_pairs", "problem_complexity", "sample_balanced",
    "__version__",
]
