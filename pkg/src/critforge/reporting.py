"""Run statistics: validation-rate breakdowns, error-position histograms,
evaluation tables, and their CSV/JSON/figure renderings."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .domain import Problem
from .engines import CritiqueRecord
from .harness import ScoredResult, cc_accuracy, compute_f1
from .io_utils import SCHEMA_VERSION, write_json
from .pooling import ProblemPool, problem_complexity
from .validation import ValidatedTriplet

logger = logging.getLogger(__name__)


def _rate_rows(triplets: Sequence[ValidatedTriplet], key_of) -> list[dict]:
    """Group triplets by a key and compute per-group acceptance rates."""
    totals: Counter = Counter()
    parsed: Counter = Counter()
    accepted: Counter = Counter()
    for t in triplets:
        key = key_of(t)
        if key is None:
            continue
        totals[key] += 1
        if t.record.parsed:
            parsed[key] += 1
        if t.accepted:
            accepted[key] += 1
    rows = []
    for key in sorted(totals, key=str):
        rows.append({
            "key": key, "total": totals[key], "parsed": parsed[key],
            "accepted": accepted[key],
            "rate": accepted[key] / totals[key],
        })
    return rows


def validation_breakdowns(problems: Sequence[Problem], pools: Sequence[ProblemPool],
                          triplets: Sequence[ValidatedTriplet]) -> dict[str, list[dict]]:
    """Acceptance-rate tables along problem source, difficulty, and the model
    that generated the critiqued solution.

    Difficulty is the pool's count of distinct answer-equivalence classes;
    every attempted critique counts in the denominator, parsed or not.
    """
    source_by_problem = {p.id: p.source for p in problems}
    complexity_by_problem = {pool.problem_id: problem_complexity(pool) for pool in pools}
    return {
        "by_source": _rate_rows(triplets, lambda t: source_by_problem.get(t.record.problem_id)),
        "by_complexity": _rate_rows(
            triplets, lambda t: complexity_by_problem.get(t.record.problem_id)),
        "by_model": _rate_rows(triplets, lambda t: t.record.target_model_id or None),
    }


def error_position_histogram(records: Sequence[CritiqueRecord]) -> list[dict]:
    """Normalized distribution of first-error steps flagged by the critic.

    Rows are {step, count, fraction}; fractions sum to 1 when any parsed
    critique flags an error.
    """
    counts: Counter = Counter()
    for r in records:
        if r.critique is not None and not r.critique.conclusion.solution_correct:
            counts[r.critique.conclusion.first_error_step] += 1
    total = sum(counts.values())
    return [
        {"step": step, "count": counts[step], "fraction": counts[step] / total}
        for step in sorted(counts)
    ]


def cc_accuracy_table(scored: Sequence[ScoredResult]) -> list[dict]:
    """Accuracy by (source, scenario) plus an overall row."""
    groups: dict[tuple[str, str], list[ScoredResult]] = {}
    for s in scored:
        groups.setdefault((s.source, s.scenario), []).append(s)
    rows = [
        {"source": source, "scenario": scenario, "n": len(group),
         "accuracy": cc_accuracy(group)}
        for (source, scenario), group in sorted(groups.items())
    ]
    rows.append({"source": "__all__", "scenario": "__all__", "n": len(scored),
                 "accuracy": cc_accuracy(scored)})
    return rows


def f1_table(scored: Sequence[ScoredResult]) -> list[dict]:
    """Error-identification F1 by source plus an overall row."""
    groups: dict[str, list[ScoredResult]] = {}
    for s in scored:
        groups.setdefault(s.source, []).append(s)
    rows = []
    for source, group in sorted(groups.items()):
        rows.append({"source": source, **compute_f1(group).to_dict()})
    rows.append({"source": "__all__", **compute_f1(scored).to_dict()})
    return rows


def _write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _save_figure(fig, path: Path) -> None:
    # Strip mutable metadata so repeated runs write identical bytes.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def _plot_validation_rates(breakdowns: dict[str, list[dict]], path: Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    titles = {"by_source": "by source", "by_complexity": "by distinct answers",
              "by_model": "by critic model"}
    for ax, name in zip(axes, ("by_source", "by_complexity", "by_model")):
        rows = breakdowns[name]
        labels = [str(r["key"]) for r in rows]
        ax.barh(range(len(rows)), [r["rate"] for r in rows], color="#4878b0")
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels(labels, fontsize=8)
        ax.set_xlim(0, 1)
        ax.set_xlabel("acceptance rate")
        ax.set_title(f"Validation rate {titles[name]}", fontsize=10)
        ax.invert_yaxis()
    fig.tight_layout()
    _save_figure(fig, path)


def _plot_error_positions(hist: Sequence[dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["step"] for r in hist], [r["fraction"] for r in hist], color="#b04848")
    ax.set_xlabel("first error step flagged")
    ax.set_ylabel("fraction of flagged critiques")
    ax.set_title("Where the critic places first errors", fontsize=10)
    if hist:
        ax.set_xticks([r["step"] for r in hist])
    fig.tight_layout()
    _save_figure(fig, path)


def build_reports(outdir: str | Path,
                  problems: Sequence[Problem],
                  pools: Sequence[ProblemPool],
                  records: Sequence[CritiqueRecord],
                  triplets: Sequence[ValidatedTriplet],
                  scored_cc: Optional[Sequence[ScoredResult]] = None,
                  scored_ei: Optional[Sequence[ScoredResult]] = None,
                  extra_counts: Optional[dict] = None) -> dict:
    """Write the full report bundle (JSON summary, CSV tables, PNG figures).

    Returns the summary dict that was written to summary.json.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    breakdowns = validation_breakdowns(problems, pools, triplets)
    hist = error_position_histogram(records)

    summary: dict = {
        "schema_version": SCHEMA_VERSION,
        "counts": {
            "problems": len(problems), "valid_pools": len(pools),
            "critique_records": len(records),
            "parsed_records": sum(1 for r in records if r.parsed),
            "validated": len(triplets),
            "accepted": sum(1 for t in triplets if t.accepted),
        },
        "validation_rates": breakdowns,
        "error_position_histogram": hist,
    }
    if extra_counts:
        summary["counts"].update(extra_counts)

    for name in ("by_source", "by_complexity", "by_model"):
        _write_csv(outdir / f"validation_{name}.csv", breakdowns[name],
                   ("key", "total", "parsed", "accepted", "rate"))
    _write_csv(outdir / "error_positions.csv", hist, ("step", "count", "fraction"))
    _plot_validation_rates(breakdowns, outdir / "validation_rates.png")
    _plot_error_positions(hist, outdir / "error_positions.png")

    if scored_cc is not None:
        cc_rows = cc_accuracy_table(scored_cc)
        _write_csv(outdir / "eval_cc_accuracy.csv", cc_rows,
                   ("source", "scenario", "n", "accuracy"))
        summary["cc_accuracy"] = cc_rows
    if scored_ei is not None:
        ei_rows = f1_table(scored_ei)
        _write_csv(outdir / "eval_ei_f1.csv", ei_rows,
                   ("source", "n_incorrect", "n_correct",
                    "acc_incorrect", "acc_correct", "f1"))
        summary["ei_f1"] = ei_rows

    write_json(outdir / "summary.json", summary)
    return summary
