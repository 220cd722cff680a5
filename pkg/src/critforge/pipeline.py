"""Stage orchestration: run the synthesis/eval pipeline round by round.

Every stage reads only declared inputs, writes its artifacts under
output_dir/round-N/<stage>/, and leaves a manifest recording counts, seeds,
and content digests of everything it read and wrote. Manifests carry no
timestamps or absolute paths, so a rerun with the same inputs and seeds
reproduces them byte for byte.
"""
from __future__ import annotations

import logging
import os
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Optional, Sequence

from .answers import AnswerJudge, JudgeUnavailable, SolutionLabel, classify_solution
from .config import ConfigInvalid, PipelineConfig
from .domain import Problem, Solution
from .engines import (
    CritiqueMode,
    CritiqueRecord,
    run_bug_injection_critic,
    run_contrastive_critic,
    run_direct_critic,
)
from .gateway import (
    MockBackend,
    MockScript,
    MockScriptError,
    ModelGateway,
    OpenAICompatBackend,
)
from .harness import (
    Protocol,
    ScoredResult,
    critique_eval_record,
    load_eval_records,
    score_critic_correct,
    score_error_identification,
)
from .io_utils import SCHEMA_VERSION, read_jsonl, sha256_file, write_json, write_jsonl
from .pooling import CritiquePair, PairKind, ProblemPool, build_pools, filter_valid_problems, make_pairs
from .reporting import build_reports
from .templates import load_template
from .validation import ValidatedTriplet, build_training_instance, export_sft, self_validate

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "classify", "pool", "pair", "critic",
               "validate", "export", "eval", "report")


class PipelineError(Exception):
    """A stage could not complete."""


class MissingInput(PipelineError):
    """A stage's declared input artifact is absent."""


def build_gateway(config: PipelineConfig) -> ModelGateway:
    """Construct the gateway described by the config, cache under output_dir."""
    backend_cfg = config.backend
    if backend_cfg.kind == "mock":
        try:
            script = MockScript.from_file(backend_cfg.mock_script)
        except MockScriptError as exc:
            raise ConfigInvalid(f"invalid mock script: {exc}") from exc
        backend = MockBackend(script)
    else:
        api_key = backend_cfg.api_key()
        if backend_cfg.api_key_env and api_key is None:
            raise ConfigInvalid(
                f"backend.api_key_env names {backend_cfg.api_key_env!r} "
                "but that environment variable is not set"
            )
        backend = OpenAICompatBackend(
            endpoint=backend_cfg.endpoint, api_key=api_key, timeout=backend_cfg.timeout,
        )
    return ModelGateway(
        backend, cache_dir=config.output_dir / "cache",
        max_attempts=backend_cfg.max_attempts, concurrency=backend_cfg.concurrency,
        default_model_id=backend_cfg.model_id,
    )


class PipelineRunner:
    """Executes stages for one round of one configured run."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.round_dir = config.round_dir()
        self.model_id = config.model_id_for_round(config.round)
        self._gateway: Optional[ModelGateway] = None

    @property
    def gateway(self) -> ModelGateway:
        if self._gateway is None:
            self._gateway = build_gateway(self.config)
        return self._gateway

    # -- helpers -------------------------------------------------------------

    def _stage_dir(self, stage: str) -> Path:
        d = self.round_dir / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _need(self, stage: str, producer: str, filename: str) -> Path:
        path = self.round_dir / producer / filename
        if not path.exists():
            raise MissingInput(
                f"stage {stage!r} needs {producer}/{filename}; run the {producer!r} stage first"
            )
        return path

    def _manifest(self, stage: str, inputs: dict[str, Path], counts: dict,
                  seeds: Optional[dict] = None, outputs: Optional[Sequence[str]] = None,
                  template_digests: Optional[dict] = None, uses_model: bool = False) -> None:
        stage_dir = self._stage_dir(stage)
        out_files = sorted(
            p.name for p in stage_dir.iterdir()
            if p.is_file() and p.name != "manifest.json"
        ) if outputs is None else list(outputs)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "stage": stage,
            "round": self.config.round,
            "inputs": {name: sha256_file(path) for name, path in sorted(inputs.items())},
            "outputs": {name: sha256_file(stage_dir / name) for name in out_files},
            "counts": dict(sorted(counts.items())),
            "seeds": dict(sorted((seeds or {}).items())),
        }
        if uses_model:
            manifest["model_id"] = self.model_id
        if template_digests:
            manifest["template_digests"] = dict(sorted(template_digests.items()))
        write_json(stage_dir / "manifest.json", manifest)

    def _map_ordered(self, fn: Callable, items: Sequence) -> list:
        workers = self.config.backend.concurrency
        if workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))

    def _item_seed(self, stage: str, key: str) -> Optional[int]:
        if self.config.critic_temperature == 0.0:
            return None
        return random.Random(f"{self.config.seed}|{stage}|{key}").randrange(2 ** 31)

    def _load_problems(self) -> dict[str, Problem]:
        path = self._need("*", "ingest", "problems.jsonl")
        return {p.id: p for p in (Problem.from_dict(row) for row in read_jsonl(path))}

    def _load_labeled_solutions(self) -> dict[str, Solution]:
        path = self._need("*", "classify", "solutions.jsonl")
        return {s.id: s for s in (Solution.from_dict(row) for row in read_jsonl(path))}

    def _load_pools(self, solutions: dict[str, Solution]) -> list[ProblemPool]:
        path = self._need("*", "pool", "pools.jsonl")
        pools = []
        for row in read_jsonl(path):
            pools.append(ProblemPool(
                problem_id=row["problem_id"],
                correct=tuple(solutions[sid] for sid in row["correct"]),
                incorrect=tuple(solutions[sid] for sid in row["incorrect"]),
            ))
        return pools

    # -- stages --------------------------------------------------------------

    def stage_ingest(self) -> dict:
        cfg = self.config
        problems: list[Problem] = []
        seen_p: set[str] = set()
        for row in read_jsonl(cfg.problems_path):
            try:
                problem = Problem.from_dict(row)
            except (KeyError, ValueError) as exc:
                raise PipelineError(f"ingest: bad problem row {row.get('id')!r}: {exc}") from exc
            if problem.id in seen_p:
                raise PipelineError(f"ingest: duplicate problem id {problem.id!r}")
            seen_p.add(problem.id)
            problems.append(problem)

        solutions: list[Solution] = []
        seen_s: set[str] = set()
        for row in read_jsonl(cfg.solutions_path):
            try:
                row = dict(row)
                row["label"] = SolutionLabel.UNKNOWN.value
                solution = Solution.from_dict(row)
            except (KeyError, ValueError) as exc:
                raise PipelineError(f"ingest: bad solution row {row.get('id')!r}: {exc}") from exc
            if solution.id in seen_s:
                raise PipelineError(f"ingest: duplicate solution id {solution.id!r}")
            if solution.problem_id not in seen_p:
                raise PipelineError(
                    f"ingest: solution {solution.id!r} references unknown problem "
                    f"{solution.problem_id!r}"
                )
            seen_s.add(solution.id)
            solutions.append(solution)

        stage_dir = self._stage_dir("ingest")
        problems.sort(key=lambda p: p.id)
        solutions.sort(key=lambda s: s.id)
        write_jsonl(stage_dir / "problems.jsonl", (p.to_dict() for p in problems))
        write_jsonl(stage_dir / "solutions.jsonl", (s.to_dict() for s in solutions))
        counts = {"problems": len(problems), "solutions": len(solutions)}
        self._manifest(
            "ingest",
            inputs={"problems_corpus": cfg.problems_path, "solutions_corpus": cfg.solutions_path},
            counts=counts,
        )
        return counts

    def stage_classify(self) -> dict:
        problems = self._load_problems()
        solutions_path = self._need("classify", "ingest", "solutions.jsonl")
        solutions = [Solution.from_dict(row) for row in read_jsonl(solutions_path)]

        judge = None
        if self.config.judge_mode != "off":
            judge = AnswerJudge(self.gateway,
                                model_id=self.config.judge_model_id or self.model_id)
        rows = []
        counts: Counter = Counter()
        for solution in solutions:
            problem = problems.get(solution.problem_id)
            if problem is None:
                raise PipelineError(
                    f"classify: solution {solution.id!r} references unknown problem"
                )
            try:
                outcome = classify_solution(solution, problem, judge=judge,
                                            judge_mode=self.config.judge_mode)
            except JudgeUnavailable as exc:
                raise PipelineError(f"classify: judge failed on {solution.id!r}: {exc}") from exc
            row = outcome.solution.to_dict()
            row["label_provenance"] = outcome.provenance
            rows.append(row)
            counts[outcome.solution.label.value] += 1
            if outcome.provenance == "judge":
                counts["judge_labeled"] += 1

        stage_dir = self._stage_dir("classify")
        write_jsonl(stage_dir / "solutions.jsonl", rows)
        counts_d = dict(counts)
        self._manifest(
            "classify",
            inputs={"problems": self.round_dir / "ingest" / "problems.jsonl",
                    "solutions": solutions_path},
            counts=counts_d, uses_model=self.config.judge_mode != "off",
        )
        return counts_d

    def stage_pool(self) -> dict:
        problems = self._load_problems()
        solutions = self._load_labeled_solutions()
        pools = build_pools(
            list(problems.values()), list(solutions.values()),
            cap_per_model_per_category=self.config.cap_per_model_per_category,
            seed=self.config.seed,
        )
        valid = filter_valid_problems(pools)
        from .pooling import problem_complexity

        rows = []
        for pool in valid:
            row = pool.to_dict()
            row["complexity"] = problem_complexity(pool)
            rows.append(row)
        stage_dir = self._stage_dir("pool")
        write_jsonl(stage_dir / "pools.jsonl", rows)
        counts = {
            "pools_total": len(pools), "pools_valid": len(valid),
            "correct_solutions": sum(len(p.correct) for p in valid),
            "incorrect_solutions": sum(len(p.incorrect) for p in valid),
        }
        self._manifest(
            "pool",
            inputs={"problems": self.round_dir / "ingest" / "problems.jsonl",
                    "solutions": self.round_dir / "classify" / "solutions.jsonl"},
            counts=counts, seeds={"pool": self.config.seed},
        )
        return counts

    def stage_pair(self) -> dict:
        solutions = self._load_labeled_solutions()
        pools = self._load_pools(solutions)
        pairs: list[CritiquePair] = []
        for pool in pools:
            pairs.extend(make_pairs(pool, seed=self.config.seed))
        stage_dir = self._stage_dir("pair")
        write_jsonl(stage_dir / "pairs.jsonl", (p.to_dict() for p in pairs))
        counts = {
            "pairs": len(pairs),
            "correct_incorrect": sum(1 for p in pairs if p.kind is PairKind.CORRECT_INCORRECT),
            "correct_correct": sum(1 for p in pairs if p.kind is PairKind.CORRECT_CORRECT),
        }
        self._manifest(
            "pair",
            inputs={"pools": self.round_dir / "pool" / "pools.jsonl",
                    "solutions": self.round_dir / "classify" / "solutions.jsonl"},
            counts=counts, seeds={"pair": self.config.seed},
        )
        return counts

    def stage_critic(self) -> dict:
        cfg = self.config
        mode = CritiqueMode(cfg.critic_mode)
        problems = self._load_problems()
        solutions = self._load_labeled_solutions()
        temperature = cfg.critic_temperature
        inputs = {"problems": self.round_dir / "ingest" / "problems.jsonl"}

        if mode is CritiqueMode.CONTRASTIVE:
            pairs_path = self._need("critic", "pair", "pairs.jsonl")
            inputs["pairs"] = pairs_path
            work = []
            for row in read_jsonl(pairs_path):
                pair = CritiquePair(
                    problem_id=row["problem_id"],
                    target=solutions[row["target_solution_id"]],
                    reference=solutions[row["reference_solution_id"]],
                    kind=PairKind(row["kind"]),
                )
                work.append(pair)

            def run(pair: CritiquePair) -> CritiqueRecord:
                return run_contrastive_critic(
                    self.gateway, self.model_id, problems[pair.problem_id], pair,
                    temperature=temperature,
                    seed=self._item_seed("critic", pair.target.id),
                )
            template_name = "contrastive_critic.txt"
        else:
            pools = self._load_pools(solutions)
            inputs["pools"] = self.round_dir / "pool" / "pools.jsonl"
            if mode is CritiqueMode.DIRECT:
                work = [s for pool in pools for s in pool.solutions]

                def run(solution: Solution) -> CritiqueRecord:
                    return run_direct_critic(
                        self.gateway, self.model_id, problems[solution.problem_id],
                        solution, temperature=temperature,
                        seed=self._item_seed("critic", solution.id),
                    )
            else:
                work = [s for pool in pools for s in pool.correct]

                def run(solution: Solution) -> CritiqueRecord:
                    return run_bug_injection_critic(
                        self.gateway, self.model_id, problems[solution.problem_id],
                        solution, temperature=temperature,
                        seed=self._item_seed("critic", solution.id),
                    )
            template_name = "direct_critic.txt"

        records = self._map_ordered(run, work)
        stage_dir = self._stage_dir("critic")
        write_jsonl(stage_dir / "records.jsonl", (r.to_dict() for r in records))
        counts = {
            "records": len(records),
            "parsed": sum(1 for r in records if r.parsed),
            "malformed": sum(1 for r in records if not r.parsed),
            "mode": mode.value,
        }
        _, template_digest = load_template(template_name)
        self._manifest(
            "critic", inputs=inputs, counts=counts,
            seeds={"base": cfg.seed, "temperature": temperature},
            template_digests={template_name: template_digest}, uses_model=True,
        )
        logger.info("critic stage: %d records, %d parsed", len(records), counts["parsed"])
        return counts

    def stage_validate(self) -> dict:
        problems = self._load_problems()
        records_path = self._need("validate", "critic", "records.jsonl")
        records = [CritiqueRecord.from_dict(row) for row in read_jsonl(records_path)]

        def run(record: CritiqueRecord) -> ValidatedTriplet:
            return self_validate(
                self.gateway, self.model_id, problems[record.problem_id], record,
                strict_answer_check=self.config.strict_answer_check,
                seed=self._item_seed("validate", record.target_solution_id),
            )

        triplets = self._map_ordered(run, records)
        stage_dir = self._stage_dir("validate")
        write_jsonl(stage_dir / "triplets.jsonl", (t.to_dict() for t in triplets))
        reasons = Counter(t.reason for t in triplets)
        counts = {
            "validated": len(triplets),
            "accepted": sum(1 for t in triplets if t.accepted),
            **{f"reason_{k}": v for k, v in sorted(reasons.items())},
        }
        _, digest = load_template("conclusion_only.txt")
        self._manifest(
            "validate",
            inputs={"records": records_path,
                    "problems": self.round_dir / "ingest" / "problems.jsonl"},
            counts=counts, template_digests={"conclusion_only.txt": digest},
            uses_model=True,
        )
        return counts

    def stage_export(self) -> dict:
        problems = self._load_problems()
        triplets_path = self._need("export", "validate", "triplets.jsonl")
        accepted = [
            ValidatedTriplet.from_dict(row)
            for row in read_jsonl(triplets_path)
            if row["accepted"]
        ]
        instances = [
            build_training_instance(problems[t.record.problem_id], t.record)
            for t in accepted
        ]
        stage_dir = self._stage_dir("export")
        report = export_sft(
            instances, stage_dir / "sft.jsonl",
            ratio=self.config.export_ratio, total=self.config.export_total,
            seed=self.config.seed,
        )
        report_d = report.to_dict()
        report_d["schema_version"] = SCHEMA_VERSION
        write_json(stage_dir / "export_report.json", report_d)
        counts = {"accepted_in": len(accepted), "written": report.written,
                  "conclusion_correct": report.n_conclusion_correct,
                  "conclusion_incorrect": report.n_conclusion_incorrect}
        self._manifest(
            "export",
            inputs={"triplets": triplets_path,
                    "problems": self.round_dir / "ingest" / "problems.jsonl"},
            counts=counts, seeds={"export": self.config.seed},
        )
        return counts

    def stage_eval(self) -> dict:
        cfg = self.config
        if cfg.eval_records_path is None:
            raise MissingInput("eval stage needs 'eval_records' in the config")
        protocol = Protocol(cfg.eval_protocol)
        records = load_eval_records(cfg.eval_records_path)
        if protocol is Protocol.EI:
            missing = [r.id for r in records if r.gt_first_error_step is None]
            if missing:
                raise PipelineError(
                    f"eval: protocol 'ei' needs gt_first_error_step on every record; "
                    f"missing on {missing[:5]}"
                )

        def run(record):
            return critique_eval_record(
                self.gateway, self.model_id, record,
                temperature=cfg.critic_temperature,
                seed=self._item_seed("eval", record.id),
            )

        critiques = self._map_ordered(run, records)
        scored: list[ScoredResult] = []
        for record, crit in zip(records, critiques):
            if protocol is Protocol.CC:
                scored.append(score_critic_correct(record, crit))
            else:
                scored.append(score_error_identification(record, crit))

        stage_dir = self._stage_dir("eval")
        write_jsonl(stage_dir / "critiques.jsonl", (c.to_dict() for c in critiques))
        write_jsonl(stage_dir / "scored.jsonl", (s.to_dict() for s in scored))

        summary: dict = {"schema_version": SCHEMA_VERSION, "protocol": protocol.value,
                         "n_records": len(records)}
        if protocol is Protocol.CC:
            from .harness import cc_accuracy
            from .reporting import cc_accuracy_table
            summary["cc_accuracy"] = cc_accuracy(scored)
            summary["by_group"] = cc_accuracy_table(scored)
        else:
            from .harness import compute_f1
            from .reporting import f1_table
            summary["f1"] = compute_f1(scored).to_dict()
            summary["by_source"] = f1_table(scored)
        write_json(stage_dir / "eval_summary.json", summary)

        counts = {"records": len(records), "hits": sum(1 for s in scored if s.hit),
                  "protocol": protocol.value}
        self._manifest(
            "eval", inputs={"eval_records": cfg.eval_records_path},
            counts=counts, uses_model=True,
        )
        return counts

    def stage_report(self) -> dict:
        problems = self._load_problems()
        solutions = self._load_labeled_solutions()
        pools = self._load_pools(solutions)
        records_path = self._need("report", "critic", "records.jsonl")
        triplets_path = self._need("report", "validate", "triplets.jsonl")
        records = [CritiqueRecord.from_dict(row) for row in read_jsonl(records_path)]
        triplets = [ValidatedTriplet.from_dict(row) for row in read_jsonl(triplets_path)]

        scored_cc = scored_ei = None
        scored_path = self.round_dir / "eval" / "scored.jsonl"
        inputs = {
            "problems": self.round_dir / "ingest" / "problems.jsonl",
            "pools": self.round_dir / "pool" / "pools.jsonl",
            "records": records_path, "triplets": triplets_path,
        }
        if scored_path.exists():
            inputs["scored"] = scored_path
            all_scored = [
                ScoredResult(
                    record_id=row["record_id"], scenario=row["scenario"],
                    source=row["source"], protocol=Protocol(row["protocol"]),
                    hit=row["hit"], predicted_correct=row.get("predicted_correct"),
                    predicted_first_error_step=row.get("predicted_first_error_step"),
                    gt_solution_correct=row.get("gt_solution_correct"),
                    failure_reason=row.get("failure_reason"),
                )
                for row in read_jsonl(scored_path)
            ]
            scored_cc = [s for s in all_scored if s.protocol is Protocol.CC] or None
            scored_ei = [s for s in all_scored if s.protocol is Protocol.EI] or None

        stage_dir = self._stage_dir("report")
        summary = build_reports(
            stage_dir, problems=list(problems.values()), pools=pools,
            records=records, triplets=triplets,
            scored_cc=scored_cc, scored_ei=scored_ei,
        )
        counts = {"accepted": summary["counts"]["accepted"],
                  "critique_records": summary["counts"]["critique_records"]}
        self._manifest("report", inputs=inputs, counts=counts)
        return counts

    # -- driver --------------------------------------------------------------

    STAGE_FUNCS = {
        "ingest": stage_ingest, "classify": stage_classify, "pool": stage_pool,
        "pair": stage_pair, "critic": stage_critic, "validate": stage_validate,
        "export": stage_export, "eval": stage_eval, "report": stage_report,
    }

    def run_stage(self, stage: str) -> dict:
        if stage not in self.STAGE_FUNCS:
            raise ConfigInvalid(f"unknown stage {stage!r}; stages are {', '.join(STAGE_ORDER)}")
        logger.info("running stage %s (round %d)", stage, self.config.round)
        return self.STAGE_FUNCS[stage](self)


@contextmanager
def round_lock(round_dir: Path):
    """Exclusive per-round lock; a second concurrent run fails fast."""
    round_dir.mkdir(parents=True, exist_ok=True)
    lock = round_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(
            f"{round_dir} is locked by another run; remove {lock} if that run is dead"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run_stages(config: PipelineConfig, stages: Sequence[str]) -> dict[str, dict]:
    """Run the given stages in order under the round lock."""
    runner = PipelineRunner(config)
    results = {}
    with round_lock(runner.round_dir):
        for stage in stages:
            results[stage] = runner.run_stage(stage)
    return results


def run_pipeline(config: PipelineConfig) -> dict[str, dict]:
    """Run every applicable stage for the configured round.

    The eval stage is skipped when the config names no eval records.
    """
    stages = [s for s in STAGE_ORDER
              if s != "eval" or config.eval_records_path is not None]
    return run_stages(config, stages)
