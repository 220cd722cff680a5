"""Pipeline configuration: YAML loading, validation, and path resolution."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

VALID_BACKEND_KINDS = ("mock", "openai")
VALID_CRITIC_MODES = ("direct", "bug", "contrastive")
VALID_JUDGE_MODES = ("off", "fallback", "always")
VALID_PROTOCOLS = ("cc", "ei")


class ConfigInvalid(Exception):
    """The run configuration cannot be used as given."""


@dataclass
class BackendConfig:
    kind: str = "mock"
    model_id: str = "critic"
    mock_script: Optional[Path] = None
    endpoint: Optional[str] = None
    api_key_env: Optional[str] = None
    concurrency: int = 2
    max_attempts: int = 4
    timeout: float = 60.0

    def api_key(self) -> Optional[str]:
        if not self.api_key_env:
            return None
        return os.environ.get(self.api_key_env)


@dataclass
class PipelineConfig:
    output_dir: Path
    problems_path: Path
    solutions_path: Path
    backend: BackendConfig
    round: int = 1
    seed: int = 0
    eval_records_path: Optional[Path] = None
    round_model_ids: list[str] = field(default_factory=list)
    cap_per_model_per_category: Optional[int] = None
    critic_mode: str = "contrastive"
    critic_temperature: float = 0.0
    strict_answer_check: bool = False
    judge_mode: str = "off"
    judge_model_id: Optional[str] = None
    export_ratio: Optional[tuple[float, float]] = (1.0, 1.0)
    export_total: Optional[int] = None
    eval_protocol: str = "cc"

    def model_id_for_round(self, round_number: int) -> str:
        """Per-round critic model: the rounds list wins, then the backend default."""
        if self.round_model_ids and 1 <= round_number <= len(self.round_model_ids):
            return self.round_model_ids[round_number - 1]
        return self.backend.model_id

    def round_dir(self, round_number: Optional[int] = None) -> Path:
        n = self.round if round_number is None else round_number
        return self.output_dir / f"round-{n}"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigInvalid(message)


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def load_config(path: str | Path) -> PipelineConfig:
    """Load and validate a YAML config; all referenced input paths must exist.

    Relative paths are resolved against the config file's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a YAML mapping")
    base = path.parent

    corpus = raw.get("corpus")
    _require(isinstance(corpus, dict), "config needs a 'corpus' mapping")
    _require("problems" in corpus and "solutions" in corpus,
             "corpus must name 'problems' and 'solutions' files")
    problems_path = _resolve(base, str(corpus["problems"]))
    solutions_path = _resolve(base, str(corpus["solutions"]))
    for p in (problems_path, solutions_path):
        _require(p.exists(), f"corpus file does not exist: {p}")

    _require("output_dir" in raw, "config needs an 'output_dir'")
    output_dir = _resolve(base, str(raw["output_dir"]))

    backend_raw = raw.get("backend", {})
    _require(isinstance(backend_raw, dict), "'backend' must be a mapping")
    kind = str(backend_raw.get("kind", "mock"))
    _require(kind in VALID_BACKEND_KINDS,
             f"backend.kind must be one of {VALID_BACKEND_KINDS}, got {kind!r}")
    backend = BackendConfig(
        kind=kind,
        model_id=str(backend_raw.get("model_id", "critic")),
        api_key_env=backend_raw.get("api_key_env"),
        concurrency=int(backend_raw.get("concurrency", 2)),
        max_attempts=int(backend_raw.get("max_attempts", 4)),
        timeout=float(backend_raw.get("timeout", 60.0)),
    )
    _require(backend.concurrency >= 1, "backend.concurrency must be >= 1")
    _require(backend.max_attempts >= 1, "backend.max_attempts must be >= 1")
    if kind == "mock":
        _require("mock_script" in backend_raw, "mock backend needs backend.mock_script")
        backend.mock_script = _resolve(base, str(backend_raw["mock_script"]))
        _require(backend.mock_script.exists(),
                 f"mock script does not exist: {backend.mock_script}")
    else:
        _require("endpoint" in backend_raw, "openai backend needs backend.endpoint")
        backend.endpoint = str(backend_raw["endpoint"])

    round_number = int(raw.get("round", 1))
    _require(round_number >= 1, "round must be >= 1")

    eval_records_path = None
    if raw.get("eval_records"):
        eval_records_path = _resolve(base, str(raw["eval_records"]))
        _require(eval_records_path.exists(),
                 f"eval records file does not exist: {eval_records_path}")

    round_model_ids = []
    for i, entry in enumerate(raw.get("rounds", []) or []):
        _require(isinstance(entry, dict) and "model_id" in entry,
                 f"rounds[{i}] must be a mapping with a model_id")
        round_model_ids.append(str(entry["model_id"]))

    caps = raw.get("caps", {}) or {}
    cap = caps.get("per_model_per_category")
    if cap is not None:
        cap = int(cap)
        _require(cap >= 1, "caps.per_model_per_category must be >= 1")

    critic = raw.get("critic", {}) or {}
    critic_mode = str(critic.get("mode", "contrastive"))
    _require(critic_mode in VALID_CRITIC_MODES,
             f"critic.mode must be one of {VALID_CRITIC_MODES}, got {critic_mode!r}")
    critic_temperature = float(critic.get("temperature", 0.0))
    _require(critic_temperature >= 0.0, "critic.temperature must be >= 0")

    classify = raw.get("classify", {}) or {}
    judge_mode = str(classify.get("judge", "off"))
    _require(judge_mode in VALID_JUDGE_MODES,
             f"classify.judge must be one of {VALID_JUDGE_MODES}, got {judge_mode!r}")

    validation = raw.get("validation", {}) or {}
    strict = bool(validation.get("strict_answer_check", False))

    export = raw.get("export", {}) or {}
    ratio = export.get("ratio", [1, 1])
    export_ratio: Optional[tuple[float, float]] = None
    if ratio is not None:
        _require(isinstance(ratio, (list, tuple)) and len(ratio) == 2,
                 "export.ratio must be a two-element list")
        export_ratio = (float(ratio[0]), float(ratio[1]))
        _require(export_ratio[0] > 0 and export_ratio[1] > 0,
                 "export.ratio weights must be positive")
    export_total = export.get("total")
    if export_total is not None:
        export_total = int(export_total)
        _require(export_total >= 1, "export.total must be >= 1")

    eval_cfg = raw.get("eval", {}) or {}
    protocol = str(eval_cfg.get("protocol", "cc"))
    _require(protocol in VALID_PROTOCOLS,
             f"eval.protocol must be one of {VALID_PROTOCOLS}, got {protocol!r}")

    return PipelineConfig(
        output_dir=output_dir, problems_path=problems_path,
        solutions_path=solutions_path, backend=backend, round=round_number,
        seed=int(raw.get("seed", 0)), eval_records_path=eval_records_path,
        round_model_ids=round_model_ids, cap_per_model_per_category=cap,
        critic_mode=critic_mode, critic_temperature=critic_temperature,
        strict_answer_check=strict, judge_mode=judge_mode,
        judge_model_id=classify.get("judge_model_id"),
        export_ratio=export_ratio, export_total=export_total,
        eval_protocol=protocol,
    )
