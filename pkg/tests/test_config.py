"""Config loading and validation."""
from __future__ import annotations

import json

import pytest
import yaml

from critforge.config import ConfigInvalid, load_config


def _write_corpus(tmp_path):
    (tmp_path / "problems.jsonl").write_text(
        json.dumps({"id": "p1", "statement": "2+2?", "answer": "4", "source": "unit"}) + "\n")
    (tmp_path / "solutions.jsonl").write_text(
        json.dumps({"id": "s1", "problem_id": "p1", "model_id": "gen",
                    "steps": ["Add."], "final_answer": "4"}) + "\n")
    (tmp_path / "script.json").write_text(
        json.dumps({"rules": [{"response": "Conclusion: correct"}]}))


def _write_config(tmp_path, overrides=None, drop=()):
    cfg = {
        "output_dir": "out",
        "seed": 7,
        "round": 2,
        "corpus": {"problems": "problems.jsonl", "solutions": "solutions.jsonl"},
        "backend": {"kind": "mock", "model_id": "critic-x", "mock_script": "script.json"},
        "rounds": [{"model_id": "critic-r1"}, {"model_id": "critic-r2"}],
        "caps": {"per_model_per_category": 500},
        "critic": {"mode": "direct", "temperature": 0.0},
        "export": {"ratio": [1, 3], "total": 40},
    }
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    for key in drop:
        cfg.pop(key, None)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_load_config_happy_path(tmp_path):
    _write_corpus(tmp_path)
    cfg = load_config(_write_config(tmp_path))
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.problems_path == tmp_path / "problems.jsonl"
    assert cfg.backend.kind == "mock"
    assert cfg.backend.mock_script == tmp_path / "script.json"
    assert cfg.seed == 7 and cfg.round == 2
    assert cfg.cap_per_model_per_category == 500
    assert cfg.critic_mode == "direct"
    assert cfg.export_ratio == (1.0, 3.0) and cfg.export_total == 40
    assert cfg.round_dir() == tmp_path / "out" / "round-2"
    assert cfg.round_dir(1) == tmp_path / "out" / "round-1"


def test_model_id_for_round_prefers_rounds_list(tmp_path):
    _write_corpus(tmp_path)
    cfg = load_config(_write_config(tmp_path))
    assert cfg.model_id_for_round(1) == "critic-r1"
    assert cfg.model_id_for_round(2) == "critic-r2"
    assert cfg.model_id_for_round(3) == "critic-x"  # past the list: backend default


def test_relative_paths_resolve_against_config_dir(tmp_path):
    nested = tmp_path / "conf"
    nested.mkdir()
    _write_corpus(nested)
    cfg = load_config(_write_config(nested))
    assert cfg.problems_path.parent == nested


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigInvalid, match="not found"):
        load_config(tmp_path / "absent.yaml")


def test_unparseable_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("corpus: [unterminated\n")
    with pytest.raises(ConfigInvalid, match="valid YAML"):
        load_config(path)


@pytest.mark.parametrize("overrides,drop,fragment", [
    ({}, ("corpus",), "corpus"),
    ({"corpus": {"problems": "missing.jsonl"}}, (), "does not exist"),
    ({}, ("output_dir",), "output_dir"),
    ({"backend": {"kind": "carrier-pigeon"}}, (), "backend.kind"),
    ({"backend": {"mock_script": "missing.json"}}, (), "mock script does not exist"),
    ({"round": 0}, (), "round"),
    ({"critic": {"mode": "telepathy"}}, (), "critic.mode"),
    ({"critic": {"temperature": -1}}, (), "temperature"),
    ({"export": {"ratio": [1]}}, (), "two-element"),
    ({"export": {"ratio": [1, 0]}}, (), "positive"),
    ({"export": {"total": 0}}, (), "export.total"),
    ({"eval": {"protocol": "vibes"}}, (), "eval.protocol"),
    ({"caps": {"per_model_per_category": 0}}, (), "per_model_per_category"),
    ({"classify": {"judge": "sometimes"}}, (), "classify.judge"),
    ({"backend": {"concurrency": 0}}, (), "concurrency"),
    ({"rounds": ["critic-r1"]}, (), r"rounds\[0\]"),
], ids=["no-corpus", "missing-problems", "no-output-dir", "bad-backend-kind",
        "missing-mock-script", "round-zero", "bad-critic-mode", "negative-temperature",
        "short-ratio", "zero-ratio-weight", "zero-total", "bad-protocol", "zero-cap",
        "bad-judge-mode", "zero-concurrency", "bad-rounds-entry"])
def test_invalid_configs_are_refused(tmp_path, overrides, drop, fragment):
    _write_corpus(tmp_path)
    path = _write_config(tmp_path, overrides=overrides, drop=drop)
    with pytest.raises(ConfigInvalid, match=fragment):
        load_config(path)


def test_mock_backend_requires_script(tmp_path):
    _write_corpus(tmp_path)
    cfg = {
        "output_dir": "out",
        "corpus": {"problems": "problems.jsonl", "solutions": "solutions.jsonl"},
        "backend": {"kind": "mock"},
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    with pytest.raises(ConfigInvalid, match="mock_script"):
        load_config(path)


def test_openai_backend_requires_endpoint(tmp_path):
    _write_corpus(tmp_path)
    path = _write_config(tmp_path, overrides={"backend": {"kind": "openai"}})
    with pytest.raises(ConfigInvalid, match="endpoint"):
        load_config(path)


def test_openai_backend_with_endpoint_loads(tmp_path):
    _write_corpus(tmp_path)
    path = _write_config(
        tmp_path,
        overrides={"backend": {"kind": "openai", "endpoint": "http://localhost:9/v1",
                               "api_key_env": "CRITFORGE_KEY"}})
    cfg = load_config(path)
    assert cfg.backend.endpoint == "http://localhost:9/v1"
    assert cfg.backend.api_key_env == "CRITFORGE_KEY"


def test_ratio_can_be_disabled(tmp_path):
    _write_corpus(tmp_path)
    path = _write_config(tmp_path, overrides={"export": {"ratio": None, "total": None}})
    cfg = load_config(path)
    assert cfg.export_ratio is None and cfg.export_total is None
