from __future__ import annotations

import json

import pytest

from afcbench.cli import main
from afcbench.corpus import load_rewrites, load_variants
from tests.conftest import FIXTURES


@pytest.fixture
def fixture_config(tmp_path):
    obj = {
        "datasets": [str(FIXTURES / "corpus.jsonl")],
        "models": {
            "afc": "scripted-afc",
            "rewrite": "scripted-rewriter",
            "judge": "scripted-judge",
            "grader": "scripted-grader",
            "embed": "scripted-embed",
            "eval": ["scripted-eval-1"],
        },
        "endpoint": {"kind": "scripted", "script_path": str(FIXTURES / "scripted_backend.json")},
        "run_dir": str(tmp_path / "run"),
        "cache_dir": str(tmp_path / "cache"),
        "concurrency": 4,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def test_config_error_exit_code(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{}")
    assert main(["afc", "--config", str(path)]) == 1


def test_record_level_hard_errors_exit_code(fixture_config, tmp_path, capsys):
    # An empty response table makes every model call a hard error; soft flags
    # never fail a run but these must.
    empty = tmp_path / "empty_table.json"
    empty.write_text("{}")
    config = json.loads(fixture_config.read_text())
    config["endpoint"]["script_path"] = str(empty)
    fixture_config.write_text(json.dumps(config))
    assert main(["afc", "--config", str(fixture_config), "--limit", "2"]) == 2
    assert "no scripted rule" in capsys.readouterr().err


def test_evaluate_without_rewrites_names_prerequisite(fixture_config, tmp_path, capsys):
    assert main(["evaluate", "--config", str(fixture_config)]) == 2
    err = capsys.readouterr().err
    assert "rewrites.jsonl" in err


def test_rewrite_without_afc_names_prerequisite(fixture_config, capsys):
    assert main(["rewrite", "--config", str(fixture_config)]) == 2
    assert "afc.jsonl" in capsys.readouterr().err


def test_report_without_analysis_names_prerequisite(fixture_config, capsys):
    assert main(["report", "--config", str(fixture_config)]) == 2
    assert "deltas.csv" in capsys.readouterr().err


def test_limit_processes_exactly_n_records(fixture_config, tmp_path):
    assert main(["afc", "--config", str(fixture_config), "--limit", "5"]) == 0
    variants = load_variants(tmp_path / "run" / "fixture-qa" / "afc.jsonl")
    assert len(variants) == 5


def test_afc_then_rewrite_stage_sequence(fixture_config, tmp_path):
    assert main(["afc", "--config", str(fixture_config)]) == 0
    assert main(["rewrite", "--config", str(fixture_config)]) == 0
    rewrites = load_rewrites(tmp_path / "run" / "fixture-qa" / "rewrites.jsonl")
    assert len(rewrites) == 20
    assert all(r.grounding == "answer_free" for r in rewrites)


def test_run_all_full_artifact_tree(fixture_config, tmp_path):
    assert main(["run-all", "--config", str(fixture_config)]) == 0
    run = tmp_path / "run"
    for name in (
        "manifest.json",
        "fixture-qa/afc.jsonl",
        "fixture-qa/afc_audit.jsonl",
        "fixture-qa/rewrites.jsonl",
        "fixture-qa/rewrite_audit.jsonl",
        "fixture-qa/scores.jsonl",
        "fixture-qa/filter_decisions.jsonl",
        "fixture-qa/benchmark.jsonl",
        "fixture-qa/outcomes/scripted-eval-1.jsonl",
        "accuracy.csv",
        "analysis/deltas.csv",
        "analysis/alignment.csv",
        "report/summary.md",
        "report/scatter_accuracy.csv",
    ):
        assert (run / name).is_file(), name


def test_condition_subset(fixture_config, tmp_path):
    for stage in ("afc", "rewrite", "validate"):
        assert main([stage, "--config", str(fixture_config)]) == 0
    assert main([
        "evaluate", "--config", str(fixture_config),
        "--condition", "orig_q", "--condition", "rewrite_q",
    ]) == 0
    accuracy = (tmp_path / "run" / "accuracy.csv").read_text().splitlines()
    conditions = {line.split(",")[2] for line in accuracy[1:]}
    assert conditions == {"orig_q", "rewrite_q"}


def test_evaluate_resume_fills_missing_cell(fixture_config, tmp_path):
    for stage in ("afc", "rewrite", "validate", "evaluate"):
        assert main([stage, "--config", str(fixture_config)]) == 0
    outcome_path = tmp_path / "run" / "fixture-qa" / "outcomes" / "scripted-eval-1.jsonl"
    original = outcome_path.read_bytes()
    outcome_path.unlink()
    assert main(["evaluate", "--config", str(fixture_config)]) == 0
    assert outcome_path.read_bytes() == original


def test_manifest_records_prompt_hashes_and_models(fixture_config, tmp_path):
    assert main(["afc", "--config", str(fixture_config)]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert set(manifest["prompt_hashes"]) == {
        "rewrite", "afc", "explanation_validation", "properties", "grading", "in_situ", "similarity"
    }
    assert "scripted-eval-1" in manifest["model_names"]
    assert manifest["thresholds"]["question_sim"] == 0.70
