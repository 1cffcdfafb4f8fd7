import json
import shutil
from pathlib import Path

import pytest

from splatplace.benchmark import make_case
from splatplace.cli import EXIT_BACKEND, EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from splatplace.pipeline import PipelineConfig, run_pipeline
from splatplace.render import png_to_array

from support import http_oracle, tree_bytes

GOLDEN = Path(__file__).parent / "data" / "golden"
META = json.loads((GOLDEN / "golden.json").read_text())


@pytest.fixture
def golden(tmp_path):
    d = tmp_path / "golden"
    shutil.copytree(GOLDEN, d)
    return d


def _fixture_with(golden, kind, response):
    doc = json.loads((golden / "fixture.json").read_text())
    for entry in doc["entries"].values():
        if entry["kind"] == kind:
            entry["response"] = response
    path = golden / f"{kind}_fixture.json"
    path.write_text(json.dumps(doc))
    return path


def test_run_exit_ok(golden, capsys):
    assert main(["run", "--config", str(golden / "config.json")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["splat_count"] > 0 and set(out["artifacts"]) >= {"parse", "merge"}
    assert main(["run", "--config", str(golden / "config.json")]) == EXIT_OK
    assert all(json.loads(capsys.readouterr().out)["cached"].values())


def test_stage_subcommand_stops(golden, capsys):
    assert main(["parse", "--config", str(golden / "config.json"), "--out", str(golden / "p")]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert list(out["artifacts"]) == ["parse"]
    assert (golden / "p" / "parse.json").exists()


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["run"]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_config_key_exit_2(golden):
    doc = json.loads((golden / "config.json").read_text())
    doc["refine"]["momentum"] = 0.9
    (golden / "config.json").write_text(json.dumps(doc))
    assert main(["run", "--config", str(golden / "config.json")]) == EXIT_CONFIG


def test_unknown_backend_exit_2(golden):
    assert main(["run", "--config", str(golden / "config.json"), "--backend", "carrier-pigeon:x"]) == EXIT_CONFIG


def test_fixture_miss_exit_3(golden, capsys):
    empty = golden / "empty.json"
    empty.write_text(json.dumps({"entries": {}}))
    assert main(["run", "--config", str(golden / "config.json"), "--backend", f"fixture:{empty}"]) == EXIT_BACKEND
    assert "parse" in capsys.readouterr().err


def test_schema_violation_exit_3(golden):
    bad = _fixture_with(golden, "relative_scale", {"lambda_rel": -1.0})
    assert main(["run", "--config", str(golden / "config.json"), "--backend", f"fixture:{bad}"]) == EXIT_BACKEND


def test_http_without_endpoint_exit_3(golden, monkeypatch):
    monkeypatch.delenv("ORACLE_ENDPOINT", raising=False)
    assert main(["run", "--config", str(golden / "config.json"), "--backend", "http:"]) == EXIT_BACKEND


def test_stage_failure_exit_4(golden, capsys):
    blind = _fixture_with(golden, "detect_region", {"box": None})
    assert main(["run", "--config", str(golden / "config.json"), "--backend", f"fixture:{blind}"]) == EXIT_STAGE
    assert "stage 'region' failed" in capsys.readouterr().err


def test_render_command(golden, capsys):
    assert main(["render", str(golden / "scene.ply"), "--out", str(golden / "r"), "--size", "24"]) == EXIT_OK
    paths = json.loads(capsys.readouterr().out)["renders"]
    assert len(paths) == 8
    assert png_to_array(Path(paths[0]).read_bytes()).shape == (24, 24, 3)


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--n-cases", "2", "--out", str(tmp_path / "b"), "--seed", "3", "--refine-steps", "5"]) == EXIT_OK
    cases = json.loads(capsys.readouterr().out)["cases"]
    assert len(cases) == 2
    cfg = json.loads(Path(cases[0]).read_text())
    assert cfg["refine"]["steps"] == 5 and cfg["region"]["max_iters"] == 200
    for name in ("scene.ply", "object.ply", "views.json", "reference.png", "ground_truth.json"):
        assert (Path(cases[0]).parent / name).exists()


def test_eval_command(tmp_path, capsys):
    argv = ["eval", "--n-cases", "1", "--out", str(tmp_path / "e"), "--region-iters", "20",
            "--refine-steps", "2", "--appearance-steps", "2"]
    assert main(argv) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["n_cases"] == 1 and 0.0 <= summary["mean_miou"] <= 1.0
    assert (tmp_path / "e" / "report.json").exists() and (tmp_path / "e" / "report.csv").exists()
    assert (tmp_path / "e" / "case_000" / "fixture.json").exists()


def test_http_transcript_replays_through_fixture(golden):
    case = make_case(**META["case"])
    cfg = PipelineConfig.load(golden / "config.json")
    cfg.out = "live"
    spy = http_oracle(case.oracle(), golden / "transcript.json")
    run_pipeline(cfg, oracle=spy)
    assert spy.server.requests > 0
    replay = PipelineConfig.load(golden / "config.json")
    replay.out = "replayed"
    replay.backend = "fixture:transcript.json"
    run_pipeline(replay)
    live, again = tree_bytes(golden / "live"), tree_bytes(golden / "replayed")
    assert live.keys() == again.keys()
    assert all(live[k] == again[k] for k in live)
