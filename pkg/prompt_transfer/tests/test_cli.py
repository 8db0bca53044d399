import json
import os

import filelock
import numpy as np
import pytest

from prompt_transfer import env
from prompt_transfer.configuration.run_config import parse_config
from prompt_transfer.modelling.checkpoint import load_decomposition, load_vanilla
from prompt_transfer.modelling.prompts import compose
from prompt_transfer.scripts.aux.run_store import RunStore
from prompt_transfer.scripts import mpt_cli
from prompt_transfer.scripts.mpt_cli import build_parser, main
from prompt_transfer.tests.conftest import DESK_CONFIG_TEXT

PIPELINE = ("gen-tasks", "train-teachers", "train-source", "adapt-target", "adapt-group",
            "few-shot", "analyze", "report")


def _config_file(tmp_path_factory):
    fn = tmp_path_factory.mktemp("cfg") / "desk.cfg"
    fn.write_text(DESK_CONFIG_TEXT)
    return str(fn)


def _run(out, stages, config=None):
    for stage in stages:
        argv = [stage, "--output", out]
        if config is not None and stage == "gen-tasks":
            argv += ["--config", config]
        assert main(argv) == 0, stage


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    _run(out, PIPELINE, _config_file(tmp_path_factory))
    return out


def test_parser_defaults():
    args = build_parser().parse_args(["ablate"])
    assert args.suite == "grid"
    assert args.set == [] and args.task == []
    with pytest.raises(SystemExit):
        build_parser().parse_args(["deploy"])


def test_pipeline_artifacts(pipeline):
    for rel in (
        env.MODEL_FILE, env.CONFIG_FILE, env.SOURCE_FILE, env.GROUP_FILE,
        os.path.join(env.DIR_TASKS, "copy", "train.tsv"),
        env.teacher_file("parity"),
        os.path.join(env.target_dir("sort"), "decomposition.mptp"),
        os.path.join(env.target_dir("map_sub_b"), "compressed.mptv"),
        os.path.join(env.DIR_REPORTS, "source.txt"),
        os.path.join(env.DIR_REPORTS, "source_batches.tsv"),
        os.path.join(env.DIR_REPORTS, "few_shot_sort.txt"),
        os.path.join(env.DIR_REPORTS, "similarity.txt"),
        os.path.join(env.DIR_REPORTS, "similarity.png"),
        os.path.join(env.DIR_REPORTS, "efficiency.txt"),
        os.path.join(env.DIR_REPORTS, "summary.txt"),
        os.path.join(env.DIR_LOGS, "train-source", "log.txt"),
    ):
        assert os.path.exists(os.path.join(pipeline, rel)), rel


def test_pipeline_manifest(pipeline):
    entries = RunStore(pipeline).read_manifest()
    paths = [e["path"] for e in entries]
    assert paths == sorted(paths)
    assert env.SOURCE_FILE in paths
    assert not any(p.startswith(env.DIR_LOGS) for p in paths)
    assert env.LOCK_FILE not in paths
    for e in entries:
        assert len(e["sha256"]) == 64
        assert e["bytes"] == os.path.getsize(os.path.join(pipeline, e["path"]))


def test_compressed_target_prompt_matches_its_decomposition(pipeline):
    tdir = os.path.join(pipeline, env.target_dir("sort"))
    shared, factors = load_decomposition(os.path.join(tdir, "decomposition.mptp"))
    compressed = load_vanilla(os.path.join(tdir, "compressed.mptv"))
    assert [f.task_id for f in factors] == ["sort"]
    assert compressed.matrix.tobytes() == compose(shared, factors[0]).tobytes()


def test_pipeline_reports(pipeline):
    reports = os.path.join(pipeline, env.DIR_REPORTS)
    with open(os.path.join(reports, "similarity.txt")) as f:
        lines = f.read().splitlines()
    assert lines[0] == "copy reverse map_sub_a parity sort map_sub_b"
    assert len(lines) == 7
    with open(os.path.join(reports, "efficiency.txt")) as f:
        assert f.readline() == "# param/task l=4 d=16 tau=2\n"
    with open(os.path.join(reports, "source.txt")) as f:
        assert f.readline() == "#stage source seed=0\n"
    with open(os.path.join(reports, "summary.txt")) as f:
        summary = f.read()
    assert "target_sort\teval\tsort\t" in summary
    assert "few_shot_sort\tmean\t4\t" in summary
    assert len(open(os.path.join(reports, "source_batches.tsv")).read().splitlines()) == 12


def test_runs_are_reproducible(tmp_path_factory):
    config = _config_file(tmp_path_factory)
    a, b = str(tmp_path_factory.mktemp("a")), str(tmp_path_factory.mktemp("b"))
    stages = ("gen-tasks", "train-teachers", "train-source")
    _run(a, stages, config)
    _run(b, stages, config)
    assert RunStore(a).read_manifest() == RunStore(b).read_manifest()


def test_missing_artifact_fails_the_stage(tmp_path, capsys):
    assert main(["train-source", "--output", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "train-source: MissingArtifactError" in err
    assert "model.mptm not found" in err
    with open(os.path.join(str(tmp_path), env.DIR_LOGS, "train-source", "status.json")) as f:
        status = json.load(f)
    assert status["status"] == "failed"
    assert "model.mptm not found" in status["error"]


def test_interrupted_stage_is_recorded(tmp_path, monkeypatch):
    def _interrupt(store, cfg, args, model):
        raise KeyboardInterrupt

    monkeypatch.setitem(mpt_cli.STAGES, "report", _interrupt)
    assert main(["report", "--output", str(tmp_path)]) == 130
    with open(os.path.join(str(tmp_path), env.DIR_LOGS, "report", "status.json")) as f:
        status = json.load(f)
    assert status["status"] == "interrupted"
    assert status["error"] == "interrupted by user"


def test_changed_model_weights_fail_the_stage(tmp_path_factory, monkeypatch, capsys):
    out = str(tmp_path_factory.mktemp("tamper"))
    _run(out, ("gen-tasks",), _config_file(tmp_path_factory))

    def _tamper(store, cfg, args, model):
        name = model.weight_names()[0]
        model._weights[name] = model[name] + 1.0

    monkeypatch.setitem(mpt_cli.STAGES, "train-teachers", _tamper)
    assert main(["train-teachers", "--output", out]) == 1
    assert "StageError: frozen model weights changed" in capsys.readouterr().err


def test_busy_output_is_refused(tmp_path, capsys):
    lock = filelock.FileLock(str(tmp_path / env.LOCK_FILE))
    with lock:
        assert main(["report", "--output", str(tmp_path)]) == 1
    assert "OutputBusyError" in capsys.readouterr().err


def test_bad_override_is_refused(tmp_path, capsys):
    assert main(["gen-tasks", "--output", str(tmp_path), "--set", "no_such_key=1"]) == 1
    assert "ConfigParseError" in capsys.readouterr().err


def test_seed_precedence(tmp_path_factory, monkeypatch):
    config = _config_file(tmp_path_factory)
    monkeypatch.setenv("MPT_SEED", "3")
    out = str(tmp_path_factory.mktemp("env_seed"))
    assert main(["gen-tasks", "--output", out, "--config", config]) == 0
    assert parse_config(os.path.join(out, env.CONFIG_FILE)).seed == 3
    out = str(tmp_path_factory.mktemp("flag_seed"))
    assert main(["gen-tasks", "--output", out, "--config", config, "--seed", "5"]) == 0
    assert parse_config(os.path.join(out, env.CONFIG_FILE)).seed == 5


def test_ablate_grid(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ablate"))
    _run(out, ("gen-tasks",), _config_file(tmp_path_factory))
    assert main(["ablate", "--output", out, "--suite", "grid"]) == 0
    with open(os.path.join(out, env.DIR_REPORTS, "ablation_grid.txt")) as f:
        text = f.read()
    assert text.startswith("#ablation grid seeds=0\n")
    for cell in ("baseline", "distill-only", "decomp-only", "full"):
        assert f"\n{cell}\t" in text
    assert "decomposition\\distillation\toff\ton\n" in text
    mean = float(text.split("\nfull\t")[1].split("\t")[0])
    assert 0.0 <= mean <= 1.0
    assert np.isfinite(mean)
