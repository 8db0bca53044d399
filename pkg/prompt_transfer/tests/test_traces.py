import json

import jsonlines
import numpy as np
import pytest

from prompt_transfer.scripts.aux.status_tracker import StageStatusTracker
from prompt_transfer.utils import traces
from prompt_transfer.utils.eta import EtaTracker
from prompt_transfer.utils.timer import Timer


def test_log_without_context_goes_to_stderr(capsys):
    traces.log("hello", 3)
    assert capsys.readouterr().err == "hello 3\n"


def test_configure_routes_logs_and_progress(tmp_path):
    traces.configure(task_dir="logs", task_name="stage", work_dir=str(tmp_path), console=False)
    ctx = traces.context()
    assert ctx.path == str(tmp_path / "logs" / "stage")
    traces.log("first line")
    traces.progress("l_plm", 1.0)
    traces.progress("l_plm", np.float64(3.0))
    traces.progress("epoch", np.int64(1))
    assert traces.progress_dump(step=1) == {"l_plm": 2.0, "epoch": 1.0}
    traces.close()
    assert (tmp_path / "logs" / "stage" / "log.txt").read_text().startswith("first line\n")
    with jsonlines.open(tmp_path / "logs" / "stage" / "progress.jsonl") as r:
        assert list(r) == [{"l_plm": 2.0, "epoch": 1.0}]


def test_reconfigure_switches_stage(tmp_path):
    traces.configure(task_dir="logs", task_name="a", work_dir=str(tmp_path), console=False)
    traces.configure(task_dir="logs", task_name="b", work_dir=str(tmp_path), console=False)
    traces.log("in b")
    assert not (tmp_path / "logs" / "a" / "log.txt").exists()
    assert (tmp_path / "logs" / "b" / "log.txt").read_text() == "in b\n"
    traces.configure(task_name="NO_LOGS")
    assert traces.context() is None


def test_progress_rejects_non_numbers(tmp_path):
    with pytest.raises(AssertionError):
        traces.progress("x", 1.0)
    traces.configure(task_dir="logs", task_name="s", work_dir=str(tmp_path), console=False)
    with pytest.raises(NotImplementedError):
        traces.progress("x", "1.0")


def test_status_tracker_writes_status_and_plot(tmp_path):
    traces.configure(task_dir="logs", task_name="s", work_dir=str(tmp_path), console=False)
    tracker = StageStatusTracker("teacher copy")
    loop = tracker.loop(2)
    loop.step(l_plm=1.5, l_total=1.5)
    loop.step(l_plm=1.0, l_total=1.0)
    tracker.update_status("finished")
    run_dir = tmp_path / "logs" / "s"
    status = json.loads((run_dir / "status.json").read_text())
    assert status["status"] == "finished"
    assert (status["stage"], status["total_steps"], status["worked_steps"]) == ("teacher copy", 2, 2)
    assert (run_dir / "progress.svg").exists()
    with pytest.raises(RuntimeError):
        loop.step(l_plm=0.5)


def test_status_tracker_without_context_is_silent(tmp_path):
    tracker = StageStatusTracker("source")
    tracker.loop(1).step(l_plm=1.0)
    tracker.update_status("finished")
    assert list(tmp_path.iterdir()) == []


def test_eta_tracker():
    eta = EtaTracker(4)
    assert eta.eta() == 0.0
    eta.append(2.0)
    eta.append(2.0)
    assert eta.eta() == pytest.approx(4.0)
    eta.append(2.0)
    eta.append(2.0)
    assert eta.eta() == 0.0


def test_timer_records_elapsed():
    with Timer("took {time_s:.1f}s") as t:
        pass
    assert t.elapsed_s >= 0.0
