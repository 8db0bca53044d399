import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Optional

from prompt_transfer.utils import traces
from prompt_transfer.utils.eta import EtaTracker
from prompt_transfer.utils.traces_plot import plot_progress

__all__ = ['StageStatusTracker']


def get_stage_status(stage: str) -> Dict[str, Any]:
    return {
        "stage": stage,
        "started_ts": time.time(),
        "total_steps": 0,
        "worked_steps": 0,
        "worked_minutes": 0,
        "eta_minutes": 0,
        "status": "starting"
    }


class StageStatusTracker:
    """
    status.json next to the stage's log.txt. Without a configured traces
    context every call is a no-op, so trainers can be used as a library.
    """

    class LoopStatusTracker:
        def __init__(self, context: 'StageStatusTracker', total_steps: int):
            self.context = context
            self.eta_tracker = EtaTracker(total_steps)
            self.iter_n = 1
            self.initial_iter_tp = time.time()
            self.last_iter_tp = time.time()

        def step(self, **to_log):
            self.eta_tracker.append(time.time() - self.last_iter_tp)
            stats = self.context._stats_dict
            stats["eta_minutes"] = int(round(self.eta_tracker.eta() / 60))
            stats["worked_steps"] = self.iter_n
            stats["worked_minutes"] = int((time.time() - self.initial_iter_tp) / 60)

            if traces.context() is not None:
                traces.progress("epoch", self.iter_n)
                for k, v in to_log.items():
                    traces.progress(k, v)
                traces.progress_dump(step=self.iter_n)
            logging.info(f"{stats['stage']}: finished epoch {self.iter_n}, "
                         + ", ".join(f"{k}={v:.4f}" for k, v in to_log.items()))

            self.context.update_status("working")
            self.iter_n += 1
            self.last_iter_tp = time.time()

    def __init__(self, stage: str):
        self._stats_dict = get_stage_status(stage)
        ctx = traces.context()
        self._status_filename: Optional[Path] = Path(ctx.path) / "status.json" if ctx else None

    def dump(self):
        if self._status_filename is None:
            return
        traces.touch()
        with open(self._status_filename.with_suffix(".tmp"), "w") as f:
            json.dump(self._stats_dict, f, indent=4)
        os.rename(self._status_filename.with_suffix(".tmp"), self._status_filename)

    def update_status(self, status: str, error_message: Optional[str] = None, dump: bool = True):
        self._stats_dict["status"] = status
        if error_message is not None:
            assert status in {"failed", "interrupted"}
            self._stats_dict["error"] = error_message
        if status == "finished" and self._status_filename is not None:
            plot_progress(self._status_filename.parent)
        if dump:
            self.dump()

    def add_stats(self, **kwargs):
        self._stats_dict.update(kwargs)
        self.dump()

    def loop(self, total_steps: int) -> 'StageStatusTracker.LoopStatusTracker':
        self.add_stats(total_steps=total_steps)
        return StageStatusTracker.LoopStatusTracker(self, total_steps)
