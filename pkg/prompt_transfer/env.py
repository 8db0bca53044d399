import os
from typing import Optional

WORK_DIR = os.environ.get("MPT_WORK_DIR", "") or os.path.expanduser("~/.mpt/runs")


def seed_override() -> Optional[int]:
    raw = os.environ.get("MPT_SEED", "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"MPT_SEED={raw!r} is not an integer")


DIR_TASKS    = "tasks"
DIR_MODEL    = "model"
DIR_TEACHERS = "teachers"
DIR_SOURCE   = "source"
DIR_TARGETS  = "targets"
DIR_REPORTS  = "reports"
DIR_LOGS     = "logs"

MODEL_FILE = os.path.join(DIR_MODEL, "model.mptm")
SOURCE_FILE = os.path.join(DIR_SOURCE, "decomposition.mptp")
SOURCE_VANILLA_FILE = os.path.join(DIR_SOURCE, "shared.mptv")
GROUP_FILE = os.path.join(DIR_TARGETS, "group", "decomposition.mptp")
MANIFEST_FILE = "manifest.jsonl"
LOCK_FILE = ".lock"
CONFIG_FILE = "run.cfg"


def teacher_file(task_id: str) -> str:
    return os.path.join(DIR_TEACHERS, f"{task_id}.mptv")


def target_dir(task_id: str) -> str:
    return os.path.join(DIR_TARGETS, task_id)


def create_dirs(out_dir: str):
    for d in (DIR_TASKS, DIR_MODEL, DIR_TEACHERS, DIR_SOURCE, DIR_TARGETS, DIR_REPORTS, DIR_LOGS):
        os.makedirs(os.path.join(out_dir, d), exist_ok=True)
