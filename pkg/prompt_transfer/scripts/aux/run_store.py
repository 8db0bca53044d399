import hashlib
import os
from contextlib import contextmanager
from typing import Iterator, List, Optional

import filelock
import jsonlines

from prompt_transfer import env
from prompt_transfer.modelling.checkpoint import CheckpointFormatError, VERSION, read_header

__all__ = ["RunStore", "MissingArtifactError", "OutputBusyError"]


class MissingArtifactError(RuntimeError):
    pass


class OutputBusyError(RuntimeError):
    pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunStore:
    """Output directory of one pipeline: artifacts, lock file and content manifest."""

    def __init__(self, out_dir: str):
        self.out_dir = os.path.abspath(out_dir)

    def path(self, *rel: str) -> str:
        return os.path.join(self.out_dir, *rel)

    @contextmanager
    def locked(self) -> Iterator['RunStore']:
        os.makedirs(self.out_dir, exist_ok=True)
        lock = filelock.FileLock(self.path(env.LOCK_FILE), timeout=0)
        try:
            lock.acquire()
        except filelock.Timeout:
            raise OutputBusyError(f"{self.out_dir} is locked by another invocation")
        try:
            env.create_dirs(self.out_dir)
            yield self
        finally:
            lock.release()

    def require(self, rel: str, magic: Optional[bytes] = None, needed_by: str = "") -> str:
        """Absolute path of an artifact produced by an earlier stage, header-checked."""
        fn = self.path(rel)
        if not os.path.exists(fn):
            raise MissingArtifactError(f"{rel} not found{' (needed by ' + needed_by + ')' if needed_by else ''}")
        if magic is not None:
            got_magic, version = read_header(fn)
            if got_magic != magic:
                raise CheckpointFormatError(f"{rel}: magic {got_magic!r}, expected {magic!r}")
            if version != VERSION:
                raise CheckpointFormatError(f"{rel}: unsupported version {version}")
        return fn

    def artifacts(self) -> List[str]:
        skip = {env.LOCK_FILE, env.MANIFEST_FILE}
        out = []
        for dirpath, dirnames, filenames in os.walk(self.out_dir):
            rel_dir = os.path.relpath(dirpath, self.out_dir)
            if rel_dir.split(os.sep)[0] == env.DIR_LOGS:
                dirnames[:] = []
                continue
            dirnames.sort()
            for fn in sorted(filenames):
                rel = os.path.normpath(os.path.join(rel_dir, fn))
                if rel in skip or fn.endswith(".tmp"):
                    continue
                out.append(rel)
        return sorted(out)

    def write_manifest(self) -> str:
        fn = self.path(env.MANIFEST_FILE)
        with jsonlines.open(fn + ".tmp", mode="w") as w:
            for rel in self.artifacts():
                w.write({"path": rel, "sha256": _sha256(self.path(rel)), "bytes": os.path.getsize(self.path(rel))})
        os.rename(fn + ".tmp", fn)
        return fn

    def read_manifest(self) -> List[dict]:
        with jsonlines.open(self.path(env.MANIFEST_FILE)) as r:
            return list(r)
