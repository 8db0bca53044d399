import os
import struct
from dataclasses import fields
from typing import BinaryIO, List, Tuple

import numpy as np

from prompt_transfer.modelling.model import FrozenModel, ModelConfig, weight_shapes
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, VanillaPrompt

__all__ = [
    "CheckpointFormatError", "MAGIC_MODEL", "MAGIC_DECOMPOSITION", "MAGIC_VANILLA", "VERSION",
    "save_model", "load_model", "save_decomposition", "load_decomposition",
    "save_vanilla", "load_vanilla", "read_header",
]

MAGIC_MODEL = b"MPTM"
MAGIC_DECOMPOSITION = b"MPTP"
MAGIC_VANILLA = b"MPTV"
VERSION = 1

_U32 = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    pass


def _write_u32(f: BinaryIO, value: int):
    f.write(_U32.pack(int(value)))


def _read_exact(f: BinaryIO, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"{path}: truncated, wanted {n} bytes, got {len(buf)}")
    return buf


def _read_u32(f: BinaryIO, path: str) -> int:
    return _U32.unpack(_read_exact(f, 4, path))[0]


def _write_f64(f: BinaryIO, arr: np.ndarray):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(f: BinaryIO, shape: Tuple[int, ...], path: str) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(f, 8 * n, path), dtype="<f8")
    return data.astype(np.float64).reshape(shape)


def _open_checked(path: str, magic: bytes) -> BinaryIO:
    f = open(path, "rb")
    try:
        got = f.read(4)
        if got != magic:
            raise CheckpointFormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        version = _read_u32(f, path)
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
    except Exception:
        f.close()
        raise
    return f


def _atomic_write(path: str, writer):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        writer(f)
    os.rename(tmp, path)


def read_header(path: str) -> Tuple[bytes, int]:
    with open(path, "rb") as f:
        magic = f.read(4)
        return magic, _read_u32(f, path)


def save_model(model: FrozenModel, path: str):
    def _writer(f):
        f.write(MAGIC_MODEL)
        _write_u32(f, VERSION)
        for fld in fields(ModelConfig):
            _write_u32(f, getattr(model.config, fld.name))
        for name in model.weight_names():
            _write_f64(f, model[name])
    _atomic_write(path, _writer)


def load_model(path: str) -> FrozenModel:
    with _open_checked(path, MAGIC_MODEL) as f:
        cfg = ModelConfig(**{fld.name: _read_u32(f, path) for fld in fields(ModelConfig)})
        weights = {name: _read_f64(f, shape, path) for name, shape in weight_shapes(cfg.validate())}
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after weights")
    return FrozenModel(cfg, weights)


def save_decomposition(shared: SharedPrompt, factors: List[TaskFactors], path: str):
    l, d = shared.matrix.shape

    def _writer(f):
        f.write(MAGIC_DECOMPOSITION)
        _write_u32(f, VERSION)
        _write_u32(f, l)
        _write_u32(f, d)
        _write_u32(f, len(factors))
        _write_f64(f, shared.matrix)
        for fac in factors:
            name = fac.task_id.encode("utf-8")
            _write_u32(f, len(name))
            f.write(name)
            _write_f64(f, fac.u)
            _write_f64(f, fac.v)
    _atomic_write(path, _writer)


def load_decomposition(path: str) -> Tuple[SharedPrompt, List[TaskFactors]]:
    with _open_checked(path, MAGIC_DECOMPOSITION) as f:
        l, d, count = _read_u32(f, path), _read_u32(f, path), _read_u32(f, path)
        shared = SharedPrompt(_read_f64(f, (l, d), path))
        factors = []
        for _ in range(count):
            name = _read_exact(f, _read_u32(f, path), path).decode("utf-8")
            factors.append(TaskFactors(name, _read_f64(f, (l,), path), _read_f64(f, (d,), path)))
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after factors")
    return shared, factors


def save_vanilla(prompt: VanillaPrompt, path: str):
    l, d = prompt.matrix.shape

    def _writer(f):
        f.write(MAGIC_VANILLA)
        _write_u32(f, VERSION)
        _write_u32(f, l)
        _write_u32(f, d)
        _write_f64(f, prompt.matrix)
    _atomic_write(path, _writer)


def load_vanilla(path: str) -> VanillaPrompt:
    with _open_checked(path, MAGIC_VANILLA) as f:
        l, d = _read_u32(f, path), _read_u32(f, path)
        matrix = _read_f64(f, (l, d), path)
        if f.read(1):
            raise CheckpointFormatError(f"{path}: trailing bytes after prompt")
    return VanillaPrompt(matrix)
