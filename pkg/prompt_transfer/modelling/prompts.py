from dataclasses import dataclass
from fractions import Fraction
from typing import List, Sequence, Tuple, Union

import numpy as np

from prompt_transfer.modelling.model import FrozenModel
from prompt_transfer.modelling.numerics import (
    Matrix, Rng, ShapeMismatchError, Vector, as_matrix, as_vector, check_finite, hadamard, outer,
)

__all__ = [
    "SharedPrompt", "TaskFactors", "VanillaPrompt", "FACTOR_NOISE_STD",
    "compose", "compress", "chain_gradients", "param_count",
    "init_vanilla_prompt", "init_decomposition", "identity_factors", "average_factors",
]

FACTOR_NOISE_STD = 0.01


@dataclass
class SharedPrompt:
    matrix: Matrix

    def __post_init__(self):
        self.matrix = check_finite(as_matrix(self.matrix, "shared prompt"), "shared prompt")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape


@dataclass
class TaskFactors:
    task_id: str
    u: Vector
    v: Vector

    def __post_init__(self):
        self.u = check_finite(as_vector(self.u, f"{self.task_id}.u"), f"{self.task_id}.u")
        self.v = check_finite(as_vector(self.v, f"{self.task_id}.v"), f"{self.task_id}.v")


@dataclass
class VanillaPrompt:
    matrix: Matrix

    def __post_init__(self):
        self.matrix = check_finite(as_matrix(self.matrix, "vanilla prompt"), "vanilla prompt")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape


def _check_factors(shared: SharedPrompt, factors: TaskFactors):
    l, d = shared.matrix.shape
    if factors.u.shape != (l,) or factors.v.shape != (d,):
        raise ShapeMismatchError(
            f"task {factors.task_id}: factors ({factors.u.size}, {factors.v.size}) "
            f"do not match shared prompt {shared.matrix.shape}")


def compose(shared: SharedPrompt, factors: TaskFactors) -> Matrix:
    """P* o (u outer v)"""
    _check_factors(shared, factors)
    return hadamard(shared.matrix, outer(factors.u, factors.v))


def compress(shared: SharedPrompt, factors: TaskFactors) -> VanillaPrompt:
    return VanillaPrompt(compose(shared, factors))


def chain_gradients(
        dl_dcomposed: Matrix,
        shared: SharedPrompt,
        factors: TaskFactors,
) -> Tuple[Matrix, Vector, Vector]:
    _check_factors(shared, factors)
    dl = as_matrix(dl_dcomposed, "composed-prompt gradient")
    if dl.shape != shared.matrix.shape:
        raise ShapeMismatchError(f"chain_gradients: gradient {dl.shape} vs prompt {shared.matrix.shape}")
    u, v, p = factors.u, factors.v, shared.matrix
    dshared = dl * np.outer(u, v)
    weighted = dl * p
    du = weighted @ v
    dv = u @ weighted
    return dshared, du, dv


def param_count(l: int, d: int, mode: str = "single", tau: int = 1) -> Union[int, Fraction]:
    """
    Trainable parameters of one prompt configuration.

    vanilla        l*d
    single         l*d + (l + d)
    grouped        l*d / tau + (l + d)      per task, exact rational
    grouped_total  l*d + (l + d) * tau
    compressed     l*d
    """
    if l < 1 or d < 1:
        raise ValueError(f"param_count: l={l}, d={d} must be >= 1")
    if mode in ("vanilla", "compressed"):
        return l * d
    if mode == "single":
        return l * d + l + d
    if tau < 1:
        raise ValueError(f"param_count: tau={tau} must be >= 1")
    if mode == "grouped":
        return Fraction(l * d, tau) + (l + d)
    if mode == "grouped_total":
        return l * d + (l + d) * tau
    raise ValueError(f"param_count: unknown mode {mode!r}")


def init_vanilla_prompt(model: FrozenModel, l: int, rng: Rng) -> VanillaPrompt:
    if not 1 <= l <= model.config.max_prompt_len:
        raise ValueError(f"prompt length {l} outside [1, {model.config.max_prompt_len}]")
    tokens = rng.integers(0, model.config.vocab_size, size=l)
    return VanillaPrompt(model.embedding[tokens].copy())


def identity_factors(task_id: str, l: int, d: int) -> TaskFactors:
    return TaskFactors(task_id, np.ones(l), np.ones(d))


def init_decomposition(
        model: FrozenModel,
        l: int,
        task_ids: Sequence[str],
        rng: Rng,
        noise_std: float = FACTOR_NOISE_STD,
) -> Tuple[SharedPrompt, List[TaskFactors]]:
    if not task_ids:
        raise ValueError("init_decomposition: empty task list")
    shared = SharedPrompt(init_vanilla_prompt(model, l, rng.fork("shared")).matrix)
    d = model.config.d_model
    factors = []
    for task_id in task_ids:
        task_rng = rng.fork("factors", task_id)
        factors.append(TaskFactors(
            task_id,
            1.0 + task_rng.normal(noise_std, l),
            1.0 + task_rng.normal(noise_std, d),
        ))
    return shared, factors


def average_factors(factors: Sequence[TaskFactors], task_id: str = "average") -> TaskFactors:
    if not factors:
        raise ValueError("average_factors: empty list")
    us = {f.u.shape for f in factors}
    vs = {f.v.shape for f in factors}
    if len(us) != 1 or len(vs) != 1:
        raise ShapeMismatchError(f"average_factors: inconsistent lengths u={us} v={vs}")
    return TaskFactors(
        task_id,
        np.mean([f.u for f in factors], axis=0),
        np.mean([f.v for f in factors], axis=0),
    )
