from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from dataclasses_json import dataclass_json
from scipy.special import log_softmax

from prompt_transfer.modelling.model import (
    EOS, BatchTrace, FrozenModel, backward_batch, batch_task_loss_grad, batch_task_losses, forward_batch,
)
from prompt_transfer.modelling.numerics import (
    Matrix, ShapeMismatchError, Vector, as_matrix, check_finite, softmax_with_temperature,
)
from prompt_transfer.modelling.prompts import SharedPrompt, TaskFactors, VanillaPrompt, chain_gradients, compose

__all__ = [
    "DistillConfig", "DistillationBatchResult", "InvalidLossValueException", "Example",
    "decoder_target", "kl_logits_loss", "kl_logits_grad", "hidden_mse_loss", "hidden_mse_grads",
    "total_loss", "prompt_distance_loss", "prompt_distance_grad", "examples_objective", "prompt_objective",
    "batch_objective", "multitask_objective",
]

Example = Tuple[Sequence[int], Sequence[int]]


class InvalidLossValueException(Exception):
    pass


@dataclass_json
@dataclass
class DistillConfig:
    lambda_: float = 0.9
    temperature: float = 2.0
    use_logits_kl: bool = True
    use_hidden_mse: bool = True
    use_prompt_distance: bool = False

    def validate(self) -> 'DistillConfig':
        if not np.isfinite(self.lambda_) or self.lambda_ < 0:
            raise ValueError(f"distill config: lambda={self.lambda_} must be a finite value >= 0")
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ValueError(f"distill config: temperature={self.temperature} must be > 0")
        if self.use_prompt_distance and (self.use_logits_kl or self.use_hidden_mse):
            raise ValueError("distill config: prompt distance excludes the logits and hidden-state losses")
        return self

    @property
    def distills(self) -> bool:
        return self.use_logits_kl or self.use_hidden_mse or self.use_prompt_distance

    @classmethod
    def disabled(cls, lambda_: float = 0.9, temperature: float = 2.0) -> 'DistillConfig':
        return cls(lambda_=lambda_, temperature=temperature, use_logits_kl=False, use_hidden_mse=False)


@dataclass
class DistillationBatchResult:
    l_plm: float
    l_logits: float
    l_hidden: float
    l_prompt: float
    l_total: float
    grad_composed: Matrix
    grad_shared: Matrix
    grad_factors: Dict[str, Tuple[Vector, Vector]] = field(default_factory=dict)
    n_examples: int = 0


def decoder_target(tgt: Sequence[int]) -> List[int]:
    return [int(t) for t in tgt] + [EOS]


def _check_pair(what: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: teacher {a.shape} vs student {b.shape}")


def kl_logits_loss(teacher_logits: Matrix, student_logits: Matrix, temperature: float) -> float:
    """Mean over positions of KL(softmax(t/T) || softmax(s/T)); no T^2 rescaling."""
    t, s = as_matrix(teacher_logits, "teacher logits"), as_matrix(student_logits, "student logits")
    _check_pair("kl_logits_loss", t, s)
    log_p_t = log_softmax(t / temperature, axis=-1)
    log_p_s = log_softmax(s / temperature, axis=-1)
    kl = np.sum(np.exp(log_p_t) * (log_p_t - log_p_s), axis=-1)
    return float(max(np.mean(kl), 0.0))


def kl_logits_grad(teacher_logits: Matrix, student_logits: Matrix, temperature: float) -> Matrix:
    t, s = as_matrix(teacher_logits, "teacher logits"), as_matrix(student_logits, "student logits")
    _check_pair("kl_logits_grad", t, s)
    p_t = softmax_with_temperature(t, temperature)
    p_s = softmax_with_temperature(s, temperature)
    return (p_s - p_t) / (temperature * s.shape[0])


def hidden_mse_loss(teacher_enc: Matrix, teacher_dec: Matrix, student_enc: Matrix, student_dec: Matrix) -> float:
    _check_pair("hidden_mse_loss encoder", np.asarray(teacher_enc), np.asarray(student_enc))
    _check_pair("hidden_mse_loss decoder", np.asarray(teacher_dec), np.asarray(student_dec))
    enc = np.mean(np.square(np.asarray(student_enc) - np.asarray(teacher_enc)))
    dec = np.mean(np.square(np.asarray(student_dec) - np.asarray(teacher_dec)))
    return float(enc + dec)


def hidden_mse_grads(
        teacher_enc: Matrix, teacher_dec: Matrix, student_enc: Matrix, student_dec: Matrix,
) -> Tuple[Matrix, Matrix]:
    _check_pair("hidden_mse_grads encoder", np.asarray(teacher_enc), np.asarray(student_enc))
    _check_pair("hidden_mse_grads decoder", np.asarray(teacher_dec), np.asarray(student_dec))
    denc = 2.0 * (np.asarray(student_enc) - np.asarray(teacher_enc)) / np.size(student_enc)
    ddec = 2.0 * (np.asarray(student_dec) - np.asarray(teacher_dec)) / np.size(student_dec)
    return denc, ddec


def total_loss(l_plm: float, l_logits: float, l_hidden: float, lambda_: float) -> float:
    return l_plm + lambda_ * (l_logits + l_hidden)


def prompt_distance_loss(teacher_prompt: VanillaPrompt, student_composed: Matrix) -> float:
    student = as_matrix(student_composed, "student prompt")
    _check_pair("prompt_distance_loss", teacher_prompt.matrix, student)
    return float(np.mean(np.square(student - teacher_prompt.matrix)))


def prompt_distance_grad(teacher_prompt: VanillaPrompt, student_composed: Matrix) -> Matrix:
    student = as_matrix(student_composed, "student prompt")
    _check_pair("prompt_distance_grad", teacher_prompt.matrix, student)
    return 2.0 * (student - teacher_prompt.matrix) / student.size


def _masked_sq_mean(diff: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example mean of diff^2 over valid rows, and its gradient w.r.t. diff."""
    weight = mask[:, :, None] / (mask.sum(axis=1) * diff.shape[2])[:, None, None]
    return np.sum(np.square(diff) * weight, axis=(1, 2)), 2.0 * diff * weight


def _masked_kl(teacher_logits: np.ndarray, student_logits: np.ndarray, mask: np.ndarray, temperature: float):
    """Per-example KL means over valid positions, and d(KL_b)/d(student logits)."""
    log_p_t = log_softmax(teacher_logits / temperature, axis=-1)
    log_p_s = log_softmax(student_logits / temperature, axis=-1)
    p_t = np.exp(log_p_t)
    per_pos = np.where(mask, np.sum(p_t * (log_p_t - log_p_s), axis=-1), 0.0)
    n_pos = mask.sum(axis=1)
    losses = np.maximum(per_pos.sum(axis=1) / n_pos, 0.0)
    grad = (np.exp(log_p_s) - p_t) / temperature * (mask / n_pos[:, None])[:, :, None]
    return losses, grad


def examples_objective(
        model: FrozenModel,
        prompts: np.ndarray,
        teacher_prompts: Optional[np.ndarray],
        batch: Sequence[Example],
        cfg: DistillConfig,
        weights: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One padded forward/backward over the whole batch, every example with its
    own prompt row block. Returns ([l_plm, l_logits, l_hidden] as
    weights-weighted sums, per-example prompt gradients (B, l, d)).
    """
    srcs = [src for src, _ in batch]
    tgts = [decoder_target(tgt) for _, tgt in batch]
    weights = np.asarray(weights, dtype=np.float64)
    lam = cfg.lambda_
    student: BatchTrace = forward_batch(model, prompts, srcs, tgts)
    losses = np.zeros(3)
    losses[0] = float(weights @ batch_task_losses(student))
    dlogits = batch_task_loss_grad(student, weights)
    denc = ddec = None
    if cfg.use_logits_kl or cfg.use_hidden_mse:
        if np.shape(teacher_prompts)[-2:] != np.shape(prompts)[-2:]:
            raise ShapeMismatchError(
                f"examples_objective: teacher prompt {np.shape(teacher_prompts)} vs student {np.shape(prompts)}")
        teacher = forward_batch(model, teacher_prompts, srcs, tgts)
        if cfg.use_logits_kl:
            kl, dkl = _masked_kl(teacher.logits, student.logits, student.tgt_mask, cfg.temperature)
            losses[1] = float(weights @ kl)
            dlogits = dlogits + lam * dkl * weights[:, None, None]
        if cfg.use_hidden_mse:
            l_enc, denc = _masked_sq_mean(student.enc_hidden - teacher.enc_hidden, student.enc_mask)
            l_dec, ddec = _masked_sq_mean(student.dec_hidden - teacher.dec_hidden, student.tgt_mask)
            losses[2] = float(weights @ (l_enc + l_dec))
            denc = lam * denc * weights[:, None, None]
            ddec = lam * ddec * weights[:, None, None]
    return losses, backward_batch(model, student, dlogits, denc, ddec)


def _checked_result(
        l_plm: float, l_logits: float, l_hidden: float, l_prompt: float, lam: float, use_prompt_distance: bool,
) -> Tuple[float, float, float, float, float]:
    if use_prompt_distance:
        l_total = l_plm + lam * l_prompt
    else:
        l_total = total_loss(l_plm, l_logits, l_hidden, lam)
    for name, value in (("l_plm", l_plm), ("l_logits", l_logits), ("l_hidden", l_hidden), ("l_total", l_total)):
        if not np.isfinite(value):
            raise InvalidLossValueException(f"{name} = {value}")
    return l_plm, l_logits, l_hidden, l_prompt, l_total


def prompt_objective(
        model: FrozenModel,
        prompt: Matrix,
        teacher_prompt: Optional[VanillaPrompt],
        batch: Sequence[Example],
        cfg: DistillConfig,
) -> DistillationBatchResult:
    """
    Losses and gradient w.r.t. one prompt matrix, averaged over the batch.
    Per-example losses are per-position means; the teacher only runs forward.
    """
    cfg.validate()
    if not batch:
        raise ValueError("prompt_objective: empty batch")
    if cfg.distills and teacher_prompt is None:
        raise ValueError("prompt_objective: distillation requested but no teacher prompt given")
    prompt = as_matrix(prompt, "prompt")
    n = len(batch)
    losses, grads = examples_objective(
        model, prompt, teacher_prompt.matrix if teacher_prompt is not None else None,
        batch, cfg, np.full(n, 1.0 / n))
    grad = grads.sum(axis=0)
    l_prompt = 0.0
    if cfg.use_prompt_distance:
        l_prompt = prompt_distance_loss(teacher_prompt, prompt)
        grad += cfg.lambda_ * prompt_distance_grad(teacher_prompt, prompt)
    l_plm, l_logits, l_hidden, l_prompt, l_total = _checked_result(
        *losses, l_prompt, cfg.lambda_, cfg.use_prompt_distance)
    return DistillationBatchResult(
        l_plm=l_plm, l_logits=l_logits, l_hidden=l_hidden, l_prompt=l_prompt, l_total=l_total,
        grad_composed=check_finite(grad, "prompt gradient"), grad_shared=grad, n_examples=n,
    )


def batch_objective(
        model: FrozenModel,
        shared: SharedPrompt,
        factors: Optional[TaskFactors],
        teacher_prompt: Optional[VanillaPrompt],
        batch: Sequence[Example],
        cfg: DistillConfig,
) -> DistillationBatchResult:
    """
    One task's batch: forward through P* o (u v^T), backpropagate to the
    composed prompt and chain into (P*, u_k, v_k). Without factors the shared
    matrix is used directly and `grad_factors` stays empty.
    """
    if factors is None:
        return prompt_objective(model, shared.matrix, teacher_prompt, batch, cfg)
    res = prompt_objective(model, compose(shared, factors), teacher_prompt, batch, cfg)
    dshared, du, dv = chain_gradients(res.grad_composed, shared, factors)
    res.grad_shared = dshared
    res.grad_factors = {factors.task_id: (du, dv)}
    return res


def multitask_objective(
        model: FrozenModel,
        shared: SharedPrompt,
        factors: Mapping[str, TaskFactors],
        teachers: Optional[Mapping[str, VanillaPrompt]],
        batch: Sequence[Tuple[str, Example]],
        cfg: DistillConfig,
        batch_size: Optional[int] = None,
) -> DistillationBatchResult:
    """
    A mixed-task batch in one padded pass. Every example sees its task's
    composed prompt (the shared matrix for tasks without factors) and weighs
    1/batch_size, so a task's share of the loss is its share of the slots.
    Gradients are summed per task, then chained into P* and (u_k, v_k).
    """
    cfg.validate()
    if not batch:
        raise ValueError("multitask_objective: empty batch")
    batch_size = batch_size or len(batch)
    task_ids = list(OrderedDict.fromkeys(task_id for task_id, _ in batch))
    if cfg.distills:
        missing = [t for t in task_ids if teachers is None or t not in teachers]
        if missing:
            raise ValueError(f"multitask_objective: distillation requested but no teacher prompt for {missing}")
    composed = {
        t: compose(shared, factors[t]) if t in factors else as_matrix(shared.matrix, "shared prompt")
        for t in task_ids
    }
    prompts = np.stack([composed[t] for t, _ in batch])
    teacher_prompts = None
    if cfg.use_logits_kl or cfg.use_hidden_mse:
        teacher_prompts = np.stack([teachers[t].matrix for t, _ in batch])
    examples = [ex for _, ex in batch]
    losses, grads = examples_objective(
        model, prompts, teacher_prompts, examples, cfg, np.full(len(batch), 1.0 / batch_size))

    rows = np.array([t for t, _ in batch])
    grad_shared = np.zeros_like(shared.matrix)
    grad_factors: Dict[str, Tuple[Vector, Vector]] = {}
    l_prompt = 0.0
    for t in task_ids:
        grad = grads[rows == t].sum(axis=0)
        if cfg.use_prompt_distance:
            share = float(np.sum(rows == t)) / batch_size
            l_prompt += share * prompt_distance_loss(teachers[t], composed[t])
            grad = grad + share * cfg.lambda_ * prompt_distance_grad(teachers[t], composed[t])
        if t in factors:
            dshared, du, dv = chain_gradients(grad, shared, factors[t])
            grad_factors[t] = (du, dv)
            grad_shared += dshared
        else:
            grad_shared += grad
    l_plm, l_logits, l_hidden, l_prompt, l_total = _checked_result(
        *losses, l_prompt, cfg.lambda_, cfg.use_prompt_distance)
    return DistillationBatchResult(
        l_plm=l_plm, l_logits=l_logits, l_hidden=l_hidden, l_prompt=l_prompt, l_total=l_total,
        grad_composed=check_finite(grads.sum(axis=0), "prompt gradient"),
        grad_shared=check_finite(grad_shared, "shared prompt gradient"),
        grad_factors=grad_factors, n_examples=len(batch),
    )
