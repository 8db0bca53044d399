from typing import Dict, Tuple

import numpy as np

from prompt_transfer.modelling.numerics import ShapeMismatchError, check_finite

__all__ = ["sgd_step", "SgdOptimizer", "AdamOptimizer", "make_optimizer"]


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """p <- p - lr * g; returns a new array."""
    params, grads = np.asarray(params, dtype=np.float64), np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeMismatchError(f"sgd_step: params {params.shape} vs grads {grads.shape}")
    if not lr > 0:
        raise ValueError(f"sgd_step: lr={lr} must be > 0")
    return check_finite(params - lr * grads, "updated parameters")


class SgdOptimizer:
    def step(self, name: str, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        return sgd_step(params, grads, lr)


class AdamOptimizer:
    """Per-parameter Adam moments keyed by parameter name."""

    def __init__(self, betas: Tuple[float, float] = (0.9, 0.95), eps: float = 1e-6):
        self.betas = betas
        self.eps = eps
        self._state: Dict[str, Tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, name: str, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        params, grads = np.asarray(params, dtype=np.float64), np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape:
            raise ShapeMismatchError(f"adam step {name}: params {params.shape} vs grads {grads.shape}")
        if not lr > 0:
            raise ValueError(f"adam step {name}: lr={lr} must be > 0")
        b1, b2 = self.betas
        m, v, t = self._state.get(name, (np.zeros_like(params), np.zeros_like(params), 0))
        t += 1
        m = b1 * m + (1 - b1) * grads
        v = b2 * v + (1 - b2) * np.square(grads)
        self._state[name] = (m, v, t)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return check_finite(params - lr * m_hat / (np.sqrt(v_hat) + self.eps), f"{name} after adam step")


def make_optimizer(cfg):
    if cfg.optimizer == "adam":
        return AdamOptimizer(betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
    return SgdOptimizer()
