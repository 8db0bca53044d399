import hashlib
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, logsumexp

__all__ = [
    "Matrix", "Vector", "Rng", "ShapeMismatchError", "NonFiniteError", "LN_EPS",
    "as_matrix", "as_vector", "check_finite",
    "matmul", "hadamard", "outer", "softmax_with_temperature",
    "transpose", "add", "scale", "row_slice", "argmax",
    "layer_norm", "layer_norm_backward", "gelu", "gelu_grad",
    "softmax_backward", "cross_entropy_from_logits", "l2_norm", "cosine",
]

# 2-D / 1-D float64 numpy arrays
Matrix = np.ndarray
Vector = np.ndarray

LN_EPS = 1e-6


class ShapeMismatchError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def as_matrix(x, name: str = "matrix") -> Matrix:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected 2-D array, got shape {arr.shape}")
    return arr


def as_vector(x, name: str = "vector") -> Vector:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"{name}: expected 1-D array, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: non-finite entries")
    return arr


def _same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a, "matmul lhs"), as_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.shape} x {b.shape} not conformable")
    return check_finite(a @ b, "matmul")


def hadamard(a: Matrix, b: Matrix) -> Matrix:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape("hadamard", a, b)
    return check_finite(a * b, "hadamard")


def outer(u: Vector, v: Vector) -> Matrix:
    u, v = as_vector(u, "outer u"), as_vector(v, "outer v")
    if u.size == 0 or v.size == 0:
        raise ShapeMismatchError(f"outer: zero-length input ({u.size}, {v.size})")
    return check_finite(np.outer(u, v), "outer")


def softmax_with_temperature(z: np.ndarray, temp: float = 1.0) -> np.ndarray:
    """
    Softmax along the last axis of z / temp, max-subtracted.
    Works for a single logit vector or a (positions x vocab) matrix.
    """
    if not temp > 0:
        raise ValueError(f"softmax temperature must be positive, got {temp}")
    z = np.asarray(z, dtype=np.float64) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    # d/dz of softmax along the last axis
    return probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))


def transpose(a: Matrix) -> Matrix:
    return as_matrix(a).T.copy()


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _same_shape("add", a, b)
    return check_finite(a + b, "add")


def scale(a: np.ndarray, k: float) -> np.ndarray:
    return check_finite(np.asarray(a, dtype=np.float64) * k, "scale")


def row_slice(a: Matrix, start: int, stop: int) -> Matrix:
    a = as_matrix(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeMismatchError(f"row_slice: [{start}:{stop}] out of range for {a.shape}")
    return a[start:stop].copy()


def argmax(z: np.ndarray) -> Union[int, np.ndarray]:
    out = np.argmax(np.asarray(z), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def layer_norm(
        x: np.ndarray,
        gain: Vector,
        bias: Vector,
        eps: float = LN_EPS,
        *,
        return_cache: bool = False,
):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gain * xhat + bias
    if return_cache:
        return out, (xhat, inv_std)
    return out


def layer_norm_backward(
        dout: np.ndarray,
        cache: Tuple[np.ndarray, np.ndarray],
        gain: Vector,
) -> np.ndarray:
    xhat, inv_std = cache
    dxhat = dout * gain
    return inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def cross_entropy_from_logits(logits: Matrix, targets: Sequence[int]) -> Vector:
    """Per-row negative log-likelihood of `targets` under softmax(logits)."""
    logits = as_matrix(logits, "logits")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"cross_entropy: {logits.shape[0]} logit rows vs {targets.shape[0]} targets")
    lse = logsumexp(logits, axis=-1)
    return lse - logits[np.arange(len(targets)), targets]


def l2_norm(x: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(x))))


def cosine(u: Vector, v: Vector) -> float:
    u, v = as_vector(u, "cosine u"), as_vector(v, "cosine v")
    _same_shape("cosine", u, v)
    nu, nv = l2_norm(u), l2_norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine: zero-norm vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _derive_seed(seed: int, tags: Tuple) -> int:
    h = hashlib.sha256(("%d/" % seed + "/".join(map(str, tags))).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """
    Philox counter-based generator. `fork(*tags)` derives an independent
    child stream from (seed, tags), so every consumer gets a stable stream
    no matter in which order the others draw.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def fork(self, *tags) -> 'Rng':
        return Rng(_derive_seed(self.seed, tags))

    def normal(self, std: float, size) -> np.ndarray:
        return self._gen.normal(0.0, std, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True, p: Optional[np.ndarray] = None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def __repr__(self):
        return "Rng(seed=%d)" % self.seed
