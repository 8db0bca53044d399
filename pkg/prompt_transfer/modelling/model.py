import hashlib
import math
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dataclasses_json import dataclass_json

from prompt_transfer.modelling.numerics import (
    Matrix, Rng, ShapeMismatchError, as_matrix, check_finite,
    cross_entropy_from_logits, gelu, gelu_grad, layer_norm, layer_norm_backward,
    softmax_backward, softmax_with_temperature,
)

__all__ = [
    "ModelConfig", "FrozenModel", "ForwardTrace", "BatchTrace", "InvalidModelConfigError",
    "PAD", "BOS", "EOS", "SEP", "POSITION_GAIN", "INIT_SCHEMES",
    "weight_shapes", "init_model", "forward", "forward_batch", "task_loss", "task_loss_grad",
    "batch_task_losses", "batch_task_loss_grad", "backward_to_prompt", "backward_batch",
    "greedy_decode", "greedy_decode_batch",
]

PAD, BOS, EOS, SEP = 0, 1, 2, 3

# sinusoid amplitude is POSITION_GAIN / sqrt(d_model)
POSITION_GAIN = 0.5

INIT_SCHEMES = ("scaled", "gaussian")


class InvalidModelConfigError(ValueError):
    pass


@dataclass_json
@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 20
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 1
    dec_layers: int = 1
    ff_dim: int = 128
    max_src_len: int = 16
    max_tgt_len: int = 16
    max_prompt_len: int = 128

    def validate(self) -> 'ModelConfig':
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise InvalidModelConfigError(f"model config: {f.name}={value!r} must be a count >= 1")
        if self.d_model % self.n_heads != 0:
            raise InvalidModelConfigError(
                f"model config: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _ln_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _attn_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]


def _ffn_shapes(prefix: str, d: int, ff: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.w1", (d, ff)), (f"{prefix}.b1", (ff,)),
        (f"{prefix}.w2", (ff, d)), (f"{prefix}.b2", (d,)),
    ]


def weight_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Weight names and shapes in declaration (= checkpoint) order."""
    d, ff = cfg.d_model, cfg.ff_dim
    shapes = [("embed", (cfg.vocab_size, d))]
    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        shapes += _ln_shapes(f"{p}.ln1", d) + _attn_shapes(f"{p}.attn", d)
        shapes += _ln_shapes(f"{p}.ln2", d) + _ffn_shapes(f"{p}.ffn", d, ff)
    shapes += _ln_shapes("enc.ln_f", d)
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        shapes += _ln_shapes(f"{p}.ln1", d) + _attn_shapes(f"{p}.self", d)
        shapes += _ln_shapes(f"{p}.ln2", d) + _attn_shapes(f"{p}.cross", d)
        shapes += _ln_shapes(f"{p}.ln3", d) + _ffn_shapes(f"{p}.ffn", d, ff)
    shapes += _ln_shapes("dec.ln_f", d)
    return shapes


def _sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table * (POSITION_GAIN / math.sqrt(d))


class FrozenModel:
    """
    Immutable encoder-decoder: pre-LN blocks, GELU FFN, tied input/output
    embeddings, no dropout. Weight arrays are read-only.
    """

    def __init__(self, config: ModelConfig, weights: Dict[str, np.ndarray]):
        self.config = config.validate()
        expected = weight_shapes(config)
        unknown = set(weights) - {name for name, _ in expected}
        if unknown:
            raise InvalidModelConfigError(f"unexpected weights {sorted(unknown)}")
        self._weights: Dict[str, np.ndarray] = {}
        for name, shape in expected:
            if name not in weights:
                raise InvalidModelConfigError(f"missing weight {name}")
            w = np.array(weights[name], dtype=np.float64, copy=True)
            if w.shape != shape:
                raise ShapeMismatchError(f"weight {name}: expected {shape}, got {w.shape}")
            check_finite(w, f"weight {name}")
            w.setflags(write=False)
            self._weights[name] = w
        n_pos = config.max_prompt_len + max(config.max_src_len, config.max_tgt_len)
        self._positions = _sinusoidal_positions(n_pos, config.d_model)
        self._positions.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._weights[name]

    def weight_names(self) -> List[str]:
        return list(self._weights.keys())

    @property
    def embedding(self) -> np.ndarray:
        return self._weights["embed"]

    def positions(self, n: int) -> np.ndarray:
        return self._positions[:n]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, w in self._weights.items():
            h.update(name.encode("utf-8"))
            h.update(w.astype("<f8").tobytes())
        return h.hexdigest()

    def __repr__(self):
        return "FrozenModel(%s)" % self.config


def _orthogonal(rng: Rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(1.0, (n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _scaled_weight(rng: Rng, name: str, shape: Tuple[int, ...]) -> np.ndarray:
    kind = name.rsplit(".", 1)[-1]
    if kind in ("wq", "wk", "wv", "wo"):
        return _orthogonal(rng, shape[0])
    # embed and w1 have d_model rows, w2 has ff_dim rows; both use 1/sqrt(fan)
    fan = shape[1] if name == "embed" else shape[0]
    return rng.normal(1.0 / math.sqrt(fan), shape)


def init_model(
        cfg: ModelConfig,
        rng: Rng,
        scheme: str = "scaled",
        init_std: float = 0.02,
) -> FrozenModel:
    """
    "scaled": unit-norm embedding rows, orthogonal attention projections and
    fan-in scaled FFN weights. "gaussian": every matrix N(0, init_std^2).
    Gains are 1 and biases 0 under both schemes.
    """
    cfg.validate()
    if scheme not in INIT_SCHEMES:
        raise InvalidModelConfigError(f"init scheme {scheme!r} not in {INIT_SCHEMES}")
    weights = {}
    for name, shape in weight_shapes(cfg):
        if name.endswith(".g"):
            weights[name] = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")):
            weights[name] = np.zeros(shape)
        elif scheme == "scaled":
            weights[name] = _scaled_weight(rng.fork("weights", name), name, shape)
        else:
            weights[name] = rng.fork("weights", name).normal(init_std, shape)
    return FrozenModel(cfg, weights)


@dataclass
class BatchTrace:
    """Padded activations of one batch; rows past each example's length are garbage."""
    logits: np.ndarray                  # B x T_tgt x vocab
    enc_hidden: np.ndarray              # B x (l + T_src) x d
    dec_hidden: np.ndarray              # B x T_tgt x d
    enc_mask: np.ndarray                # B x (l + T_src), bool
    tgt_mask: np.ndarray                # B x T_tgt, bool
    tgt_ids: np.ndarray                 # B x T_tgt, PAD past the end
    prompt_len: int
    caches: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    def enc_lens(self) -> np.ndarray:
        return self.enc_mask.sum(axis=1)

    def tgt_lens(self) -> np.ndarray:
        return self.tgt_mask.sum(axis=1)


@dataclass
class ForwardTrace:
    logits: Matrix                      # n_tgt x vocab
    enc_hidden: Matrix                  # (l + n_src) x d
    dec_hidden: Matrix                  # n_tgt x d
    prompt_len: int
    src_ids: List[int]
    tgt_ids: List[int]
    caches: Dict[str, Any] = field(default_factory=dict, repr=False)


# ---- blocks over (B, T, d): each forward returns (out, cache), each backward consumes the cache

def _attention_forward(
        model: FrozenModel, prefix: str, q_in: np.ndarray, kv_in: np.ndarray, key_mask: np.ndarray, causal: bool,
):
    cfg = model.config
    h, hd = cfg.n_heads, cfg.head_dim
    b, tq, tk = q_in.shape[0], q_in.shape[1], kv_in.shape[1]
    q = (q_in @ model[f"{prefix}.wq"]).reshape(b, tq, h, hd).transpose(0, 2, 1, 3)
    k = (kv_in @ model[f"{prefix}.wk"]).reshape(b, tk, h, hd).transpose(0, 2, 1, 3)
    v = (kv_in @ model[f"{prefix}.wv"]).reshape(b, tk, h, hd).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(hd)
    blocked = ~key_mask[:, None, None, :]
    if causal:
        blocked = blocked | np.triu(np.ones((tq, tk), dtype=bool), k=1)[None, None]
    attn = softmax_with_temperature(np.where(blocked, -np.inf, scores))
    merged = (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, cfg.d_model)
    return merged @ model[f"{prefix}.wo"], (q, k, v, attn)


def _attention_backward(model: FrozenModel, prefix: str, cache, dout: np.ndarray):
    q, k, v, attn = cache
    cfg = model.config
    h, hd = cfg.n_heads, cfg.head_dim

    def _split(x):
        return x.reshape(x.shape[0], x.shape[1], h, hd).transpose(0, 2, 1, 3)

    def _merge(x):
        return x.transpose(0, 2, 1, 3).reshape(x.shape[0], x.shape[2], cfg.d_model)

    dmerged = _split(dout @ model[f"{prefix}.wo"].T)
    dattn = dmerged @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dmerged
    dscores = softmax_backward(attn, dattn) / math.sqrt(hd)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dq_in = _merge(dq) @ model[f"{prefix}.wq"].T
    dkv_in = _merge(dk) @ model[f"{prefix}.wk"].T + _merge(dv) @ model[f"{prefix}.wv"].T
    return dq_in, dkv_in


def _ffn_forward(model: FrozenModel, prefix: str, x: np.ndarray):
    pre = x @ model[f"{prefix}.w1"] + model[f"{prefix}.b1"]
    return gelu(pre) @ model[f"{prefix}.w2"] + model[f"{prefix}.b2"], pre


def _ffn_backward(model: FrozenModel, prefix: str, pre: np.ndarray, dout: np.ndarray):
    dpre = (dout @ model[f"{prefix}.w2"].T) * gelu_grad(pre)
    return dpre @ model[f"{prefix}.w1"].T


def _ln(model: FrozenModel, prefix: str, x: np.ndarray):
    return layer_norm(x, model[f"{prefix}.g"], model[f"{prefix}.b"], return_cache=True)


def _ln_backward(model: FrozenModel, prefix: str, cache, dout: np.ndarray):
    return layer_norm_backward(dout, cache, model[f"{prefix}.g"])


def _encoder_layer_forward(model: FrozenModel, i: int, x: np.ndarray, mask: np.ndarray):
    p = f"enc.{i}"
    a, ln1 = _ln(model, f"{p}.ln1", x)
    att, att_cache = _attention_forward(model, f"{p}.attn", a, a, mask, causal=False)
    h = x + att
    b, ln2 = _ln(model, f"{p}.ln2", h)
    ff, ff_cache = _ffn_forward(model, f"{p}.ffn", b)
    return h + ff, (ln1, att_cache, ln2, ff_cache)


def _encoder_layer_backward(model: FrozenModel, i: int, cache, dout: np.ndarray):
    p = f"enc.{i}"
    ln1, att_cache, ln2, ff_cache = cache
    dh = dout + _ln_backward(model, f"{p}.ln2", ln2, _ffn_backward(model, f"{p}.ffn", ff_cache, dout))
    dq, dkv = _attention_backward(model, f"{p}.attn", att_cache, dh)
    return dh + _ln_backward(model, f"{p}.ln1", ln1, dq + dkv)


def _decoder_layer_forward(
        model: FrozenModel, i: int, y: np.ndarray, y_mask: np.ndarray, enc_hidden: np.ndarray, enc_mask: np.ndarray,
):
    p = f"dec.{i}"
    a, ln1 = _ln(model, f"{p}.ln1", y)
    sa, self_cache = _attention_forward(model, f"{p}.self", a, a, y_mask, causal=True)
    y1 = y + sa
    b, ln2 = _ln(model, f"{p}.ln2", y1)
    ca, cross_cache = _attention_forward(model, f"{p}.cross", b, enc_hidden, enc_mask, causal=False)
    y2 = y1 + ca
    c, ln3 = _ln(model, f"{p}.ln3", y2)
    ff, ff_cache = _ffn_forward(model, f"{p}.ffn", c)
    return y2 + ff, (ln1, self_cache, ln2, cross_cache, ln3, ff_cache)


def _decoder_layer_backward(model: FrozenModel, i: int, cache, dout: np.ndarray):
    p = f"dec.{i}"
    ln1, self_cache, ln2, cross_cache, ln3, ff_cache = cache
    dy2 = dout + _ln_backward(model, f"{p}.ln3", ln3, _ffn_backward(model, f"{p}.ffn", ff_cache, dout))
    dcq, denc = _attention_backward(model, f"{p}.cross", cross_cache, dy2)
    dy1 = dy2 + _ln_backward(model, f"{p}.ln2", ln2, dcq)
    dq, dkv = _attention_backward(model, f"{p}.self", self_cache, dy1)
    return dy1 + _ln_backward(model, f"{p}.ln1", ln1, dq + dkv), denc


# ---- input checks and padding

def _check_ids(model: FrozenModel, ids: Sequence[int], what: str, max_len: int) -> List[int]:
    ids = [int(t) for t in ids]
    if len(ids) > max_len:
        raise ShapeMismatchError(f"{what}: length {len(ids)} exceeds maximum {max_len}")
    bad = [t for t in ids if not 0 <= t < model.config.vocab_size]
    if bad:
        raise ShapeMismatchError(f"{what}: token ids {bad} outside vocab {model.config.vocab_size}")
    return ids


def _check_prompt(model: FrozenModel, prompt) -> Matrix:
    prompt = as_matrix(prompt, "prompt")
    cfg = model.config
    if prompt.shape[1] != cfg.d_model:
        raise ShapeMismatchError(f"prompt: {prompt.shape[1]} columns, model d_model={cfg.d_model}")
    if prompt.shape[0] > cfg.max_prompt_len:
        raise ShapeMismatchError(f"prompt: length {prompt.shape[0]} exceeds maximum {cfg.max_prompt_len}")
    return prompt


def _check_prompts(model: FrozenModel, prompts, batch_size: int) -> np.ndarray:
    """One (l, d) prompt shared by the batch, or one prompt per example (B, l, d)."""
    arr = np.asarray(prompts, dtype=np.float64)
    if arr.ndim == 2:
        return np.broadcast_to(_check_prompt(model, arr), (batch_size,) + arr.shape)
    if arr.ndim != 3 or arr.shape[0] != batch_size:
        raise ShapeMismatchError(f"prompts: expected (l, d) or ({batch_size}, l, d), got {arr.shape}")
    _check_prompt(model, arr[0])
    return arr


def _pad(rows: Sequence[Sequence[int]], width: int) -> Tuple[np.ndarray, np.ndarray]:
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for r, row in enumerate(rows):
        ids[r, :len(row)] = row
        mask[r, :len(row)] = True
    return ids, mask


def _encode(model: FrozenModel, prompts: np.ndarray, src_rows: Sequence[List[int]]):
    b, l = prompts.shape[0], prompts.shape[1]
    width = max((len(s) for s in src_rows), default=0)
    src_ids, src_mask = _pad(src_rows, width)
    enc_mask = np.concatenate([np.ones((b, l), dtype=bool), src_mask], axis=1)
    if not np.all(enc_mask.any(axis=1)):
        raise ShapeMismatchError("encoder input is empty: no prompt rows and no source tokens")
    x = np.concatenate([prompts, model.embedding[src_ids]], axis=1)
    x = x + model.positions(x.shape[1])
    caches = []
    for i in range(model.config.enc_layers):
        x, cache = _encoder_layer_forward(model, i, x, enc_mask)
        caches.append(cache)
    enc_hidden, ln_cache = _ln(model, "enc.ln_f", x)
    return enc_hidden, enc_mask, caches, ln_cache


def _decode(model: FrozenModel, enc_hidden: np.ndarray, enc_mask: np.ndarray, dec_in: np.ndarray, dec_mask: np.ndarray):
    y = model.embedding[dec_in] + model.positions(dec_in.shape[1])
    caches = []
    for i in range(model.config.dec_layers):
        y, cache = _decoder_layer_forward(model, i, y, dec_mask, enc_hidden, enc_mask)
        caches.append(cache)
    dec_hidden, ln_cache = _ln(model, "dec.ln_f", y)
    return dec_hidden, dec_hidden @ model.embedding.T, caches, ln_cache


# ---- public passes

def forward_batch(
        model: FrozenModel,
        prompts: Union[Matrix, np.ndarray],
        src_rows: Sequence[Sequence[int]],
        tgt_rows: Sequence[Sequence[int]],
) -> BatchTrace:
    """
    Teacher-forced pass over a padded batch. The encoder reads
    [prompt_b ; embed(src_b)], the decoder BOS + tgt_b[:-1]; padded key
    positions are masked out of every attention.
    """
    cfg = model.config
    if len(src_rows) != len(tgt_rows) or not src_rows:
        raise ShapeMismatchError(f"forward_batch: {len(src_rows)} sources vs {len(tgt_rows)} targets")
    srcs = [_check_ids(model, s, "src_ids", cfg.max_src_len) for s in src_rows]
    tgts = [_check_ids(model, t, "tgt_ids", cfg.max_tgt_len) for t in tgt_rows]
    if any(not t for t in tgts):
        raise ShapeMismatchError("tgt_ids: empty target")
    prompts = _check_prompts(model, prompts, len(srcs))
    enc_hidden, enc_mask, enc_caches, enc_ln = _encode(model, prompts, srcs)
    width = max(len(t) for t in tgts)
    tgt_ids, tgt_mask = _pad(tgts, width)
    dec_in, _ = _pad([[BOS] + t[:-1] for t in tgts], width)
    dec_hidden, logits, dec_caches, dec_ln = _decode(model, enc_hidden, enc_mask, dec_in, tgt_mask)
    return BatchTrace(
        logits=logits,
        enc_hidden=enc_hidden,
        dec_hidden=dec_hidden,
        enc_mask=enc_mask,
        tgt_mask=tgt_mask,
        tgt_ids=tgt_ids,
        prompt_len=prompts.shape[1],
        caches=dict(enc=enc_caches, enc_ln=enc_ln, dec=dec_caches, dec_ln=dec_ln),
    )


def batch_task_losses(trace: BatchTrace) -> np.ndarray:
    """Per-example mean cross-entropy over that example's target positions."""
    b, t, vocab = trace.logits.shape
    ce = cross_entropy_from_logits(trace.logits.reshape(b * t, vocab), trace.tgt_ids.reshape(-1)).reshape(b, t)
    return np.where(trace.tgt_mask, ce, 0.0).sum(axis=1) / trace.tgt_lens()


def batch_task_loss_grad(trace: BatchTrace, weights: np.ndarray) -> np.ndarray:
    """d(sum_b weights[b] * loss_b) / d logits; zero on padded positions."""
    grad = softmax_with_temperature(trace.logits)
    b, t = trace.tgt_ids.shape
    grad[np.arange(b)[:, None], np.arange(t)[None, :], trace.tgt_ids] -= 1.0
    scale = np.asarray(weights, dtype=np.float64) / trace.tgt_lens()
    return grad * (scale[:, None] * trace.tgt_mask)[:, :, None]


def backward_batch(
        model: FrozenModel,
        trace: BatchTrace,
        dloss_dlogits: np.ndarray,
        dloss_dhidden_enc: Optional[np.ndarray] = None,
        dloss_dhidden_dec: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-example gradient w.r.t. the prompt rows, shape (B, l, d); weights never receive gradient."""
    if dloss_dhidden_enc is None:
        dloss_dhidden_enc = np.zeros_like(trace.enc_hidden)
    if dloss_dhidden_dec is None:
        dloss_dhidden_dec = np.zeros_like(trace.dec_hidden)
    for what, grad, ref in (
            ("logits", dloss_dlogits, trace.logits),
            ("encoder hidden", dloss_dhidden_enc, trace.enc_hidden),
            ("decoder hidden", dloss_dhidden_dec, trace.dec_hidden)):
        if np.shape(grad) != ref.shape:
            raise ShapeMismatchError(f"backward: {what} gradient {np.shape(grad)} vs trace {ref.shape}")

    dh_dec = dloss_dhidden_dec + dloss_dlogits @ model.embedding
    dy = _ln_backward(model, "dec.ln_f", trace.caches["dec_ln"], dh_dec)
    denc = np.array(dloss_dhidden_enc, dtype=np.float64, copy=True)
    for i in reversed(range(model.config.dec_layers)):
        dy, de = _decoder_layer_backward(model, i, trace.caches["dec"][i], dy)
        denc += de
    dx = _ln_backward(model, "enc.ln_f", trace.caches["enc_ln"], denc)
    for i in reversed(range(model.config.enc_layers)):
        dx = _encoder_layer_backward(model, i, trace.caches["enc"][i], dx)
    return check_finite(dx[:, :trace.prompt_len].copy(), "prompt gradient")


def greedy_decode_batch(
        model: FrozenModel,
        prompts: Union[Matrix, np.ndarray],
        src_rows: Sequence[Sequence[int]],
        max_lens: Union[None, int, Sequence[int]] = None,
) -> List[List[int]]:
    """Argmax decoding of a whole batch in lockstep; each row stops at EOS or its max length."""
    cfg = model.config
    if not src_rows:
        return []
    srcs = [_check_ids(model, s, "src_ids", cfg.max_src_len) for s in src_rows]
    prompts = _check_prompts(model, prompts, len(srcs))
    if max_lens is None or isinstance(max_lens, (int, np.integer)):
        max_lens = [cfg.max_tgt_len if max_lens is None else int(max_lens)] * len(srcs)
    limits = np.minimum(np.asarray(max_lens, dtype=np.int64), cfg.max_tgt_len)
    enc_hidden, enc_mask, _, _ = _encode(model, prompts, srcs)
    outs: List[List[int]] = [[] for _ in srcs]
    done = limits <= 0
    dec_in = np.full((len(srcs), 1), BOS, dtype=np.int64)
    while not done.all():
        _, logits, _, _ = _decode(model, enc_hidden, enc_mask, dec_in, np.ones(dec_in.shape, dtype=bool))
        tokens = np.argmax(logits[:, -1], axis=-1)
        for r, token in enumerate(tokens):
            if done[r]:
                continue
            if token == EOS:
                done[r] = True
                continue
            outs[r].append(int(token))
            done[r] = len(outs[r]) >= limits[r]
        dec_in = np.concatenate([dec_in, tokens[:, None]], axis=1)
    return outs


# ---- single-example wrappers

def forward(model: FrozenModel, prompt: Matrix, src_ids: Sequence[int], tgt_ids: Sequence[int]) -> ForwardTrace:
    """
    Encoder reads [prompt ; embed(src)], decoder is teacher-forced with
    BOS + tgt[:-1], so logits row i scores tgt[i].
    """
    prompt = _check_prompt(model, prompt)
    batch = forward_batch(model, prompt, [src_ids], [tgt_ids])
    return ForwardTrace(
        logits=batch.logits[0],
        enc_hidden=batch.enc_hidden[0],
        dec_hidden=batch.dec_hidden[0],
        prompt_len=batch.prompt_len,
        src_ids=[int(t) for t in src_ids],
        tgt_ids=[int(t) for t in tgt_ids],
        caches=dict(batch=batch),
    )


def task_loss(trace: ForwardTrace, tgt_ids: Sequence[int]) -> float:
    if len(tgt_ids) != trace.logits.shape[0]:
        raise ShapeMismatchError(f"task_loss: {trace.logits.shape[0]} positions vs {len(tgt_ids)} targets")
    return float(np.mean(cross_entropy_from_logits(trace.logits, tgt_ids)))


def task_loss_grad(trace: ForwardTrace, tgt_ids: Sequence[int]) -> Matrix:
    n = trace.logits.shape[0]
    if len(tgt_ids) != n:
        raise ShapeMismatchError(f"task_loss_grad: {n} positions vs {len(tgt_ids)} targets")
    grad = softmax_with_temperature(trace.logits)
    grad[np.arange(n), list(tgt_ids)] -= 1.0
    return grad / n


def backward_to_prompt(
        model: FrozenModel,
        trace: ForwardTrace,
        dloss_dlogits: Matrix,
        dloss_dhidden_enc: Optional[Matrix] = None,
        dloss_dhidden_dec: Optional[Matrix] = None,
) -> Matrix:
    """Gradient w.r.t. the prompt rows only; weights never receive gradient."""
    for what, grad, ref in (
            ("logits", dloss_dlogits, trace.logits),
            ("encoder hidden", dloss_dhidden_enc, trace.enc_hidden),
            ("decoder hidden", dloss_dhidden_dec, trace.dec_hidden)):
        if grad is not None and np.shape(grad) != ref.shape:
            raise ShapeMismatchError(f"backward: {what} gradient {np.shape(grad)} vs trace {ref.shape}")

    def _lift(g):
        return None if g is None else np.asarray(g, dtype=np.float64)[None]

    return backward_batch(
        model, trace.caches["batch"], _lift(dloss_dlogits), _lift(dloss_dhidden_enc), _lift(dloss_dhidden_dec))[0]


def greedy_decode(
        model: FrozenModel,
        prompt: Matrix,
        src_ids: Sequence[int],
        max_len: Optional[int] = None,
) -> List[int]:
    """Argmax decoding until EOS; the returned tokens exclude EOS."""
    prompt = _check_prompt(model, prompt)
    return greedy_decode_batch(model, prompt, [src_ids], max_len)[0]
