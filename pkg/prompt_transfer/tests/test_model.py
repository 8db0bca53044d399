import math

import numpy as np
import pytest

from prompt_transfer.modelling.model import (
    EOS, PAD, ForwardTrace, InvalidModelConfigError, ModelConfig, backward_batch, backward_to_prompt,
    batch_task_loss_grad, batch_task_losses, forward, forward_batch, greedy_decode, greedy_decode_batch,
    init_model, task_loss, task_loss_grad, weight_shapes,
)
from prompt_transfer.modelling.numerics import Rng, ShapeMismatchError
from prompt_transfer.tests.conftest import TINY_CONFIG
from prompt_transfer.tests.finite_difference import assert_gradient_close, central_difference

SRC = [5, 9, 7]
TGT = [7, 9, 5, EOS]


def _prompt(model, l, seed=0):
    return Rng(seed).normal(0.3, (l, model.config.d_model))


def test_init_is_deterministic():
    a = init_model(TINY_CONFIG, Rng(3))
    b = init_model(TINY_CONFIG, Rng(3))
    for name in a.weight_names():
        assert a[name].tobytes() == b[name].tobytes()
    assert a.checksum() == b.checksum()
    assert init_model(TINY_CONFIG, Rng(4)).checksum() != a.checksum()


def test_config_validation():
    init_model(ModelConfig(d_model=16, n_heads=2), Rng(0))
    with pytest.raises(InvalidModelConfigError):
        init_model(ModelConfig(d_model=15, n_heads=2), Rng(0))
    with pytest.raises(InvalidModelConfigError):
        ModelConfig(enc_layers=0).validate()


def test_weights_are_frozen(tiny_model):
    with pytest.raises(ValueError):
        tiny_model["embed"][0, 0] = 1.0
    names = [name for name, _ in weight_shapes(TINY_CONFIG)]
    assert names[0] == "embed" and names[-1] == "dec.ln_f.b"
    assert tiny_model.weight_names() == names


def test_forward_shapes(tiny_model):
    for l in (0, 1, 4):
        trace = forward(tiny_model, _prompt(tiny_model, l), SRC, TGT)
        assert trace.enc_hidden.shape == (l + len(SRC), 16)
        assert trace.dec_hidden.shape == (len(TGT), 16)
        assert trace.logits.shape == (len(TGT), 20)


def test_forward_is_pure(tiny_model):
    p = _prompt(tiny_model, 4)
    a = forward(tiny_model, p, SRC, TGT)
    b = forward(tiny_model, p, SRC, TGT)
    assert a.logits.tobytes() == b.logits.tobytes()
    assert a.enc_hidden.tobytes() == b.enc_hidden.tobytes()


def test_prompt_perturbation_changes_logits(tiny_model):
    p = _prompt(tiny_model, 4)
    q = p.copy()
    q[2, 5] += 0.1
    assert not np.array_equal(forward(tiny_model, p, SRC, TGT).logits, forward(tiny_model, q, SRC, TGT).logits)


def test_forward_rejects_bad_inputs(tiny_model):
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, np.zeros((2, 8)), SRC, TGT)
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, _prompt(tiny_model, 2), [25], TGT)
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, _prompt(tiny_model, 2), [5] * 17, TGT)
    with pytest.raises(ShapeMismatchError):
        forward(tiny_model, _prompt(tiny_model, 17), SRC, TGT)


def test_task_loss_closed_forms(tiny_model):
    trace = forward(tiny_model, _prompt(tiny_model, 2), SRC, TGT)
    assert task_loss(trace, TGT) >= 0.0
    uniform = ForwardTrace(
        logits=np.zeros((4, 20)), enc_hidden=trace.enc_hidden, dec_hidden=trace.dec_hidden,
        prompt_len=2, src_ids=SRC, tgt_ids=TGT)
    assert task_loss(uniform, TGT) == pytest.approx(math.log(20), abs=1e-12)
    forced = np.full((4, 20), -1e4)
    forced[np.arange(4), TGT] = 1e4
    uniform.logits = forced
    assert task_loss(uniform, TGT) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeMismatchError):
        task_loss(trace, TGT[:-1])


def test_zero_upstream_gradient_gives_zero(tiny_model):
    trace = forward(tiny_model, _prompt(tiny_model, 4), SRC, TGT)
    grad = backward_to_prompt(tiny_model, trace, np.zeros_like(trace.logits))
    assert grad.shape == (4, 16)
    assert np.all(grad == 0.0)


def test_backward_is_linear(tiny_model):
    trace = forward(tiny_model, _prompt(tiny_model, 4), SRC, TGT)
    rng = Rng(8)
    g1, g2 = rng.normal(1.0, trace.logits.shape), rng.normal(1.0, trace.logits.shape)
    both = backward_to_prompt(tiny_model, trace, g1 + g2)
    np.testing.assert_allclose(
        both, backward_to_prompt(tiny_model, trace, g1) + backward_to_prompt(tiny_model, trace, g2),
        rtol=1e-10, atol=1e-14)


def test_backward_shape_mismatch(tiny_model):
    trace = forward(tiny_model, _prompt(tiny_model, 4), SRC, TGT)
    with pytest.raises(ShapeMismatchError):
        backward_to_prompt(tiny_model, trace, np.zeros((3, 20)))


def test_task_loss_gradient_matches_finite_differences(tiny_model):
    p = _prompt(tiny_model, 4)
    trace = forward(tiny_model, p, SRC, TGT)
    analytic = backward_to_prompt(tiny_model, trace, task_loss_grad(trace, TGT))
    numeric = central_difference(lambda pp: task_loss(forward(tiny_model, pp, SRC, TGT), TGT), p)
    assert_gradient_close(analytic, numeric)


def test_hidden_state_gradient_matches_finite_differences(tiny_model):
    p = _prompt(tiny_model, 3)
    trace = forward(tiny_model, p, SRC, TGT)
    rng = Rng(21)
    w_enc, w_dec = rng.normal(1.0, trace.enc_hidden.shape), rng.normal(1.0, trace.dec_hidden.shape)

    def f(pp):
        t = forward(tiny_model, pp, SRC, TGT)
        return float(np.sum(w_enc * t.enc_hidden) + np.sum(w_dec * t.dec_hidden))

    analytic = backward_to_prompt(tiny_model, trace, np.zeros_like(trace.logits), w_enc, w_dec)
    assert_gradient_close(analytic, central_difference(f, p))


def test_frozen_weights_survive_backward(tiny_model):
    before = tiny_model.checksum()
    trace = forward(tiny_model, _prompt(tiny_model, 4), SRC, TGT)
    backward_to_prompt(tiny_model, trace, task_loss_grad(trace, TGT))
    assert tiny_model.checksum() == before


def test_greedy_decode(tiny_model):
    p = _prompt(tiny_model, 2)
    out = greedy_decode(tiny_model, p, SRC, max_len=5)
    assert len(out) <= 5
    assert EOS not in out
    assert out == greedy_decode(tiny_model, p, SRC, max_len=5)
    assert greedy_decode(tiny_model, p, SRC, max_len=0) == []


def test_scaled_init():
    model = init_model(TINY_CONFIG, Rng(5))
    d = TINY_CONFIG.d_model
    norms = np.linalg.norm(model.embedding, axis=1)
    assert 0.4 < norms.mean() < 1.6
    wq = model["enc.0.attn.wq"]
    np.testing.assert_allclose(wq.T @ wq, np.eye(d), atol=1e-12)
    assert np.std(model["dec.0.ffn.w2"]) == pytest.approx(1.0 / math.sqrt(TINY_CONFIG.ff_dim), rel=0.2)
    assert np.all(model["dec.0.ln3.g"] == 1.0) and np.all(model["dec.0.ffn.b1"] == 0.0)
    with pytest.raises(InvalidModelConfigError):
        init_model(TINY_CONFIG, Rng(5), scheme="xavier")


BATCH_SRC = [[5, 9, 7], [4, 4, 12, 6, 8], [11]]
BATCH_TGT = [[7, 9, 5, EOS], [12, EOS], [11, 11, 11, 11, 11, EOS]]


def test_padded_batch_matches_single_examples(tiny_model):
    p = _prompt(tiny_model, 3)
    batch = forward_batch(tiny_model, p, BATCH_SRC, BATCH_TGT)
    assert batch.logits.shape == (3, 6, 20)
    assert batch.enc_mask.sum(axis=1).tolist() == [6, 8, 4]
    assert batch.tgt_ids[1].tolist() == [12, EOS, PAD, PAD, PAD, PAD]
    losses = batch_task_losses(batch)
    weights = np.array([0.2, 0.3, 0.5])
    grads = backward_batch(tiny_model, batch, batch_task_loss_grad(batch, weights))
    for b, (src, tgt) in enumerate(zip(BATCH_SRC, BATCH_TGT)):
        single = forward(tiny_model, p, src, tgt)
        n_enc, n_tgt = 3 + len(src), len(tgt)
        np.testing.assert_allclose(batch.logits[b, :n_tgt], single.logits, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(batch.enc_hidden[b, :n_enc], single.enc_hidden, rtol=1e-10, atol=1e-12)
        assert losses[b] == pytest.approx(task_loss(single, tgt), abs=1e-10)
        expected = weights[b] * backward_to_prompt(tiny_model, single, task_loss_grad(single, tgt))
        np.testing.assert_allclose(grads[b], expected, rtol=1e-8, atol=1e-12)


def test_per_example_prompts(tiny_model):
    prompts = np.stack([_prompt(tiny_model, 2, seed=s) for s in range(3)])
    batch = forward_batch(tiny_model, prompts, BATCH_SRC, BATCH_TGT)
    for b in range(3):
        single = forward(tiny_model, prompts[b], BATCH_SRC[b], BATCH_TGT[b])
        np.testing.assert_allclose(batch.logits[b, :len(BATCH_TGT[b])], single.logits, rtol=1e-10, atol=1e-12)
    with pytest.raises(ShapeMismatchError):
        forward_batch(tiny_model, prompts[:2], BATCH_SRC, BATCH_TGT)


def test_padded_positions_carry_no_loss(tiny_model):
    batch = forward_batch(tiny_model, _prompt(tiny_model, 3), BATCH_SRC, BATCH_TGT)
    grad = batch_task_loss_grad(batch, np.ones(3))
    assert np.all(grad[~batch.tgt_mask] == 0.0)
    assert np.all(grad[batch.tgt_mask].any(axis=-1))
    before = batch_task_losses(batch)
    batch.logits[~batch.tgt_mask] = 1e6
    assert np.array_equal(batch_task_losses(batch), before)


def test_greedy_decode_batch(tiny_model):
    p = _prompt(tiny_model, 2)
    outs = greedy_decode_batch(tiny_model, p, BATCH_SRC, [4, 0, 2])
    assert [len(o) <= m for o, m in zip(outs, [4, 0, 2])] == [True] * 3
    assert outs[1] == []
    for src, m, out in zip(BATCH_SRC, [4, 0, 2], outs):
        assert greedy_decode(tiny_model, p, src, max_len=m) == out
    assert greedy_decode_batch(tiny_model, p, []) == []
