import math

import numpy as np
import pytest

from prompt_transfer.modelling.loss import (
    DistillConfig, batch_objective, hidden_mse_grads, hidden_mse_loss, kl_logits_grad, kl_logits_loss,
    prompt_distance_grad, prompt_distance_loss, prompt_objective, total_loss,
)
from prompt_transfer.modelling.numerics import Rng, ShapeMismatchError
from prompt_transfer.modelling.prompts import (
    SharedPrompt, TaskFactors, VanillaPrompt, chain_gradients, compose, identity_factors,
)
from prompt_transfer.tests.finite_difference import assert_gradient_close, central_difference

BATCH = [((5, 9, 7), (5, 7, 9)), ((4, 4, 12, 6), (4, 4, 6, 12))]
BOTH = DistillConfig(lambda_=0.9, temperature=2.0)
LOGITS = DistillConfig(use_hidden_mse=False)
HIDDEN = DistillConfig(use_logits_kl=False)
PLAIN = DistillConfig.disabled()


def _setup(l=4, d=16, seed=0):
    rng = Rng(seed)
    shared = SharedPrompt(rng.normal(0.3, (l, d)))
    factors = TaskFactors("t", 1.0 + rng.normal(0.2, l), 1.0 + rng.normal(0.2, d))
    teacher = VanillaPrompt(rng.normal(0.3, (l, d)))
    return shared, factors, teacher


def test_kl_examples():
    z = Rng(1).normal(1.0, (3, 20))
    assert kl_logits_loss(z, z, 2.0) == pytest.approx(0.0, abs=1e-12)
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert kl_logits_loss([[math.log(3), 0.0]], [[0.0, 0.0]], 1.0) == pytest.approx(expected, abs=1e-12)
    assert abs(expected - 0.1308) < 1e-4
    with pytest.raises(ShapeMismatchError):
        kl_logits_loss(np.zeros((2, 3)), np.zeros((3, 3)), 1.0)
    with pytest.raises(ValueError):
        kl_logits_loss(z, z, 0.0)


def test_kl_with_extreme_logits():
    assert kl_logits_loss([[1000.0, 0.0]], [[0.0, 1000.0]], 1.0) == pytest.approx(1000.0)
    assert kl_logits_loss([[-800.0, 800.0]], [[-800.0, 800.0]], 2.0) == pytest.approx(0.0, abs=1e-12)


def test_kl_is_nonnegative():
    rng = Rng(2)
    for i in range(10_000):
        t, s = rng.normal(2.0, (1, 6)), rng.normal(2.0, (1, 6))
        assert kl_logits_loss(t, s, 1.0) >= 0.0
    for i in range(20):
        z = rng.normal(3.0, (4, 20))
        assert kl_logits_loss(z, z.copy(), 1.5) < 1e-10


def test_kl_temperature_smoothing():
    t, s = np.array([[5.0, 1.0, -2.0]]), np.array([[0.0, 2.0, 1.0]])
    values = [kl_logits_loss(t, s, temp) for temp in (1.0, 2.0, 10.0, 100.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-2


def test_kl_gradient_matches_finite_differences():
    rng = Rng(3)
    t, s = rng.normal(1.0, (3, 7)), rng.normal(1.0, (3, 7))
    numeric = central_difference(lambda ss: kl_logits_loss(t, ss, 2.0), s)
    assert_gradient_close(kl_logits_grad(t, s, 2.0), numeric, rtol=1e-6, atol=1e-9)


def test_hidden_mse():
    rng = Rng(4)
    enc, dec = rng.normal(1.0, (5, 4)), rng.normal(1.0, (3, 4))
    assert hidden_mse_loss(enc, dec, enc, dec) == 0.0
    assert hidden_mse_loss(enc, dec, enc + 0.5, dec + 0.5) == pytest.approx(2 * 0.25, abs=1e-12)
    assert hidden_mse_loss(enc, dec, rng.normal(1.0, (5, 4)), rng.normal(1.0, (3, 4))) >= 0.0
    with pytest.raises(ShapeMismatchError):
        hidden_mse_loss(enc, dec, enc[:4], dec)
    s_enc, s_dec = rng.normal(1.0, (5, 4)), rng.normal(1.0, (3, 4))
    denc, ddec = hidden_mse_grads(enc, dec, s_enc, s_dec)
    assert_gradient_close(denc, central_difference(lambda x: hidden_mse_loss(enc, dec, x, s_dec), s_enc), rtol=1e-6)
    assert_gradient_close(ddec, central_difference(lambda x: hidden_mse_loss(enc, dec, s_enc, x), s_dec), rtol=1e-6)


def test_total_loss():
    assert total_loss(1.0, 0.5, 0.5, 0.9) == pytest.approx(1.9, abs=1e-15)
    assert total_loss(1.3, 0.5, 0.7, 0.0) == 1.3
    assert DistillConfig().lambda_ == 0.9
    d1 = total_loss(1.0, 0.3, 0.2, 0.4) - 1.0
    d2 = total_loss(1.0, 0.3, 0.2, 0.8) - 1.0
    assert d2 == pytest.approx(2 * d1, abs=1e-10)


def test_prompt_distance():
    m = Rng(5).normal(1.0, (3, 4))
    assert prompt_distance_loss(VanillaPrompt(m), m) == 0.0
    assert prompt_distance_loss(VanillaPrompt(m), m + 2.0) == pytest.approx(4.0, abs=1e-12)
    with pytest.raises(ShapeMismatchError):
        prompt_distance_loss(VanillaPrompt(m), m[:2])


def test_prompt_distance_gradient_through_factors():
    shared, factors, _ = _setup(l=3, d=5, seed=6)
    teacher = VanillaPrompt(Rng(7).normal(1.0, (3, 5)))
    dp, du, dv = chain_gradients(prompt_distance_grad(teacher, compose(shared, factors)), shared, factors)

    def f_p(p):
        return prompt_distance_loss(teacher, compose(SharedPrompt(p), factors))

    def f_u(u):
        return prompt_distance_loss(teacher, compose(shared, TaskFactors("t", u, factors.v)))

    assert_gradient_close(dp, central_difference(f_p, shared.matrix), rtol=1e-6)
    assert_gradient_close(du, central_difference(f_u, factors.u), rtol=1e-6)


def test_distill_config_exclusivity():
    with pytest.raises(ValueError):
        DistillConfig(use_prompt_distance=True).validate()
    DistillConfig(use_logits_kl=False, use_hidden_mse=False, use_prompt_distance=True).validate()
    with pytest.raises(ValueError):
        DistillConfig(lambda_=-1.0).validate()
    with pytest.raises(ValueError):
        DistillConfig(temperature=0.0).validate()


def test_disabled_distillation_reduces_to_task_loss(tiny_model):
    shared, factors, teacher = _setup()
    res = batch_objective(tiny_model, shared, factors, teacher, BATCH, PLAIN)
    plain = prompt_objective(tiny_model, compose(shared, factors), None, BATCH, PLAIN)
    assert res.l_logits == 0.0 and res.l_hidden == 0.0
    assert res.l_total == res.l_plm == plain.l_plm
    assert np.array_equal(res.grad_composed, plain.grad_composed)


def test_identical_teacher_gives_zero_distillation(tiny_model):
    shared, _, _ = _setup()
    res = batch_objective(tiny_model, shared, identity_factors("t", 4, 16), VanillaPrompt(shared.matrix.copy()), BATCH, BOTH)
    assert res.l_logits == pytest.approx(0.0, abs=1e-12)
    assert res.l_hidden == 0.0
    assert res.l_total == pytest.approx(res.l_plm, abs=1e-12)


def test_missing_teacher_is_an_error(tiny_model):
    shared, factors, _ = _setup()
    with pytest.raises(ValueError):
        batch_objective(tiny_model, shared, factors, None, BATCH, BOTH)


@pytest.mark.parametrize("cfg,key", [
    (PLAIN, "l_plm"),
    (LOGITS, "l_logits"),
    (HIDDEN, "l_hidden"),
    (BOTH, "l_total"),
])
def test_objective_gradients_match_finite_differences(tiny_model, cfg, key):
    shared, factors, teacher = _setup()
    res = batch_objective(tiny_model, shared, factors, teacher, BATCH, cfg)

    def loss(p, u, v):
        r = batch_objective(tiny_model, SharedPrompt(p), TaskFactors("t", u, v), teacher, BATCH, cfg)
        return r.l_total

    du, dv = res.grad_factors["t"]
    assert_gradient_close(res.grad_shared, central_difference(lambda p: loss(p, factors.u, factors.v), shared.matrix))
    assert_gradient_close(du, central_difference(lambda u: loss(shared.matrix, u, factors.v), factors.u))
    assert_gradient_close(dv, central_difference(lambda v: loss(shared.matrix, factors.u, v), factors.v))
    assert getattr(res, key) > 0.0


def test_gradient_sum_rule(tiny_model):
    shared, factors, teacher = _setup()
    lam = 0.9
    g = {
        name: batch_objective(tiny_model, shared, factors, teacher, BATCH, cfg)
        for name, cfg in (("plain", PLAIN), ("logits", LOGITS), ("hidden", HIDDEN), ("both", BOTH))
    }
    expected = g["logits"].grad_shared + g["hidden"].grad_shared - g["plain"].grad_shared
    np.testing.assert_allclose(g["both"].grad_shared, expected, rtol=0, atol=1e-10)
    assert g["both"].l_total == pytest.approx(
        g["plain"].l_plm + lam * (g["logits"].l_logits + g["hidden"].l_hidden), abs=1e-12)


def test_objective_leaves_teacher_and_model_untouched(tiny_model):
    shared, factors, teacher = _setup()
    t_before, m_before, p_before = teacher.matrix.tobytes(), tiny_model.checksum(), shared.matrix.tobytes()
    batch_objective(tiny_model, shared, factors, teacher, BATCH, BOTH)
    assert teacher.matrix.tobytes() == t_before
    assert shared.matrix.tobytes() == p_before
    assert tiny_model.checksum() == m_before


def test_prompt_distance_objective(tiny_model):
    shared, factors, teacher = _setup()
    cfg = DistillConfig(use_logits_kl=False, use_hidden_mse=False, use_prompt_distance=True)
    res = batch_objective(tiny_model, shared, factors, teacher, BATCH, cfg)
    assert res.l_prompt == pytest.approx(prompt_distance_loss(teacher, compose(shared, factors)), abs=1e-15)
    assert res.l_total == pytest.approx(res.l_plm + 0.9 * res.l_prompt, abs=1e-12)
    numeric = central_difference(
        lambda p: batch_objective(tiny_model, SharedPrompt(p), factors, teacher, BATCH, cfg).l_total, shared.matrix)
    assert_gradient_close(res.grad_shared, numeric)
