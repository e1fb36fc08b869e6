import math
from types import SimpleNamespace

import numpy as np
import pytest

from advkws.datagen import Batch, CorpusSpec, collate, generate_corpus
from advkws.errors import NumericalError
from advkws.model import ModelConfig, forward, init_params, toy_config
from advkws.training import (AdamConfig, LossConfig, TrainConfig, adam_init, adam_update,
                             adv_forward, adversarial_backward,
                             compute_gradients, finite_difference_check, frame_ce_loss,
                             gradient_check, head_loss, init_head, maxpool_loss, objective,
                             supervised_loss, total_loss_step, train)


def _fake_trace(enc, dec):
    return SimpleNamespace(encoder_logits=enc, decoder_logits=dec)


def _fd_logits(loss_fn, trace, which, h=1e-6):
    arr = getattr(trace, which)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = loss_fn(trace)
        arr[i] = orig - h
        fm = loss_fn(trace)
        arr[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def _random_trace(batch, seed):
    rng = np.random.default_rng(seed)
    B, L = batch.classes.shape
    return _fake_trace(rng.normal(size=(B, L, 5)), rng.normal(size=(B, L, 2)))


def test_frame_ce_uniform_decoder_is_ln2(small_batch):
    B, L = small_batch.classes.shape
    tr = _fake_trace(np.zeros((B, L, 5)), np.zeros((B, L, 2)))
    out = frame_ce_loss(tr, small_batch)
    assert math.isclose(out.parts["decoder"], math.log(2), rel_tol=1e-12)
    assert math.isclose(out.parts["encoder"], math.log(5), rel_tol=1e-12)


def test_frame_ce_saturates(small_batch):
    B, L = small_batch.classes.shape
    enc = np.zeros((B, L, 5))
    dec = np.zeros((B, L, 2))
    for i in range(B):
        n = small_batch.lengths[i]
        enc[i, np.arange(n), small_batch.classes[i, :n]] = 60.0
        dec[i, np.arange(n), small_batch.keyword[i, :n]] = 60.0
    assert frame_ce_loss(_fake_trace(enc, dec), small_batch).value < 1e-20


def test_frame_ce_gradient_fd(small_batch):
    tr = _random_trace(small_batch, 0)
    out = frame_ce_loss(tr, small_batch)
    for which, g in (("encoder_logits", out.d_encoder), ("decoder_logits", out.d_decoder)):
        fd = _fd_logits(lambda t: frame_ce_loss(t, small_batch).value, tr, which)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-9)


def test_frame_ce_ignores_padding(small_batch):
    tr = _random_trace(small_batch, 1)
    out = frame_ce_loss(tr, small_batch)
    pad = small_batch.classes < 0
    assert not out.d_encoder[pad].any() and not out.d_decoder[pad].any()


def _single(positive, L, omega=None, start=None):
    kw = np.zeros((1, L), dtype=np.int64)
    if positive:
        kw[0, start:omega + 1] = 1
    return Batch(np.zeros((1, L, 120)), np.array([L]), np.zeros((1, L), dtype=np.int64), kw,
                 np.array([positive]), np.array([omega if positive else -1]), np.array([0]))


@pytest.mark.parametrize("positive", [True, False])
def test_maxpool_length_one_equals_frame_ce(positive):
    b = _single(positive, 1, 0, 0)
    tr = _fake_trace(np.zeros((1, 1, 5)), np.array([[[0.3, -0.4]]]))
    assert math.isclose(maxpool_loss(tr, b, 4).value, frame_ce_loss(tr, b).parts["decoder"],
                        rel_tol=1e-12)


def test_maxpool_negative_picks_spike():
    b = _single(False, 6)
    dec = np.zeros((1, 6, 2))
    dec[0, 3, 1] = 9.0
    out = maxpool_loss(_fake_trace(np.zeros((1, 6, 5)), dec), b, 4)
    assert out.parts["frames"][0] == 3
    assert out.value > 8.0
    assert np.flatnonzero(np.abs(out.d_decoder[0]).sum(-1)).tolist() == [3]


def test_maxpool_window_clamps_and_ties_earliest():
    b = _single(True, 5, omega=2, start=1)
    dec = np.zeros((1, 5, 2))  # all tied
    out = maxpool_loss(_fake_trace(np.zeros((1, 5, 5)), dec), b, 10)
    assert out.parts["frames"][0] == 0


def test_maxpool_gradient_fd_and_routing(small_batch):
    tr = _random_trace(small_batch, 2)
    out = maxpool_loss(tr, small_batch, 4)
    fd = _fd_logits(lambda t: maxpool_loss(t, small_batch, 4).value, tr, "decoder_logits")
    np.testing.assert_allclose(out.d_decoder, fd, rtol=1e-4, atol=1e-9)
    nonzero = (np.abs(out.d_decoder).sum(-1) > 0).sum(axis=1)
    assert np.all(nonzero == 1)


def test_supervised_mix_endpoints(small_batch):
    tr = _random_trace(small_batch, 3)
    ce = frame_ce_loss(tr, small_batch).value
    mp = maxpool_loss(tr, small_batch, 8).value
    assert supervised_loss(tr, small_batch, LossConfig(alpha=0.0)).value == ce
    assert supervised_loss(tr, small_batch, LossConfig(alpha=1.0)).value == mp
    half = supervised_loss(tr, small_batch, LossConfig(alpha=0.5)).value
    assert math.isclose(half, 0.5 * ce + 0.5 * mp, rel_tol=1e-14)


def test_adv_forward_identical_frames():
    rng = np.random.default_rng(0)
    head = init_head(6, rng, np.float64)
    h = rng.normal(size=6)
    logit, _ = adv_forward(np.tile(h, (5, 1)), head)
    assert math.isclose(logit[0], h @ head["adv.weight"] + head["adv.bias"][0], rel_tol=1e-12)


def test_adv_forward_zero_head():
    head = {"adv.weight": np.zeros(4), "adv.bias": np.zeros(1)}
    logit, _ = adv_forward(np.random.default_rng(1).normal(size=(7, 4)), head)
    assert logit[0] == 0.0
    assert math.isclose(head_loss(logit, [1]), math.log(2))
    assert math.isclose(head_loss(logit, [0]), math.log(2))


def test_adv_forward_bruteforce_max():
    rng = np.random.default_rng(2)
    head = init_head(5, rng, np.float64)
    H = rng.normal(size=(3, 9, 5))
    lengths = np.array([9, 4, 1])
    logits, _ = adv_forward(H, head, lengths)
    for i in range(3):
        best = max(float(H[i, t] @ head["adv.weight"] + head["adv.bias"][0])
                   for t in range(lengths[i]))
        assert math.isclose(logits[i], best, rel_tol=1e-12)


def _adv_setup(seed=3):
    rng = np.random.default_rng(seed)
    head = init_head(5, rng, np.float64)
    H = rng.normal(size=(4, 6, 5))
    return H, head, np.array([1, 0, 1, 0])


def test_reversal_lambda_zero_is_exactly_zero():
    H, head, y = _adv_setup()
    out = adversarial_backward(H, head, y, 0.0)
    assert np.all(out.d_H == 0)
    ref = adversarial_backward(H, head, y, 1.0)
    for k in out.head_grads:
        np.testing.assert_array_equal(out.head_grads[k], ref.head_grads[k])


def test_reversal_lambda_one_is_negated_true_gradient():
    H, head, y = _adv_setup()
    out = adversarial_backward(H, head, y, 1.0)
    fd = np.zeros_like(H)
    h = 1e-6
    for i in np.ndindex(H.shape):
        orig = H[i]
        H[i] = orig + h
        fp = head_loss(adv_forward(H, head)[0], y)
        H[i] = orig - h
        fm = head_loss(adv_forward(H, head)[0], y)
        H[i] = orig
        fd[i] = (fp - fm) / (2 * h)
    np.testing.assert_allclose(out.d_H, -fd, rtol=1e-5, atol=1e-10)


def test_reversal_is_linear_in_lambda():
    H, head, y = _adv_setup()
    one = adversarial_backward(H, head, y, 1.0).d_H
    np.testing.assert_array_equal(adversarial_backward(H, head, y, 0.4).d_H, 0.4 * one)


def _toy_batch(seed=0, dtype=np.float64):
    spec = CorpusSpec(seed=seed, counts=(3, 3, 3, 3), background_frames=(5, 8),
                      distractor_words=(1, 1), artifact_amplitude=2.0)
    return collate(generate_corpus(spec).examples(), dtype)


def _state(params, head):
    return (adam_init(params), adam_init(head) if head is not None else None)


def test_beta_zero_step_matches_baseline_bitwise(toy):
    batch = _toy_batch(dtype=np.float32)
    params = init_params(toy, 0)
    head = init_head(sum(toy.tap_dims().values()), np.random.default_rng(1))
    cfg = LossConfig(beta=0.0, lam=0.4)
    _, p_base, _, _ = total_loss_step(batch, params, None, cfg, _state(params, None),
                                      adversarial=False)
    _, p_adv, h_adv, _ = total_loss_step(batch, params, head, cfg, _state(params, head),
                                         adversarial=True)
    for k in params:
        assert p_base[k].tobytes() == p_adv[k].tobytes()
    for k in head:
        assert h_adv[k].tobytes() == head[k].tobytes()


def test_beta_one_lambda_zero_freezes_kws(toy):
    batch = _toy_batch(dtype=np.float32)
    params = init_params(toy, 0)
    head = init_head(sum(toy.tap_dims().values()), np.random.default_rng(1))
    g = compute_gradients(params, head, batch, LossConfig(beta=1.0, lam=0.0))
    assert all(not v.any() for v in g.grads.values())
    _, p2, h2, _ = total_loss_step(batch, params, head, LossConfig(beta=1.0, lam=0.0),
                                   _state(params, head))
    assert all(np.array_equal(p2[k], params[k]) for k in params)
    assert any(not np.array_equal(h2[k], head[k]) for k in head)


def test_full_objective_fd_subsample(toy):
    batch = _toy_batch(seed=1)
    rng = np.random.default_rng(4)
    params = init_params(toy, 1, np.float64)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
    head = init_head(sum(toy.tap_dims().values()), rng, np.float64)
    cfg = LossConfig(alpha=0.3, beta=0.4, lam=0.5)
    rep = finite_difference_check(params, head, batch, cfg, "total_kws", max_per_tensor=10, rng=rng)
    rep_h = finite_difference_check(params, head, batch, cfg, "total_head", rng=rng)
    assert rep.checked + rep_h.checked >= 200
    assert rep.worst < 1e-4 and rep_h.worst < 1e-4


def test_gradient_check_zero_params():
    rep = gradient_check(zero_params=True, mode="supervised")
    assert rep.passed


def test_gradient_check_supervised():
    rep = gradient_check(seed=1, mode="supervised", max_per_tensor=30)
    assert rep.passed, rep.format()


def test_gradient_check_full_objective():
    rep = gradient_check(seed=2, loss_cfg=LossConfig(beta=0.3, lam=0.35), mode="all",
                         max_per_tensor=30)
    assert rep.passed, rep.format()


def test_objective_pattern_detects_kink(toy):
    batch = _toy_batch()
    params = init_params(toy, 0, np.float64)
    head = init_head(sum(toy.tap_dims().values()), np.random.default_rng(0), np.float64)
    _, base = objective(params, head, batch, LossConfig(), "supervised")
    p2 = dict(params)
    p2["en_0.bias"] = params["en_0.bias"] + 100.0
    _, moved = objective(p2, head, batch, LossConfig(), "supervised")
    assert base != moved


def test_adam_matches_hand_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    cfg = AdamConfig(lr=0.1)
    new, st = adam_update(p, g, adam_init(p), cfg)
    # first step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    np.testing.assert_allclose(new["w"], p["w"] - 0.1 * g["w"] / (np.abs(g["w"]) + 1e-8))
    assert st.step == 1


def test_non_finite_aborts(toy):
    batch = _toy_batch(dtype=np.float32)
    params = init_params(toy, 0)
    params["de_0.bias"] = params["de_0.bias"] + np.nan
    with pytest.raises(NumericalError, match="step 0"):
        total_loss_step(batch, params, None, LossConfig(), _state(params, None),
                        adversarial=False)


def test_l_sup_halves_in_200_steps_on_fixed_batch():
    spec = CorpusSpec(seed=0, counts=(8, 8, 8, 8), artifact_amplitude=2.0)
    batch = collate(generate_corpus(spec).examples(), np.float32)
    cfg = LossConfig()
    params = init_params(ModelConfig(), 0)
    state = _state(params, None)
    first = None
    for _ in range(200):
        losses, params, _, state = total_loss_step(batch, params, None, cfg, state,
                                                   adversarial=False)
        first = losses["L_sup"] if first is None else first
    after = supervised_loss(forward(params, batch.features, batch.lengths), batch, cfg).value
    assert after <= 0.5 * first


def test_training_is_deterministic():
    spec = CorpusSpec(seed=0, counts=(20, 20, 20, 20))
    corpus = generate_corpus(spec)
    cfg = TrainConfig(steps=15, seed=3, adversarial=True)
    a = train(corpus, toy_config(), LossConfig(), cfg)
    b = train(corpus, toy_config(), LossConfig(), cfg)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert a.log_csv() == b.log_csv()


def test_all_gradients_finite_during_training():
    spec = CorpusSpec(seed=1, counts=(20, 20, 20, 20), artifact_amplitude=3.0)
    seen = []
    train(generate_corpus(spec), toy_config(), LossConfig(beta=0.5, lam=1.0),
          TrainConfig(steps=30, seed=0, log_every=1), callback=seen.append)
    assert len(seen) == 30
    assert all(math.isfinite(r["L_total"]) for r in seen)
