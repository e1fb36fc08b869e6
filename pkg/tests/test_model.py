import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advkws.errors import ConfigError, DataError
from advkws.model import (TAP_ORDER, ModelConfig, SvdfLayerSpec, check_params, collect_adv_features,
                          config_from_params, forward, forward_sequence, init_params,
                          init_stream_state, param_count, full_scale_config, reset_stream,
                          stream_step, toy_config)

from oracles import network_bruteforce, svdf_layer_bruteforce


def _stream(params, x):
    state = init_stream_state(params)
    enc, dec = [], []
    for v in x:
        e, d, state = stream_step(params, state, v)
        enc.append(e)
        dec.append(d)
    return np.stack(enc), np.stack(dec), state


def test_init_deterministic(toy):
    a, b = init_params(toy, 5), init_params(toy, 5)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = init_params(toy, 6)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_limits(toy):
    p = init_params(toy, 0)
    for name, t in p.items():
        if t.ndim == 2:
            assert np.abs(t).max() <= np.sqrt(6.0 / (t.shape[0] + t.shape[1]))
        else:
            assert np.all(t == 0)


def test_param_count_single_layer():
    cfg = ModelConfig(encoder_layers=(SvdfLayerSpec(1, 4),), decoder_layers=(), bottlenecks=(),
                      encoder_classes=0, decoder_classes=0)
    assert param_count(cfg) == 125


def test_param_count_toy_closed_form(toy):
    # hand formula: SVDF N(D+T+1), projections out*in, heads C(in+1)
    n, t, b, k = 8, 4, 4, 5
    svdf = n * (120 + t + 1) + n * (n + t + 1) + n * (b + t + 1) + n * (n + t + 1)
    svdf += n * (k + t + 1) + n * (b + t + 1) + n * (n + t + 1)
    proj = 3 * b * n
    heads = k * (b + 1) + 2 * (n + 1)
    assert param_count(toy) == svdf + proj + heads
    assert param_count(toy) == sum(v.size for v in init_params(toy, 0).values())


def test_full_scale_near_320k():
    cfg = full_scale_config()
    assert len(cfg.encoder_layers) + len(cfg.decoder_layers) == 7
    assert len(cfg.bottlenecks) == 3
    assert abs(param_count(cfg) - 320_000) <= 32_000


def test_zero_params_give_zero_outputs(toy):
    p = {k: np.zeros_like(v) for k, v in init_params(toy, 0).items()}
    tr = forward_sequence(p, np.random.default_rng(0).normal(size=(9, 120)))
    assert not tr.encoder_logits.any() and not tr.decoder_logits.any()
    assert all(not v.any() for v in tr.taps.values())
    enc, dec, _ = _stream(p, np.zeros((3, 120)))
    assert not enc.any() and not dec.any()


def test_length_one_matches_single_step(toy_params):
    x = np.random.default_rng(1).normal(size=(1, 120))
    tr = forward_sequence(toy_params, x)
    enc, dec, _ = _stream(toy_params, x)
    np.testing.assert_allclose(tr.encoder_logits[0], enc, atol=1e-12)
    np.testing.assert_allclose(tr.decoder_logits[0], dec, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_bruteforce_network(toy, seed):
    rng = np.random.default_rng(seed)
    p = init_params(toy, seed, np.float64)
    for k in p:
        if k.endswith(".bias"):
            p[k] = rng.normal(scale=0.1, size=p[k].shape)
    x = rng.normal(size=(12, 120))
    tr = forward_sequence(p, x)
    enc, dec, taps = network_bruteforce(p, toy, x)
    np.testing.assert_allclose(tr.encoder_logits[0], enc, atol=1e-10)
    np.testing.assert_allclose(tr.decoder_logits[0], dec, atol=1e-10)
    for name in TAP_ORDER:
        np.testing.assert_allclose(tr.taps[name][0], taps[name], atol=1e-10)


@pytest.mark.parametrize("L", [1, 7, 50])
def test_streaming_equivalence(toy, L):
    p = init_params(toy, L, np.float32)
    x = np.random.default_rng(L).normal(size=(L, 120)).astype(np.float32)
    tr = forward_sequence(p, x)
    enc, dec, _ = _stream(p, x)
    np.testing.assert_allclose(enc, tr.encoder_logits[0], atol=1e-5)
    np.testing.assert_allclose(dec, tr.decoder_logits[0], atol=1e-5)


def test_batched_streams_match(toy_params):
    x = np.random.default_rng(2).normal(size=(3, 6, 120))
    tr = forward(toy_params, x)
    state = init_stream_state(toy_params, 3)
    for t in range(6):
        _, dec, state = stream_step(toy_params, state, x[:, t])
        np.testing.assert_allclose(dec, tr.decoder_logits[:, t], atol=1e-10)
    assert list(state.frames) == [6, 6, 6]


def test_state_reuse_differs_from_reset(toy_params):
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 120)), rng.normal(size=(5, 120))
    _, _, state = _stream(toy_params, a)
    carried = [stream_step(toy_params, state, v)[1] for v in b]
    fresh = _stream(toy_params, b)[1]
    assert not np.allclose(np.stack(carried), fresh)
    reset_stream(state)
    again = [stream_step(toy_params, state, v)[1] for v in b]
    np.testing.assert_allclose(np.stack(again), fresh, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 30), st.data())
def test_causality(L, data):
    t = data.draw(st.integers(0, L - 1))
    p = init_params(toy_config(), 0, np.float64)
    x = np.random.default_rng(L).normal(size=(L, 120))
    y = x.copy()
    y[t] += 5.0
    a, b = forward_sequence(p, x), forward_sequence(p, y)
    np.testing.assert_array_equal(a.decoder_logits[0, :t], b.decoder_logits[0, :t])
    np.testing.assert_array_equal(a.encoder_logits[0, :t], b.encoder_logits[0, :t])


def test_padding_does_not_touch_valid_frames(toy_params):
    x = np.random.default_rng(4).normal(size=(8, 120))
    padded = np.concatenate([x, np.full((5, 120), 9.0)])
    a = forward_sequence(toy_params, x).decoder_logits[0]
    b = forward(toy_params, padded[None], [8]).decoder_logits[0, :8]
    np.testing.assert_array_equal(a, b)


def test_dimension_mismatch(toy_params):
    with pytest.raises(DataError):
        forward_sequence(toy_params, np.zeros((4, 100)))
    state = init_stream_state(toy_params)
    with pytest.raises(DataError):
        stream_step(toy_params, state, np.zeros(100))


def test_collect_single_tap(toy_params):
    tr = forward_sequence(toy_params, np.random.default_rng(5).normal(size=(6, 120)))
    np.testing.assert_array_equal(collect_adv_features(tr, {"en_1"}), tr.taps["en_1"])


def test_collect_all_taps_dims(toy, toy_params):
    tr = forward_sequence(toy_params, np.random.default_rng(5).normal(size=(6, 120)))
    H = collect_adv_features(tr, TAP_ORDER)
    assert H.shape[-1] == sum(toy.tap_dims().values())


def test_collect_order_is_canonical(toy_params):
    tr = forward_sequence(toy_params, np.random.default_rng(5).normal(size=(6, 120)))
    a = collect_adv_features(tr, ["de_2", "en_0", "en_3"])
    b = collect_adv_features(tr, ("en_0", "en_3", "de_2"))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[..., :8], tr.taps["en_0"])


def test_collect_empty_rejected(toy_params):
    tr = forward_sequence(toy_params, np.zeros((2, 120)))
    with pytest.raises(ConfigError):
        collect_adv_features(tr, [])


def test_config_roundtrip_and_mismatch(toy):
    p = init_params(toy, 0)
    assert config_from_params(p) == toy
    q = dict(p)
    q["de_1.time"] = np.zeros((8, 5), np.float32)
    with pytest.raises(DataError, match="de_1.time"):
        check_params(toy, q)


def test_invalid_layer_spec():
    with pytest.raises(ConfigError):
        SvdfLayerSpec(0, 4)
    with pytest.raises(ConfigError):
        ModelConfig(bottlenecks=(("en_9", 4),))


def test_single_layer_bruteforce_small():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 3))
    a, b, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=2)
    out = svdf_layer_bruteforce(x, a, b, c)
    # hand expansion for t = 1, node 0
    pre = b[0, 0] * a[0] @ x[1] + b[0, 1] * a[0] @ x[0] + c[0]
    assert np.isclose(out[1, 0], max(pre, 0.0))
