import struct

import numpy as np
import pytest

from adlight.neuralnet import (
    NetworkError,
    NetworkParams,
    OptimizerState,
    adam_step,
    backward,
    clip_by_global_norm,
    forward,
    global_norm,
    init_params,
    layer_shapes,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from gradcheck import gradient_check


def rand_state(rng, batch=None):
    shape = (8, 8) if batch is None else (batch, 8, 8)
    return rng.random(shape)


def test_intermediate_shapes():
    rng = np.random.default_rng(0)
    p = init_params(rng)
    logits, value, cache = forward(p, rand_state(rng))
    assert cache.h_enc.shape == (1, 8, 128)
    assert cache.h_mix.shape == (1, 256)
    assert cache.h1.shape == (1, 128)
    assert cache.h2.shape == (1, 64)
    assert logits.shape == (12,)
    assert np.ndim(value) == 0
    logits, value, _ = forward(p, rand_state(rng, 5))
    assert logits.shape == (5, 12) and value.shape == (5,)


def test_layer_table():
    shapes = {name: (o, i) for name, o, i in layer_shapes()}
    assert shapes["enc"] == (128, 8)
    assert shapes["mix"] == (256, 1024)
    assert shapes["pi2"] == (12, 32) and shapes["v2"] == (1, 32)


def test_zero_params_give_uniform_policy():
    p = init_params(np.random.default_rng(0)).zeros_like()
    logits, value, _ = forward(p, rand_state(np.random.default_rng(1)))
    assert not logits.any() and value == 0
    assert np.allclose(softmax(logits), 1 / 12)


def test_row_permutation_changes_logits():
    rng = np.random.default_rng(2)
    p = init_params(rng, dtype=np.float64)
    s = rand_state(rng)
    a, _, _ = forward(p, s)
    b, _, _ = forward(p, s[[1, 0, 2, 3, 4, 5, 6, 7]])
    assert not np.allclose(a, b)


def test_softmax_sums_to_one_and_forward_is_deterministic():
    rng = np.random.default_rng(3)
    p = init_params(rng)
    s = rand_state(rng, 16) * 5
    a, va, _ = forward(p, s)
    b, vb, _ = forward(p, s)
    assert np.array_equal(a, b) and np.array_equal(va, vb)
    assert np.allclose(softmax(a).sum(axis=1), 1.0, atol=1e-6)


def test_non_finite_state_rejected():
    p = init_params(np.random.default_rng(0))
    s = np.zeros((8, 8))
    s[2, 3] = np.nan
    with pytest.raises(NetworkError):
        forward(p, s)
    with pytest.raises(NetworkError):
        forward(p, np.zeros((7, 8)))


def test_backward_zero_upstream():
    rng = np.random.default_rng(4)
    p = init_params(rng)
    _, _, cache = forward(p, rand_state(rng))
    g = backward(p, cache, np.zeros(12), 0.0)
    assert all(not t.any() for t in g.tensors.values())


def test_backward_shape_mismatch():
    rng = np.random.default_rng(4)
    p = init_params(rng)
    _, _, cache = forward(p, rand_state(rng))
    with pytest.raises(NetworkError):
        backward(p, cache, np.zeros(5), 0.0)


def test_shared_encoder_gradient_sums_over_rows():
    rng = np.random.default_rng(5)
    p = init_params(rng, dtype=np.float64)
    s = rand_state(rng)
    dl = rng.standard_normal(12)
    _, _, cache = forward(p, s)
    g = backward(p, cache, dl, 0.7)
    # recompute by hand: per-row upstream gradient times the row input
    dz = None
    h = cache
    d_h2 = (dl @ p["pi2_w"] * (h.hp[0] > 0)) @ p["pi1_w"] + (0.7 * p["v2_w"][0] * (h.hv[0] > 0)) @ p["v1_w"]
    d_h1 = (d_h2 * (h.h2[0] > 0)) @ p["fc2_w"]
    d_mix = (d_h1 * (h.h1[0] > 0)) @ p["fc1_w"]
    dz = ((d_mix * (h.h_mix[0] > 0)) @ p["mix_w"]).reshape(128, 8)
    expected = sum(np.outer(dz[:, i] * (h.h_enc[0, i] > 0), s[i]) for i in range(8))
    assert np.allclose(g["enc_w"], expected)
    # the encoder has a single (128, 8) kernel, not one per movement
    assert p["enc_w"].shape == (128, 8)


def test_gradient_check_float64():
    result = gradient_check(seeds=range(2), full_limit=256, sample=24)
    assert result.max_rel_error < 1e-4, result


def test_adam_zero_gradient_keeps_params():
    p = init_params(np.random.default_rng(0))
    keep = p.copy()
    opt = OptimizerState.for_params(p)
    adam_step(p, p.zeros_like(), opt)
    assert all(np.array_equal(p[k], keep[k]) for k in p.names())
    assert opt.step == 1


def test_adam_hand_evaluated_steps():
    # g = 1 every step: m_hat = v_hat = 1 so each step moves by lr / (1 + eps)
    p = NetworkParams({"x": np.array([0.0])})
    g = NetworkParams({"x": np.array([1.0])})
    opt = OptimizerState.for_params(p, lr=0.01)
    expected = 0.0
    for k in range(1, 4):
        m = 1 - 0.9 ** k
        v = 1 - 0.999 ** k
        expected -= 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
        adam_step(p, g, opt)
        assert p["x"][0] == pytest.approx(expected, rel=1e-12)
    assert p["x"][0] == pytest.approx(-0.03, rel=1e-6)
    assert opt.step == 3


def test_adam_is_deterministic():
    rng = np.random.default_rng(1)
    p = init_params(rng)
    g = init_params(rng)
    a, b = p.copy(), p.copy()
    oa, ob = OptimizerState.for_params(a), OptimizerState.for_params(b)
    adam_step(a, g, oa)
    adam_step(b, g, ob)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())


def test_adam_rejects_non_finite():
    p = NetworkParams({"x": np.array([0.0])})
    with pytest.raises(FloatingPointError):
        adam_step(p, NetworkParams({"x": np.array([np.inf])}), OptimizerState.for_params(p))


def test_global_norm_clipping():
    g = NetworkParams({"a": np.array([3.0]), "b": np.array([4.0])})
    assert global_norm(g) == 5.0
    clip_by_global_norm(g, 0.5)
    assert global_norm(g) == pytest.approx(0.5, rel=1e-5)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    p = init_params(rng)
    opt = OptimizerState.for_params(p, lr=1e-3)
    adam_step(p, init_params(rng), opt)
    path = tmp_path / "m.adl"
    save_checkpoint(p, opt, path)
    q, qopt = load_checkpoint(path)
    assert q.names() == p.names()
    for k in p.names():
        assert q[k].tobytes() == p[k].tobytes()
        assert qopt.m[k].tobytes() == opt.m[k].tobytes()
    assert (qopt.step, qopt.lr) == (1, pytest.approx(1e-3))
    data = path.read_bytes()
    assert data[:4] == b"ADL1" and data[4] == 1
    assert struct.unpack("<I", data[5:9])[0] == len(p.names())


def test_checkpoint_without_optimizer(tmp_path):
    p = init_params(np.random.default_rng(0), n_actions=3)
    save_checkpoint(p, None, tmp_path / "m.adl")
    q, opt = load_checkpoint(tmp_path / "m.adl")
    assert opt is None and q.n_actions == 3


@pytest.mark.parametrize("cut", [3, 9, 100, -1])
def test_truncated_checkpoint(tmp_path, cut):
    p = init_params(np.random.default_rng(0))
    path = tmp_path / "m.adl"
    save_checkpoint(p, OptimizerState.for_params(p), path)
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(NetworkError):
        load_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    p = init_params(np.random.default_rng(0))
    path = tmp_path / "m.adl"
    save_checkpoint(p, None, path)
    data = bytearray(path.read_bytes())
    path.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(NetworkError, match="magic"):
        load_checkpoint(path)
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(NetworkError, match="version"):
        load_checkpoint(path)
