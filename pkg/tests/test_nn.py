import math

import numpy as np
import pytest

from shuffledp.model import (
    build_model,
    forward_sample,
    per_sample_gradients,
    squared_error_loss,
    xent_loss,
)
from shuffledp.nn import (
    AttentionParams,
    MlpParams,
    attention_backward,
    attention_forward,
    clip_per_sample,
    grads_l2_norm,
    iter_arrays,
    mlp_backward,
    mlp_forward,
    softmax_rows,
)


def random_mlp(rng, n_in=4, hidden=5, n_out=3, activation="tanh"):
    return MlpParams(
        w1=rng.normal(size=(hidden, n_in)),
        b1=rng.normal(size=hidden),
        w2=rng.normal(size=(n_out, hidden)),
        b2=rng.normal(size=n_out),
        activation=activation,
    )


def random_attention(rng, seq=3, d_m=4, heads=2, d_k=3, d_v=3):
    return AttentionParams(
        wq=[rng.normal(size=(d_m, d_k)) for _ in range(heads)],
        wk=[rng.normal(size=(d_m, d_k)) for _ in range(heads)],
        wv=[rng.normal(size=(d_m, d_v)) for _ in range(heads)],
        wo=rng.normal(size=(heads * d_v, d_m)),
    )


# ------------------------------------------------------------------- forward


def test_mlp_identity_configuration_passes_input_through():
    p = MlpParams(
        w1=np.eye(3), b1=np.zeros(3), w2=np.eye(3), b2=np.zeros(3), activation="identity"
    )
    x = np.array([[0.5, -1.0, 2.0]])
    out, _ = mlp_forward(p, x)
    np.testing.assert_allclose(out, x)


def test_mlp_hand_case_first_layer():
    p = MlpParams(
        w1=np.eye(2), b1=np.array([1.0, 1.0]),
        w2=np.eye(2), b2=np.zeros(2), activation="relu",
    )
    out, cache = mlp_forward(p, np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(cache[2], [[2.0, 3.0]])  # hidden activations
    np.testing.assert_allclose(out, [[2.0, 3.0]])


def test_mlp_forward_matches_scalar_loop():
    rng = np.random.default_rng(7)
    p = random_mlp(rng)
    x = rng.normal(size=(4, 4))
    out, _ = mlp_forward(p, x)
    for b in range(4):
        hidden = np.empty(5)
        for j in range(5):
            acc = p.b1[j]
            for i in range(4):
                acc += x[b, i] * p.w1[j, i]
            hidden[j] = math.tanh(acc)
        for k in range(3):
            acc = p.b2[k]
            for j in range(5):
                acc += hidden[j] * p.w2[k, j]
            assert out[b, k] == pytest.approx(math.tanh(acc), rel=1e-12)


def test_mlp_forward_rejects_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        mlp_forward(random_mlp(rng), np.zeros((2, 7)))


def test_forward_deterministic():
    rng = np.random.default_rng(3)
    p = random_mlp(rng)
    x = rng.normal(size=(2, 4))
    a, _ = mlp_forward(p, x)
    b, _ = mlp_forward(p, x)
    assert np.array_equal(a, b)


def test_attention_single_position_degenerates():
    rng = np.random.default_rng(11)
    p = random_attention(rng, seq=1)
    x = rng.normal(size=(1, 4))
    out, _ = attention_forward(p, x)
    concat = np.concatenate([x @ p.wv[i] for i in range(2)], axis=1)
    np.testing.assert_allclose(out, concat @ p.wo, atol=1e-12)


def test_attention_zero_values_give_zero_output():
    rng = np.random.default_rng(12)
    p = random_attention(rng)
    for wv in p.wv:
        wv[:] = 0.0
    out, _ = attention_forward(p, rng.normal(size=(3, 4)))
    np.testing.assert_allclose(out, 0.0, atol=1e-15)


def test_attention_matches_scalar_loop():
    rng = np.random.default_rng(13)
    p = random_attention(rng, seq=4, d_m=8, heads=2, d_k=4, d_v=4)
    x = rng.normal(size=(4, 8))
    out, _ = attention_forward(p, x)

    ref_heads = []
    for i in range(2):
        q = x @ p.wq[i]
        k = x @ p.wk[i]
        v = x @ p.wv[i]
        a = np.empty((4, 4))
        for s in range(4):
            scores = np.array([q[s] @ k[t] for t in range(4)]) / math.sqrt(4)
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            a[s] = sum(w[t] * v[t] for t in range(4))
        ref_heads.append(a)
    ref = np.concatenate(ref_heads, axis=1) @ p.wo
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    z = rng.normal(0, 50, size=(20, 9))
    s = softmax_rows(z)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s >= 0)


# ------------------------------------------------------------------ backward


def test_mlp_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(21)
    p = random_mlp(rng)
    x = rng.normal(size=(3, 4))
    _, cache = mlp_forward(p, x)
    grads, dx = mlp_backward(p, cache, np.zeros((3, 3)))
    for arr in iter_arrays(grads):
        assert np.all(arr == 0.0)
    assert np.all(dx == 0.0)


def test_mlp_linear_single_sample_chain_rule_base_case():
    rng = np.random.default_rng(22)
    p = random_mlp(rng, activation="identity")
    x = rng.normal(size=(1, 4))
    _, cache = mlp_forward(p, x)
    upstream = rng.normal(size=(1, 3))
    grads, _ = mlp_backward(p, cache, upstream)
    hidden = cache[2]
    np.testing.assert_allclose(grads["w2"], upstream.T @ hidden, atol=1e-12)


def _finite_diff_check(params, forward, backward, tensors, rng, rel_tol=1e-4, h=1e-5):
    """Central-difference check of d(sum(R * out))/d(theta) for every tensor."""
    x = rng.normal(size=tensors.pop("__x_shape__"))
    out, cache = forward(params, x)
    r = rng.normal(size=out.shape)
    grads, _ = backward(params, cache, r)

    def phi():
        return float(np.sum(r * forward(params, x)[0]))

    worst = 0.0
    for key, arr in tensors.items():
        sub = grads[key]
        arrs = arr if isinstance(arr, list) else [arr]
        subs = sub if isinstance(sub, list) else [sub]
        for a, g in zip(arrs, subs):
            flat = a.ravel()
            gflat = np.asarray(g).ravel()
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                up = phi()
                flat[idx] = old - h
                dn = phi()
                flat[idx] = old
                fd = (up - dn) / (2.0 * h)
                denom = max(abs(fd), abs(gflat[idx]), 1e-6)
                worst = max(worst, abs(fd - gflat[idx]) / denom)
    return worst


@pytest.mark.parametrize("instance", range(20))
def test_mlp_backward_finite_differences(instance):
    rng = np.random.default_rng(1000 + instance)
    act = ("relu", "tanh", "identity")[instance % 3]
    p = random_mlp(rng, activation=act)
    tensors = {"w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2, "__x_shape__": (2, 4)}
    worst = _finite_diff_check(p, mlp_forward, mlp_backward, tensors, rng)
    assert worst < 1e-4


@pytest.mark.parametrize("instance", range(20))
def test_attention_backward_finite_differences(instance):
    rng = np.random.default_rng(2000 + instance)
    p = random_attention(rng)
    tensors = {"wq": p.wq, "wk": p.wk, "wv": p.wv, "wo": p.wo, "__x_shape__": (3, 4)}
    worst = _finite_diff_check(p, attention_forward, attention_backward, tensors, rng)
    assert worst < 1e-4


def test_attention_backward_input_gradient_finite_differences():
    rng = np.random.default_rng(31)
    p = random_attention(rng)
    x = rng.normal(size=(3, 4))
    out, cache = attention_forward(p, x)
    r = rng.normal(size=out.shape)
    _, dx = attention_backward(p, cache, r)
    h = 1e-6
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = float(np.sum(r * attention_forward(p, x)[0]))
        x[idx] = old - h
        dn = float(np.sum(r * attention_forward(p, x)[0]))
        x[idx] = old
        fd = (up - dn) / (2 * h)
        assert fd == pytest.approx(dx[idx], rel=1e-4, abs=1e-7)


def test_attention_single_position_wo_gradient_is_outer_product():
    rng = np.random.default_rng(32)
    p = random_attention(rng, seq=1)
    x = rng.normal(size=(1, 4))
    _, cache = attention_forward(p, x)
    upstream = rng.normal(size=(1, 4))
    grads, _ = attention_backward(p, cache, upstream)
    concat = cache[2]
    np.testing.assert_allclose(grads["wo"], concat.T @ upstream, atol=1e-12)


def test_attention_backward_zero_upstream():
    rng = np.random.default_rng(33)
    p = random_attention(rng)
    x = rng.normal(size=(3, 4))
    _, cache = attention_forward(p, x)
    grads, dx = attention_backward(p, cache, np.zeros((3, 4)))
    for arr in iter_arrays(grads):
        assert np.all(arr == 0.0)
    assert np.all(dx == 0.0)


# ------------------------------------------------------- per-sample gradients


MODEL_CFG = {
    "input_dim": 8,
    "seed": 4,
    "blocks": [
        {"kind": "transformer", "seq": 2, "d_model": 4, "heads": 2, "d_k": 3, "d_v": 3},
        {"kind": "mlp", "hidden": 6, "out": 3, "activation": "relu"},
    ],
}


def test_identical_examples_give_identical_per_sample_grads():
    model = build_model(MODEL_CFG)
    x = np.tile(np.linspace(-1, 1, 8), (3, 1))
    psg, _ = per_sample_gradients(model, x, [1, 1, 1], "xent")
    base = list(iter_arrays(psg.grads[0]))
    for g in psg.grads[1:]:
        for a, b in zip(base, iter_arrays(g)):
            np.testing.assert_array_equal(a, b)


def test_per_sample_sum_equals_batch_backward():
    from shuffledp.model import backward_sample

    model = build_model(MODEL_CFG)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(5, 8))
    y = [0, 1, 2, 0, 1]
    psg, _ = per_sample_gradients(model, x, y, "xent")
    summed = None
    for g in psg.grads:
        flat = np.concatenate([a.ravel() for a in iter_arrays(g)])
        summed = flat if summed is None else summed + flat
    batch = np.zeros_like(summed)
    for i in range(5):
        out, caches = forward_sample(model, x[i])
        _, dout = xent_loss(out, y[i])
        g = backward_sample(model, caches, dout)
        batch += np.concatenate([a.ravel() for a in iter_arrays(g)])
    np.testing.assert_allclose(summed, batch, atol=1e-10)


def test_clip_leaves_small_gradients_unchanged():
    model = build_model(MODEL_CFG)
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 8))
    psg, _ = per_sample_gradients(model, x, [0, 1], "xent")
    clipped = clip_per_sample(psg, 1e9)
    for g_old, g_new in zip(psg.grads, clipped.grads):
        for a, b in zip(iter_arrays(g_old), iter_arrays(g_new)):
            np.testing.assert_array_equal(a, b)


def test_clip_scales_norm_to_bound():
    model = build_model(MODEL_CFG)
    rng = np.random.default_rng(11)
    x = 5.0 * rng.normal(size=(4, 8))
    psg, _ = per_sample_gradients(model, x, [0, 1, 2, 0], "xent")
    c = 0.25
    clipped = clip_per_sample(psg, c)
    for g, norm in zip(clipped.grads, clipped.norms):
        assert grads_l2_norm(g) <= c + 1e-12
        assert norm <= c + 1e-12
    # direction preserved: clipped gradient is a positive multiple
    g0_old = np.concatenate([a.ravel() for a in iter_arrays(psg.grads[0])])
    g0_new = np.concatenate([a.ravel() for a in iter_arrays(clipped.grads[0])])
    scale = np.linalg.norm(g0_new) / np.linalg.norm(g0_old)
    np.testing.assert_allclose(g0_new, scale * g0_old, atol=1e-12)


def test_clip_hand_values():
    class Dummy:
        pass

    from shuffledp.nn import PerSampleGrads

    g1 = [{"w": np.array([0.3, 0.4])}]  # norm 0.5
    g2 = [{"w": np.array([0.0, 4.0])}]  # norm 4
    psg = PerSampleGrads(grads=[g1, g2], norms=np.array([0.5, 4.0]))
    clipped = clip_per_sample(psg, 1.0)
    np.testing.assert_allclose(clipped.grads[0][0]["w"], [0.3, 0.4])
    np.testing.assert_allclose(clipped.grads[1][0]["w"], [0.0, 1.0])
    np.testing.assert_allclose(clipped.norms, [0.5, 1.0])


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=4)
    _, d = xent_loss(logits, 2)
    h = 1e-6
    for i in range(4):
        logits[i] += h
        up, _ = xent_loss(logits, 2)
        logits[i] -= 2 * h
        dn, _ = xent_loss(logits, 2)
        logits[i] += h
        assert (up - dn) / (2 * h) == pytest.approx(d[i], rel=1e-6, abs=1e-9)
    out = rng.normal(size=3)
    target = rng.normal(size=3)
    _, d = squared_error_loss(out, target)
    np.testing.assert_allclose(d, out - target, atol=1e-12)
