"""Mixture-of-LoRA layers: routing, gating, the dense-forward oracle,
auxiliary losses with finite-difference gradient checks, and expansion."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cldsi.mixlora import (
    LoRAExpertPair,
    MixLoRALayer,
    Router,
    expand_layer,
    gate_topk,
    load_balance_loss,
    load_balance_loss_grad,
    mixlora_forward,
    mixlora_forward_cache,
    router_aux_loss,
    router_aux_loss_grad,
    router_logits,
    routing_fractions,
)


def softmax(z):
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_layer(dim=6, hidden=8, n=2, rank=2, kind="cosine", top_k=2, seed=0, scale=8.0):
    rng = np.random.default_rng(seed)
    return MixLoRALayer(
        w_in=rng.normal(size=(dim, hidden)),
        w_out=rng.normal(size=(hidden, dim)),
        ln_g=rng.normal(1.0, 0.1, size=dim),
        router=Router.new(kind, dim, n, top_k, rng),
        experts=[LoRAExpertPair.new(dim, hidden, rank, rng) for _ in range(n)],
        lora_scale=scale,
        ema_tau=np.full(2, np.nan),
    )


# -- router logits ---------------------------------------------------------------


def test_cosine_self_similarity():
    r = Router.new("cosine", 4, 3, 1, np.random.default_rng(0))
    np.testing.assert_allclose(router_logits(r.weights[:, 1], r)[1], 1.0, atol=1e-12)


def test_cosine_orthogonal_inputs():
    w = np.zeros((4, 2))
    w[0, 0] = 1.0
    w[1, 1] = 1.0
    r = Router(kind="cosine", weights=w, top_k=1)
    x = np.array([0.0, 0.0, 2.0, 0.0])
    np.testing.assert_allclose(router_logits(x, r), [0.0, 0.0], atol=1e-12)


def test_softmax_kind_inner_products():
    r = Router(kind="softmax", weights=np.eye(2), top_k=1)
    np.testing.assert_allclose(router_logits(np.array([2.0, 1.0]), r), [2.0, 1.0])


def test_cosine_zero_norm_errors():
    r = Router.new("cosine", 3, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        router_logits(np.zeros(3), r)


def test_cosine_logits_bounded():
    rng = np.random.default_rng(4)
    r = Router.new("cosine", 5, 4, 2, rng)
    out = router_logits(rng.normal(size=(20, 5)), r)
    assert np.all(out <= 1 + 1e-12) and np.all(out >= -1 - 1e-12)


# -- gating ------------------------------------------------------------------------


def test_gate_topk_example():
    gates = gate_topk(np.array([2.0, 1.0, 0.0]), 2)
    ref = softmax(np.array([2.0, 1.0, 0.0]))
    np.testing.assert_allclose(gates, [ref[0], ref[1], 0.0], atol=1e-12)
    np.testing.assert_allclose(gates[:2], [0.6652, 0.2447], atol=1e-4)


def test_gate_topk_full_k_is_softmax():
    z = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(gate_topk(z, 3), softmax(z))


def test_gate_topk_tie_prefers_lower_index():
    gates = gate_topk(np.zeros(4), 1)
    np.testing.assert_allclose(gates, [0.25, 0, 0, 0])


def test_gate_topk_bad_k():
    with pytest.raises(ValueError):
        gate_topk(np.zeros(3), 4)


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(-20, 20), min_size=2, max_size=6),
    k=st.integers(1, 6),
)
def test_gate_sparsity_property(logits, k):
    z = np.array(logits)
    k = min(k, z.size)
    gates = gate_topk(z, k)
    assert (gates > 0).sum() <= k
    p = softmax(z)
    nz = gates > 0
    np.testing.assert_allclose(gates[nz], p[nz], atol=1e-12)


# -- layer forward -------------------------------------------------------------------


def test_zero_init_experts_reproduce_frozen_ffn():
    layer = make_layer(n=3)
    x = np.random.default_rng(1).normal(size=(5, 6))
    y = mixlora_forward(x, layer)

    # exact: zero up-projections contribute exactly 0 regardless of routing,
    # so active routing and all-zero gates give bitwise-identical outputs
    y_gateless = mixlora_forward(x, layer, gate_override=np.zeros(3))
    np.testing.assert_array_equal(y, y_gateless)

    def rms(v):
        return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + 1e-6)

    ffn = x + np.maximum((rms(x) * layer.ln_g) @ layer.w_in, 0.0) @ layer.w_out
    np.testing.assert_allclose(y, ffn, rtol=1e-13, atol=1e-13)


def test_forced_gate_matches_dense_oracle():
    layer = make_layer(n=1, top_k=1)
    rng = np.random.default_rng(2)
    e = layer.experts[0]
    e.up_in[...] = rng.normal(size=e.up_in.shape)
    e.up_out[...] = rng.normal(size=e.up_out.shape)
    x = rng.normal(size=(4, 6))
    y = mixlora_forward(x, layer, gate_override=np.array([1.0]))

    # oracle: evaluate the governing equations with materialized dense deltas
    s = layer.scale_eff
    d_in = e.down_in @ e.up_in * s
    d_out = e.down_out @ e.up_out * s

    def rms(v):
        return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + 1e-6)

    x1 = (rms(x) * layer.ln_g) @ layer.w_in + x @ d_in
    h = np.maximum(x1, 0.0)
    ref = x + h @ layer.w_out + h @ d_out
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_all_zero_gates_degenerate():
    layer = make_layer(n=2)
    for e in layer.experts:
        e.up_in[...] = 1.0  # even non-trivial experts are silenced by zero gates
        e.up_out[...] = 1.0
    x = np.random.default_rng(3).normal(size=(3, 6))
    y = mixlora_forward(x, layer, gate_override=np.zeros(2))

    def rms(v):
        return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + 1e-6)

    ffn = x + np.maximum((rms(x) * layer.ln_g) @ layer.w_in, 0.0) @ layer.w_out
    np.testing.assert_allclose(y, ffn, atol=1e-12)


def test_single_vector_forward():
    layer = make_layer()
    x = np.random.default_rng(4).normal(size=6)
    y = mixlora_forward(x, layer)
    yb = mixlora_forward(x[None, :], layer)
    np.testing.assert_array_equal(y, yb[0])


# -- load-balancing loss ---------------------------------------------------------------


def test_load_balance_uniform_collapses_to_a():
    n, t = 4, 8
    probs = np.full((t, n), 1 / n)
    assignments = np.arange(t) % n
    np.testing.assert_allclose(load_balance_loss(probs, assignments, a=0.37), 0.37)


def test_load_balance_worked_example():
    probs = np.tile([0.9, 0.1], (6, 1))
    loss = load_balance_loss(probs, np.zeros(6, dtype=int), a=0.01)
    np.testing.assert_allclose(loss, 0.018)


def test_load_balance_zero_weight():
    probs = np.tile([0.6, 0.4], (3, 1))
    assert load_balance_loss(probs, np.zeros(3, dtype=int), a=0.0) == 0.0


def test_load_balance_empty_batch_errors():
    with pytest.raises(ValueError):
        load_balance_loss(np.zeros((0, 2)), np.zeros(0, dtype=int), a=0.1)


def test_load_balance_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        load_balance_loss(np.full((3, 2), 0.9), np.zeros(3, dtype=int), a=0.1)


def test_load_balance_grad_matches_fd():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(7, 3))
    probs = softmax(z)
    asg = z.argmax(axis=1)
    loss, dp = load_balance_loss_grad(probs, asg, a=0.05)
    eps = 1e-7
    for idx in [(0, 0), (3, 1), (6, 2)]:
        p1 = probs.copy()
        p1[idx] += eps
        p2 = probs.copy()
        p2[idx] -= eps
        # bypass the row-sum validation: evaluate the formula directly
        def f(p):
            frac = np.bincount(asg, minlength=3) / p.shape[0]
            return 0.05 * 3 * (frac * p.mean(axis=0)).sum()
        fd = (f(p1) - f(p2)) / (2 * eps)
        assert abs(fd - dp[idx]) <= 1e-6 * max(1.0, abs(fd))


# -- router auxiliary loss ----------------------------------------------------------------


def _orthonormal_router(new_along, others, top_k=1):
    cols = [c / np.linalg.norm(c) for c in others] + [new_along / np.linalg.norm(new_along)]
    return Router(kind="cosine", weights=np.stack(cols, axis=1), top_k=top_k)


def test_aux_zero_when_aligned_and_orthogonal():
    new = np.array([1.0, 0, 0, 0])
    other = np.array([0.0, 1, 0, 0])
    router = _orthonormal_router(new, [other])
    h = np.tile(new, (3, 1))
    assert router_aux_loss(h, router, new_index=1) == pytest.approx(0.0, abs=1e-12)


def test_aux_one_when_h_orthogonal():
    new = np.array([1.0, 0, 0, 0])
    other = np.array([0.0, 1, 0, 0])
    router = _orthonormal_router(new, [other])
    h = np.tile(np.array([0.0, 0, 1, 0]), (4, 1))
    assert router_aux_loss(h, router, new_index=1) == pytest.approx(1.0, abs=1e-12)


def test_aux_half_overlap_example():
    # N=2, all h = R_new, cos(R_1, R_new) = 0.5 -> loss 0.5
    new = np.array([1.0, 0, 0])
    other = np.array([0.5, np.sqrt(1 - 0.25), 0])
    router = _orthonormal_router(new, [other])
    h = np.tile(new, (5, 1))
    assert router_aux_loss(h, router, new_index=1) == pytest.approx(0.5, abs=1e-12)


def test_aux_requires_hidden_states():
    router = Router.new("cosine", 3, 2, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        router_aux_loss(np.zeros((0, 3)), router, new_index=1)


def test_aux_nonnegative_random():
    rng = np.random.default_rng(9)
    router = Router.new("cosine", 5, 4, 2, rng)
    h = rng.normal(size=(6, 5))
    assert router_aux_loss(h, router, new_index=3) >= 0.0


@pytest.mark.parametrize("new_index", [None, 2])
def test_aux_grad_matches_fd(new_index):
    rng = np.random.default_rng(12)
    router = Router.new("cosine", 5, 3, 2, rng)
    h = rng.normal(size=(4, 5))
    loss, dh, dr = router_aux_loss_grad(h, router, new_index)
    eps = 1e-6
    for idx in [(0, 0), (2, 3), (3, 4)]:
        hp = h.copy(); hp[idx] += eps
        hm = h.copy(); hm[idx] -= eps
        fd = (router_aux_loss(hp, router, new_index) - router_aux_loss(hm, router, new_index)) / (2 * eps)
        assert abs(fd - dh[idx]) <= 1e-6 * max(1.0, abs(fd))
    for idx in [(0, 0), (1, 2), (4, 1)]:
        wp = router.weights.copy(); wp[idx] += eps
        wm = router.weights.copy(); wm[idx] -= eps
        rp = Router(kind="cosine", weights=wp, top_k=2)
        rm = Router(kind="cosine", weights=wm, top_k=2)
        fd = (router_aux_loss(h, rp, new_index) - router_aux_loss(h, rm, new_index)) / (2 * eps)
        assert abs(fd - dr[idx]) <= 1e-6 * max(1.0, abs(fd))


# -- expansion ---------------------------------------------------------------------------


def test_expand_increments_and_freezes():
    layer = make_layer(n=2)
    rng = np.random.default_rng(0)
    expand_layer(layer, timestep=3, rng=rng)
    assert layer.n_experts == 3
    assert layer.router.weights.shape[1] == 3
    assert [e.frozen for e in layer.experts] == [True, True, False]
    assert layer.router.frozen_cols == [True, True, False]
    assert layer.experts[-1].created_at == 3
    np.testing.assert_allclose(np.linalg.norm(layer.router.weights[:, 2]), 1.0)


def test_double_expansion_records_timesteps():
    layer = make_layer(n=2)
    rng = np.random.default_rng(0)
    expand_layer(layer, timestep=4, rng=rng)
    expand_layer(layer, timestep=4, rng=rng)
    assert [e.created_at for e in layer.experts[2:]] == [4, 4]


def test_expand_zero_gate_output_identical():
    layer = make_layer(n=2, top_k=2, seed=7)
    rng = np.random.default_rng(1)
    for e in layer.experts:  # non-trivial experts
        e.up_in[...] = rng.normal(size=e.up_in.shape)
        e.up_out[...] = rng.normal(size=e.up_out.shape)
    x = rng.normal(size=(6, 6))
    gates_before, _ = mixlora_forward_cache(x, layer)[1]["gates"], None
    y_before = mixlora_forward(x, layer)
    expand_layer(layer, timestep=1, rng=rng)
    override = np.concatenate([gates_before, np.zeros((6, 1))], axis=1)
    y_after = mixlora_forward(x, layer, gate_override=override)
    np.testing.assert_array_equal(y_before, y_after)


def test_routing_fractions_sum_to_one():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(40, 5))
    frac = routing_fractions(logits)
    assert frac.shape == (5,)
    np.testing.assert_allclose(frac.sum(), 1.0)
