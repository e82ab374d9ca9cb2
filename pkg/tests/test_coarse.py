import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coarse2fine import coarse as cs
from coarse2fine import numerics as nx
from coarse2fine.coarse import (
    LAYER_CONFIGS,
    AttentionStack,
    CoarseParams,
    LayerWeights,
    ThresholdSelector,
    expand_layer_weights,
    extract_cls_attention,
    fuse_layers,
    guided_global_attention,
    run_coarse_stage,
    soft_select,
)
from coarse2fine.numerics import ShapeError, Tape, Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def make_stack(b=1, heads=2, n_patches=4, layers=2, seed=0, cls_index=0):
    r = rng(seed)
    t = n_patches + 1
    mats = []
    for _ in range(layers):
        a = r.uniform(0.1, 1.0, size=(b, heads, t, t))
        a /= a.sum(axis=-1, keepdims=True)
        mats.append(Tensor(a))
    return AttentionStack(mats, cls_index=cls_index)


# ---------------------------------------------------------------------------
# straight-line oracle: plain numpy, no library ops


def oracle_minmax_rows(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        lo, hi = x[i].min(), x[i].max()
        out[i] = 0.5 if hi <= lo else (x[i] - lo) / (hi - lo)
    return out


def oracle_extract(stack_arrays, cls, layer):
    a = stack_arrays[layer]
    row = a[:, :, cls, :]
    row = np.delete(row, cls, axis=2)
    return oracle_minmax_rows(row.mean(axis=1))


def oracle_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_interp(w, n):
    L = w.shape[0]
    if L == 1 or n == 1:
        return np.full(n, w[0])
    pos = np.linspace(0.0, L - 1.0, n)
    i0 = np.minimum(np.floor(pos).astype(int), L - 2)
    frac = pos - i0
    return w[i0] + frac * (w[i0 + 1] - w[i0])

def oracle_selector(scores, p):
    mean = scores.mean(axis=1, keepdims=True)
    std = np.sqrt(((scores - mean) ** 2).mean(axis=1, keepdims=True))
    mx = scores.max(axis=1, keepdims=True)
    stats = np.concatenate([mean, std, mx], axis=1)
    hidden = np.tanh(stats @ p.w1.data + p.b1.data)
    return 1.0 / (1.0 + np.exp(-(hidden @ p.w2.data + p.b2.data)))


def oracle_guided(features, fused, p):
    b, c, h, w = features.shape
    n = h * w
    heads = p.heads
    d = c // heads
    x = features.transpose(0, 2, 3, 1).reshape(b, n, c)
    tau = oracle_selector(fused, p.selector)
    gate = 1.0 / (1.0 + np.exp(-(fused - tau) * p.selector.temperature))
    lw = oracle_softmax(p.layer_weights.logits.data)
    alpha = oracle_interp(lw, n) if p.alpha_expand == "interp" else np.ones(n)
    wsoft = gate * alpha[None, :]
    kv = x * wsoft[:, :, None]

    def split(z):
        return z.reshape(b, n, heads, d).transpose(0, 2, 1, 3)

    q = split(x @ p.wq.data + p.bq.data)
    k = split(kv @ p.wk.data + p.bk.data)
    v = split(kv @ p.wv.data + p.bv.data)
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    attn = oracle_softmax(logits)
    merged = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, c)
    out = merged @ p.wo.data + p.bo.data
    refreshed = np.concatenate([x, out], axis=2) @ p.fuse_w.data + p.fuse_b.data
    f_prime = refreshed.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    mask = wsoft.reshape(b, 1, h, w)
    return f_prime, mask, tau


# ---------------------------------------------------------------------------
# extraction


def test_extract_matches_hand_computation():
    stack = make_stack(b=2, heads=3, n_patches=4, layers=2, seed=1)
    arrays = [t.data for t in stack.layers]
    for layer in range(2):
        got = extract_cls_attention(stack, layer).data
        want = oracle_extract(arrays, 0, layer)
        assert got.shape == (2, 4)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_extract_nonzero_cls_index():
    r = rng(2)
    t = 5
    a = r.uniform(0.1, 1.0, size=(1, 2, t, t))
    a /= a.sum(axis=-1, keepdims=True)
    stack = AttentionStack([Tensor(a)], cls_index=3)
    got = extract_cls_attention(stack, 0).data
    want = oracle_extract([a], 3, 0)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_extract_head_permutation_invariant():
    # head order only changes float summation order, so allow last-ulp slack
    stack = make_stack(b=1, heads=4, n_patches=9, seed=3)
    base = extract_cls_attention(stack, 0).data
    perm = rng(4).permutation(4)
    permuted = AttentionStack([Tensor(stack.layers[0].data[:, perm]), stack.layers[1]])
    assert np.max(np.abs(extract_cls_attention(permuted, 0).data - base)) <= 1e-12


def test_extract_uniform_stack_gives_half_scores():
    # encoder-scale shape: 4096 patches plus one class token, 12 heads
    t = 4097
    a = np.full((1, 12, t, t), 1.0 / t, dtype=np.float32)
    stack = AttentionStack([Tensor(a)])
    got = extract_cls_attention(stack, 0)
    assert got.shape == (1, 4096)
    assert np.array_equal(got.data, np.full((1, 4096), 0.5, dtype=np.float32))
    del a, stack, got


def test_extract_scores_bounded():
    stack = make_stack(b=3, heads=2, n_patches=16, seed=5)
    s = extract_cls_attention(stack, 0).data
    assert np.all((s >= 0.0) & (s <= 1.0))
    assert np.any(s == 0.0) and np.any(s == 1.0)


def test_stack_validation_errors():
    with pytest.raises(ShapeError):
        AttentionStack([])
    with pytest.raises(ShapeError):
        AttentionStack([Tensor(np.zeros((1, 2, 4, 5)))])
    with pytest.raises(ShapeError):
        AttentionStack([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 2, 4, 4)))])
    with pytest.raises(ShapeError):
        AttentionStack([Tensor(np.zeros((1, 2, 4, 4)))], cls_index=4)


def test_stack_validate_warns_on_bad_rows():
    stack = AttentionStack([Tensor(np.full((1, 1, 5, 5), 0.3))])
    with pytest.warns(UserWarning):
        msgs = stack.validate()
    assert msgs


def test_layer_config_table():
    assert LAYER_CONFIGS["A"] == (0, 3, 6, 9)
    assert LAYER_CONFIGS["B"] == (1, 4, 7, 10)
    assert LAYER_CONFIGS["C"] == (1, 4, 8, 11)
    assert LAYER_CONFIGS["D"] == (2, 5, 8, 11)
    assert cs.DEFAULT_LAYER_IDS == LAYER_CONFIGS["C"]


# ---------------------------------------------------------------------------
# fusion


def test_fuse_equal_logits_is_plain_average():
    s1 = Tensor(rng(6).random((2, 4)))
    s2 = Tensor(rng(7).random((2, 4)))
    fused = fuse_layers([s1, s2], LayerWeights(Tensor(np.zeros(2)))).data
    assert np.max(np.abs(fused - 0.5 * (s1.data + s2.data))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 1000))
def test_fuse_is_convex_combination(layers, seed):
    r = rng(seed)
    scores = [Tensor(r.random((2, 6))) for _ in range(layers)]
    w = LayerWeights(Tensor(r.normal(size=layers)))
    fused = fuse_layers(scores, w).data
    lo = np.min([s.data for s in scores], axis=0)
    hi = np.max([s.data for s in scores], axis=0)
    assert np.all(fused >= lo - 1e-12)
    assert np.all(fused <= hi + 1e-12)


def test_fuse_length_mismatch():
    with pytest.raises(ShapeError):
        fuse_layers([Tensor(np.zeros((1, 4)))], LayerWeights(Tensor(np.zeros(2))))


def test_fused_weights_sum_to_one():
    w = LayerWeights(Tensor(rng(8).normal(size=4))).weights().data
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w > 0)


# ---------------------------------------------------------------------------
# gating


def test_soft_select_known_sigmoid_value():
    # (0.7 - 0.5) * 10 = 2, sigmoid(2) = 0.8807970779778823
    out = soft_select(Tensor(np.array([[0.7]])), Tensor(np.array([[0.5]])), 10.0)
    assert out.data[0, 0] == pytest.approx(0.8807970779778823, abs=1e-15)


def test_soft_select_rejects_nonpositive_sharpness():
    s = Tensor(np.array([[0.5]]))
    for lam in (0.0, -1.0):
        with pytest.raises(ValueError):
            soft_select(s, Tensor(np.array([[0.5]])), lam)


def test_soft_select_monotone_in_scores():
    r = rng(9)
    a = r.random((10_000,))
    b = r.random((10_000,))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    keep = hi > lo
    tau = Tensor(np.full((1, 1), 0.4))
    g_lo = soft_select(Tensor(lo[None, :]), tau, 10.0).data[0]
    g_hi = soft_select(Tensor(hi[None, :]), tau, 10.0).data[0]
    assert np.all(g_hi[keep] > g_lo[keep])


def test_soft_select_range_open_unit():
    s = Tensor(rng(10).normal(size=(3, 7)))
    g = soft_select(s, Tensor(np.zeros((3, 1))), 5.0).data
    assert np.all((g > 0.0) & (g < 1.0))


def test_selector_initial_threshold_near_half():
    sel = ThresholdSelector.init(rng(11))
    tau = sel(Tensor(rng(12).random((4, 9)))).data
    assert np.all(np.abs(tau - 0.5) < 0.02)
    assert np.all((tau > 0.0) & (tau < 1.0))


def test_selector_constant_scores_finite():
    sel = ThresholdSelector.init(rng(13))
    tau = sel(Tensor(np.full((2, 5), 0.8)))
    tau.check_finite()
    assert np.all((tau.data > 0.0) & (tau.data < 1.0))


def test_selector_matches_oracle():
    sel = ThresholdSelector.init(rng(14))
    scores = rng(15).random((3, 11))
    got = sel(Tensor(scores)).data
    assert np.max(np.abs(got - oracle_selector(scores, sel))) <= 1e-12


# ---------------------------------------------------------------------------
# layer weight expansion


def test_expand_same_length_is_exact_copy():
    w = Tensor(np.array([0.1, 0.4, 0.3, 0.2]))
    out = expand_layer_weights(w, 4).data
    assert np.array_equal(out, w.data)


def test_expand_endpoints_and_midpoint():
    w = Tensor(np.array([0.0, 1.0]))
    out = expand_layer_weights(w, 5).data
    assert out[0] == 0.0 and out[-1] == 1.0
    assert out[2] == pytest.approx(0.5, abs=1e-15)


def test_expand_ones_mode():
    out = expand_layer_weights(Tensor(np.array([0.2, 0.8])), 7, mode="ones").data
    assert np.array_equal(out, np.ones(7))


def test_expand_unknown_mode():
    with pytest.raises(ValueError):
        expand_layer_weights(Tensor(np.zeros(2)), 4, mode="nearest")


# ---------------------------------------------------------------------------
# guided attention vs the straight-line oracle


def small_params(seed=20, c=4, heads=2, layers=2, alpha="interp"):
    return CoarseParams.init(rng(seed), channels=c, num_layers=layers, heads=heads,
                             alpha_expand=alpha)


def randomize(params, seed=21):
    r = rng(seed)
    for t in params.params():
        t.data[...] = r.normal(scale=0.3, size=t.shape)
    return params


def test_guided_attention_matches_oracle_on_2x2():
    p = randomize(small_params())
    feats = rng(22).normal(size=(2, 4, 2, 2))
    fused = rng(23).random((2, 4))
    out = guided_global_attention(Tensor(feats), Tensor(fused), p)
    f_want, m_want, tau_want = oracle_guided(feats, fused, p)
    assert np.max(np.abs(out.features.data - f_want)) <= 1e-10
    assert np.max(np.abs(out.mask.data - m_want)) <= 1e-10
    assert np.max(np.abs(out.tau.data - tau_want)) <= 1e-10


def test_run_coarse_stage_matches_oracle_end_to_end():
    p = randomize(small_params(), seed=30)
    stack = make_stack(b=2, heads=3, n_patches=4, layers=2, seed=31)
    feats = rng(32).normal(size=(2, 4, 2, 2))
    out = run_coarse_stage(stack, Tensor(feats), p)

    arrays = [t.data for t in stack.layers]
    lw = oracle_softmax(p.layer_weights.logits.data)
    fused = sum(lw[i] * oracle_extract(arrays, 0, i) for i in range(2))
    f_want, m_want, tau_want = oracle_guided(feats, fused, p)
    assert np.max(np.abs(out.fused_scores.data - fused)) <= 1e-10
    assert np.max(np.abs(out.features.data - f_want)) <= 1e-10
    assert np.max(np.abs(out.mask.data - m_want)) <= 1e-10
    assert np.max(np.abs(out.tau.data - tau_want)) <= 1e-10


def test_guided_attention_shapes_and_mask_range():
    p = small_params()
    out = guided_global_attention(Tensor(rng(24).normal(size=(1, 4, 3, 3))),
                                  Tensor(rng(25).random((1, 9))), p)
    assert out.features.shape == (1, 4, 3, 3)
    assert out.mask.shape == (1, 1, 3, 3)
    assert out.tau.shape == (1, 1)
    assert np.all((out.mask.data >= 0.0) & (out.mask.data <= 1.0))


def test_guided_attention_shape_errors():
    p = small_params()
    with pytest.raises(ShapeError):
        guided_global_attention(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 5))), p)
    with pytest.raises(ShapeError):
        guided_global_attention(Tensor(np.zeros((1, 8, 2, 2))), Tensor(np.zeros((1, 4))), p)


def test_identity_init_passes_features_through():
    # zero-ish projections and identity fusion keep the stage near-identity
    p = small_params(seed=26)
    feats = rng(27).normal(size=(1, 4, 2, 2))
    out = guided_global_attention(Tensor(feats), Tensor(rng(28).random((1, 4))), p)
    assert np.max(np.abs(out.features.data - feats)) < 0.05


# ---------------------------------------------------------------------------
# gradients


def test_soft_select_gradient():
    tau = Tensor(np.full((1, 1), 0.45))
    r = Tensor(rng(40).normal(size=(1, 8)))

    def f(x):
        return nx.reduce_sum(nx.mul(soft_select(x, tau, 10.0), r))

    x = Tensor(rng(41).random((1, 8)))
    assert grad_check(f, x) <= 1e-4


def test_guided_attention_gradient_wrt_features():
    p = randomize(small_params(), seed=42)
    fused = Tensor(rng(43).random((1, 4)))
    probe = Tensor(rng(44).normal(size=(1, 4, 2, 2)))

    def f(x):
        out = guided_global_attention(x, fused, p)
        return nx.reduce_sum(nx.mul(out.features, probe))

    x = Tensor(rng(45).normal(size=(1, 4, 2, 2)))
    assert grad_check(f, x) <= 1e-4


def test_guided_attention_gradient_wrt_fused_scores():
    p = randomize(small_params(), seed=46)
    feats = Tensor(rng(47).normal(size=(1, 4, 2, 2)))
    probe = Tensor(rng(48).normal(size=(1, 4, 2, 2)))
    probe_m = Tensor(rng(49).normal(size=(1, 1, 2, 2)))

    def f(s):
        out = guided_global_attention(feats, s, p)
        return nx.add(nx.reduce_sum(nx.mul(out.features, probe)),
                      nx.reduce_sum(nx.mul(out.mask, probe_m)))

    s = Tensor(0.2 + 0.6 * rng(50).random((1, 4)))
    assert grad_check(f, s) <= 1e-4


def test_layer_weight_gradient_flows_through_stage():
    p = randomize(small_params(), seed=51)
    stack = make_stack(b=1, heads=2, n_patches=4, layers=2, seed=52)
    feats = Tensor(rng(53).normal(size=(1, 4, 2, 2)))
    with Tape() as tape:
        out = run_coarse_stage(stack, feats, p)
        loss = nx.reduce_mean(out.mask)
    tape.backward(loss)
    g = tape.grad(p.layer_weights.logits)
    assert g.shape == (2,)
    assert np.any(g != 0.0)
