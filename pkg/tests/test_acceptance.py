"""Acceptance gate: one test per headline guarantee.

Every test prints a single `[acceptance] <name>: PASS/FAIL` line so the
suite doubles as a checklist. Oracles here are written from scratch in
plain numpy, independent of the library internals they check.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np

from coarse2fine.coarse import (CoarseParams, LayerWeights, ThresholdSelector,
                                run_coarse_stage)
from coarse2fine.complexity import cost_report, flops_msa, flops_wmsa, flops_wssa
from coarse2fine.config import PipelineConfig
from coarse2fine.fine import SparseAttnParams, WindowSpec, sparse_window_attention, window_partition
from coarse2fine.numerics import Tensor
from coarse2fine.pipeline import run_pipeline
from coarse2fine.synth import synth_inputs
from coarse2fine.tensorfile import read_grct
from coarse2fine.verification import GRAD_TOL, gradient_suite, invariant_suite

T = Tensor


def note(name: str, ok: bool, detail: str = "") -> bool:
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)
    return ok


def _run_cli(args, out_dir, env_extra=None):
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1",
               MKL_NUM_THREADS="1", **(env_extra or {}))
    return subprocess.run([sys.executable, "-m", "coarse2fine", *args,
                           "--out-dir", str(out_dir)],
                          capture_output=True, text=True, env=env, timeout=300)


# ------------------------------------------------------------------ 1

def test_default_config_shape_contract(tmp_path):
    """Default run finishes under 60 s single-threaded with the exact shape chain."""
    t0 = time.monotonic()
    proc = _run_cli(["pipeline"], tmp_path)
    elapsed = time.monotonic() - t0
    ok = proc.returncode == 0
    shapes = {}
    if ok:
        shapes = json.loads((tmp_path / "report.json").read_text())["shapes"]
    expected = {
        "nominal_input": [1, 3, 1024, 1024],
        "encoder_features": [1, 256, 64, 64],
        "coarse_mask": [1, 1, 64, 64],
        "fine_tokens": [1, 256, 256, 256],
        "guidance_mask": [1, 1, 256, 256],
        "fine_logits": [1, 1, 1024, 1024],
    }
    for key, want in expected.items():
        ok &= shapes.get(key) == want
    if ok:
        ok &= read_grct(tmp_path / "fine_logits.grct").shape == (1, 1, 1024, 1024)
        ok &= read_grct(tmp_path / "coarse_mask.grct").shape == (1, 1, 64, 64)
    ok &= elapsed <= 60.0
    assert note("default config shape contract", ok,
                f"{elapsed:.1f}s wall, exit {proc.returncode}")


# ------------------------------------------------------------------ 2

def _np_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _bias_index_loop(ws):
    n = ws * ws
    idx = np.empty((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            dy = a // ws - b // ws
            dx = a % ws - b % ws
            idx[a, b] = (dy + ws - 1) * (2 * ws - 1) + (dx + ws - 1)
    return idx


def _plain_window_mha(x, wq, wk, wv, table, heads):
    """Reference multi-head window attention with relative position bias."""
    nw, n, c = x.shape
    d = c // heads
    ws = int(np.sqrt(n))
    bias = table[_bias_index_loop(ws)]                     # (n, n, heads)
    out = np.empty_like(x)
    for w in range(nw):
        q, k, v = x[w] @ wq, x[w] @ wk, x[w] @ wv
        merged = np.empty((n, c))
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(d) + bias[:, :, h]
            merged[:, sl] = _np_softmax(logits) @ v[:, sl]
        out[w] = merged
    return out


def _dense_mha(x, wq, wk, wv, heads):
    """Reference dense attention over all tokens of each sample."""
    b, n, c = x.shape
    d = c // heads
    out = np.empty_like(x)
    for s in range(b):
        q, k, v = x[s] @ wq, x[s] @ wk, x[s] @ wv
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(d)
            out[s, :, sl] = _np_softmax(logits) @ v[:, sl]
    return out


def _coarse_oracle(stack, feats, p):
    """Straight-line numpy transcription of the whole coarse stage."""
    L = len(stack)
    b, _, t, _ = stack[0].shape
    n = t - 1
    _, c, h, w = feats.shape

    scores = []
    for a in stack:
        mean = a[:, :, 0, 1:].mean(axis=1)
        lo = mean.min(axis=-1, keepdims=True)
        span = mean.max(axis=-1, keepdims=True) - lo
        scores.append(np.where(span == 0.0, 0.5, (mean - lo) / np.where(span == 0, 1, span)))
    lw = _np_softmax(p.layer_weights.logits.data)
    fused = sum(lw[i] * scores[i] for i in range(L))

    sel = p.selector
    mu = fused.mean(axis=-1, keepdims=True)
    sd = np.sqrt(((fused - mu) ** 2).mean(axis=-1, keepdims=True))
    stats = np.concatenate([mu, sd, fused.max(axis=-1, keepdims=True)], axis=1)
    hidden = np.tanh(stats @ sel.w1.data + sel.b1.data)
    tau = 1.0 / (1.0 + np.exp(-(hidden @ sel.w2.data + sel.b2.data)))
    gate = 1.0 / (1.0 + np.exp(-(fused - tau) * sel.temperature))

    pos = np.linspace(0.0, L - 1.0, n)
    i0 = np.minimum(np.floor(pos).astype(int), L - 2)
    alpha = lw[i0] * (1.0 - (pos - i0)) + lw[i0 + 1] * (pos - i0)
    wsoft = gate * alpha[None, :]

    x = feats.transpose(0, 2, 3, 1).reshape(b, n, c)
    kv = x * wsoft[:, :, None]
    heads = p.heads
    d = c // heads
    attn_out = np.empty_like(x)
    for s in range(b):
        q = x[s] @ p.wq.data + p.bq.data
        k = kv[s] @ p.wk.data + p.bk.data
        v = kv[s] @ p.wv.data + p.bv.data
        merged = np.empty((n, c))
        for hd in range(heads):
            sl = slice(hd * d, (hd + 1) * d)
            logits = q[:, sl] @ k[:, sl].T / np.sqrt(d)
            merged[:, sl] = _np_softmax(logits) @ v[:, sl]
        attn_out[s] = merged @ p.wo.data + p.bo.data
    refreshed = np.concatenate([x, attn_out], axis=2) @ p.fuse_w.data + p.fuse_b.data
    f_prime = refreshed.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return f_prime, wsoft.reshape(b, 1, h, w), tau


def test_oracle_equivalences():
    """Library outputs match from-scratch references at pinned tolerances."""
    rng = np.random.default_rng(404)
    ws, n, c, heads, nw = 3, 9, 8, 2, 5
    u = lambda *s: rng.uniform(-0.5, 0.5, size=s)

    # (a) zero guidance and pairwise off reduce to plain window attention
    p_off = SparseAttnParams(wq=T(u(c, c)), wk=T(u(c, c)), wv=T(u(c, c)),
                             bias_table=T(u((2 * ws - 1) ** 2, heads) * 0.3),
                             kv_scale=T(np.array([0.7])), heads=heads, pairwise="off")
    x = u(nw, n, c)
    got = sparse_window_attention(T(x), T(np.zeros((nw, n))), p_off).data
    ref = _plain_window_mha(x, p_off.wq.data, p_off.wk.data, p_off.wv.data,
                            p_off.bias_table.data, heads)
    err_a = float(np.abs(got - ref).max())

    # (b) one window spanning the whole grid behaves like dense attention
    g = 4
    p_dense = SparseAttnParams(wq=T(u(c, c)), wk=T(u(c, c)), wv=T(u(c, c)),
                               bias_table=T(np.zeros(((2 * g - 1) ** 2, heads))),
                               kv_scale=T(np.array([0.4])), heads=heads, pairwise="off")
    grid = u(2, g, g, c)
    win, rec = window_partition(T(grid), WindowSpec(g))
    got_d = sparse_window_attention(win, T(np.zeros((2, g * g))), p_dense).data
    ref_d = _dense_mha(grid.reshape(2, g * g, c), p_dense.wq.data, p_dense.wk.data,
                       p_dense.wv.data, heads)
    err_b = float(np.abs(got_d - ref_d).max())

    # (c) the full coarse stage against a straight-line transcription
    b, hg, wg, layers, eh = 2, 3, 3, 3, 2
    t = hg * wg + 1
    stack_np = []
    for _ in range(layers):
        a = rng.random((b, eh, t, t)) + 1e-3
        a /= a.sum(axis=-1, keepdims=True)
        stack_np.append(a)
    from coarse2fine.coarse import AttentionStack
    stack = AttentionStack([T(a) for a in stack_np])
    feats = u(b, c, hg, wg)
    params = CoarseParams(
        layer_weights=LayerWeights(T(u(layers))),
        selector=ThresholdSelector(w1=T(u(3, 8)), b1=T(u(8) * 0.1),
                                   w2=T(u(8, 1)), b2=T(u(1) * 0.1), temperature=10.0),
        wq=T(u(c, c)), bq=T(u(c) * 0.1), wk=T(u(c, c)), bk=T(u(c) * 0.1),
        wv=T(u(c, c)), bv=T(u(c) * 0.1), wo=T(u(c, c)), bo=T(u(c) * 0.1),
        fuse_w=T(u(2 * c, c)), fuse_b=T(u(c) * 0.1), heads=heads)
    got_c = run_coarse_stage(stack, T(feats), params)
    ref_f, ref_m, ref_tau = _coarse_oracle(stack_np, feats, params)
    err_c = max(float(np.abs(got_c.features.data - ref_f).max()),
                float(np.abs(got_c.mask.data - ref_m).max()),
                float(np.abs(got_c.tau.data - ref_tau).max()))

    ok = err_a <= 1e-12 and err_b <= 1e-8 and err_c <= 1e-10
    assert note("oracle equivalences", ok,
                f"plain {err_a:.2e} <= 1e-12, dense {err_b:.2e} <= 1e-8, "
                f"coarse {err_c:.2e} <= 1e-10")


# ------------------------------------------------------------------ 3

def test_gradient_suite():
    """Analytic gradients match finite differences everywhere, rel err <= 1e-4."""
    results = gradient_suite(seed=0)
    worst_name, worst = max(results, key=lambda r: r[1])
    ok = all(err <= GRAD_TOL for _, err in results)
    for name, err in results:
        print(f"    {name:<36} {err:.3e}")
    assert note("gradient suite", ok,
                f"{len(results)} checks, worst {worst:.2e} at {worst_name}, tol {GRAD_TOL:.0e}")


# ------------------------------------------------------------------ 4

def test_complexity_exactness():
    """Reference cost integers, counted == analytic, and sparse monotonicity."""
    ok = flops_msa(64, 64, 256) == 9_663_676_416
    ok &= flops_wmsa(64, 64, 256, 6) == 1_074_036_736
    ok &= flops_wssa(64, 64, 256, 6, 0.5) == 1_073_889_280

    for mech, m, rho in (("msa", None, 1.0), ("wmsa", 3, 1.0), ("wssa", 4, 0.5)):
        rep = cost_report(mech, 12, 12, 8, m=m, rho=rho, swin_convention=True)
        ok &= rep.counted == rep.analytic

    counts = [cost_report("wssa", 12, 12, 8, m=4, rho=r, swin_convention=True).counted
              for r in (0.25, 0.5, 0.75, 1.0)]
    ok &= all(a < b for a, b in zip(counts, counts[1:]))

    full = cost_report("wssa", 12, 12, 8, m=3, rho=1.0, swin_convention=True)
    win = cost_report("wmsa", 12, 12, 8, m=3, swin_convention=True)
    ok &= full.counted == win.counted and full.analytic == win.analytic
    assert note("complexity exactness", ok,
                f"counted rho sweep {counts}, wssa(rho=1) == wmsa {full.counted}")


# ------------------------------------------------------------------ 5

def test_structural_invariants():
    """Round trips, row sums, mask ranges, gate monotonicity, determinism."""
    results = invariant_suite(seed=0, roundtrips=1000, gate_pairs=10_000)
    ok = all(flag for _, flag, _ in results)
    for name, flag, detail in results:
        print(f"    {'ok ' if flag else 'BAD'} {name:<42} {detail}")
    assert note("structural invariants", ok, f"{len(results)} checks")


# ------------------------------------------------------------------ 6

def test_planted_block_localization():
    """The fine mask finds the planted block for at least 95 of 100 seeds."""
    wins = 0
    worst = np.inf
    for seed in range(100):
        cfg = PipelineConfig(coarse_h=16, coarse_w=16, fine_scale=2, out_h=128,
                             out_w=128, channels=32, heads=4, window=6,
                             encoder_heads=2, scenario="planted-block",
                             dtype="f32", seed=seed)
        res = run_pipeline(cfg)
        y0, x0, bh, bw = res.inputs.block
        up = cfg.out_h // cfg.coarse_h
        m = res.fine.logits.data[0, 0]
        sel = m[y0 * up:(y0 + bh) * up, x0 * up:(x0 + bw) * up]
        inside = sel.mean()
        outside = (m.sum() - sel.sum()) / (m.size - sel.size)
        margin = inside - outside
        worst = min(worst, margin)
        wins += margin >= 0.1
    ok = wins >= 95
    assert note("planted block localization", ok,
                f"{wins}/100 seeds with margin >= 0.1, worst margin {worst:.3f}")


# ------------------------------------------------------------------ 7

MINI_ARGS = ["--seed", "13", "--set", "coarse_h=8", "--set", "coarse_w=8",
             "--set", "channels=16", "--set", "heads=4", "--set", "window=3",
             "--set", "fine_scale=2", "--set", "out_h=64", "--set", "out_w=64",
             "--set", "encoder_heads=2"]

ARTIFACTS = ("coarse_mask.grct", "coarse_mask.pgm", "fused_scores.grct",
             "fine_logits.grct", "fine_mask.pgm", "report.json")


def test_artifact_determinism(tmp_path):
    """Same config and seed produce byte-identical artifacts across processes."""
    a, b = tmp_path / "a", tmp_path / "b"
    ra = _run_cli(["pipeline", *MINI_ARGS], a)
    rb = _run_cli(["pipeline", *MINI_ARGS], b)
    ok = ra.returncode == 0 and rb.returncode == 0
    diffs = []
    for name in ARTIFACTS:
        same = (a / name).read_bytes() == (b / name).read_bytes()
        ok &= same
        if not same:
            diffs.append(name)
    assert note("artifact determinism", ok,
                "all byte-identical" if not diffs else f"differ: {diffs}")
