"""Shared verification suites: gradient checks and structural invariants.

The gradcheck and selftest CLI subcommands and the acceptance tests all run
these exact routines, so a PASS on the command line means the same thing as
a green test.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from . import numerics as nx
from .coarse import CoarseOutput, CoarseParams, guided_global_attention, soft_select
from .complexity import cost_report, flops_msa, flops_wmsa, flops_wssa
from .config import PipelineConfig
from .fine import (FineParams, SparseAttnParams, WindowSpec, cyclic_shift, fine_pass,
                   sparse_window_attention, window_partition, window_reverse)
from .losses import LossWeights, bce_dice_loss, ce_label_smoothing, focal_loss, total_loss
from .numerics import Tensor, grad_check
from .pipeline import report_json, run_pipeline
from .tensorfile import read_grct, write_grct

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5

FLAGSHIP_MSA = 9_663_676_416
FLAGSHIP_WMSA = 1_074_036_736
FLAGSHIP_WSSA = 1_073_889_280


def _proj(t: Tensor, w: np.ndarray) -> Tensor:
    """Fixed random projection to a scalar so every output entry gets weight."""
    return nx.reduce_sum(nx.mul(t, Tensor(np.asarray(w, dtype=np.float64))))


def gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Analytic-vs-finite-difference error for every differentiable surface.

    Everything runs in f64 at small shapes; returns (name, max rel err) pairs.
    """
    rng = np.random.default_rng(seed)
    out: list[tuple[str, float]] = []

    # threshold gating
    scores = Tensor(rng.uniform(0.1, 0.9, size=(2, 12)))
    tau = Tensor(rng.uniform(0.3, 0.7, size=(2, 1)))
    w = rng.standard_normal((2, 12))
    out.append(("soft_select/scores",
                grad_check(lambda s: _proj(soft_select(s, tau, 7.0), w), scores, GRAD_EPS)))
    out.append(("soft_select/tau",
                grad_check(lambda t: _proj(soft_select(scores, t, 7.0), w), tau, GRAD_EPS)))

    # coarse guided attention, both outputs
    cp = CoarseParams.init(rng, channels=8, num_layers=3, heads=2, dtype="f64")
    feats = Tensor(rng.standard_normal((1, 8, 3, 3)) * 0.5)
    fused = Tensor(rng.uniform(0.1, 0.9, size=(1, 9)))
    wf = rng.standard_normal((1, 8, 3, 3))
    wm = rng.standard_normal((1, 1, 3, 3))

    def coarse_loss(f, s):
        res = guided_global_attention(f, s, cp)
        return nx.add(_proj(res.features, wf), _proj(res.mask, wm))

    out.append(("guided_global_attention/features",
                grad_check(lambda f: coarse_loss(f, fused), feats, GRAD_EPS)))
    out.append(("guided_global_attention/scores",
                grad_check(lambda s: coarse_loss(feats, s), fused, GRAD_EPS)))

    # windowed sparse attention
    sp = SparseAttnParams.init(rng, channels=8, window_size=3, heads=2, dtype="f64")
    toks = Tensor(rng.standard_normal((4, 9, 8)) * 0.5)
    tmask = Tensor(rng.uniform(0.0, 1.0, size=(4, 9)))
    wt = rng.standard_normal((4, 9, 8))
    out.append(("sparse_window_attention/tokens",
                grad_check(lambda x: _proj(sparse_window_attention(x, tmask, sp), wt),
                           toks, GRAD_EPS)))
    out.append(("sparse_window_attention/mask",
                grad_check(lambda m: _proj(sparse_window_attention(toks, m, sp), wt),
                           tmask, GRAD_EPS)))

    # whole fine stage on a 4x4 -> 8x8 -> 16x16 geometry
    fp = FineParams.init(rng, channels=8, window_size=3, heads=2, dtype="f64")
    cfeat = Tensor(rng.standard_normal((1, 8, 4, 4)) * 0.5)
    cmask = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)))
    wo = rng.standard_normal((1, 1, 16, 16))

    def fine_loss(f, m):
        res = fine_pass(CoarseOutput(features=f, mask=m), fp, WindowSpec(3),
                        out_hw=(16, 16), scale=2)
        return _proj(res.logits, wo)

    out.append(("fine_pass/features",
                grad_check(lambda f: fine_loss(f, cmask), cfeat, GRAD_EPS)))
    out.append(("fine_pass/mask",
                grad_check(lambda m: fine_loss(cfeat, m), cmask, GRAD_EPS)))

    # losses
    pred = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))
    target = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))
    out.append(("focal_loss/pred",
                grad_check(lambda p: focal_loss(p, target), pred, GRAD_EPS)))
    out.append(("bce_dice_loss/pred",
                grad_check(lambda p: bce_dice_loss(p, target), pred, GRAD_EPS)))

    logits = Tensor(rng.standard_normal((2, 3, 4, 4)))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    labels.ravel()[rng.choice(labels.size, 3, replace=False)] = 255
    out.append(("ce_label_smoothing/logits",
                grad_check(lambda z: ce_label_smoothing(z, labels), logits, GRAD_EPS)))

    pred_b = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 4, 4)))
    target_b = Tensor((rng.random((2, 1, 4, 4)) > 0.5).astype(np.float64))

    def combined(p):
        return total_loss(focal_loss(pred, target), bce_dice_loss(p, target_b),
                          focal_loss(p, target_b), LossWeights())

    out.append(("total_loss/pred", grad_check(combined, pred_b, GRAD_EPS)))
    return out


def _roundtrip_invariants(rng, trips: int) -> tuple[int, int]:
    """Partition/reverse and cyclic shift round trips; returns failure counts."""
    part_bad = 0
    shift_bad = 0
    for i in range(trips):
        ws = int(rng.integers(2, 5))
        h = int(rng.integers(ws, 3 * ws + 1))
        wdt = int(rng.integers(ws, 3 * ws + 1))
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        dt = np.float32 if i % 2 else np.float64
        x = rng.standard_normal((b, h, wdt, c)).astype(dt)
        t = Tensor(x)
        win, rec = window_partition(t, WindowSpec(ws))
        back = window_reverse(win, rec)
        if back.data.dtype != x.dtype or not np.array_equal(back.data, x):
            part_bad += 1
        s = int(rng.integers(1, min(h, wdt)))
        und = cyclic_shift(cyclic_shift(t, s), -s)
        if not np.array_equal(und.data, x):
            shift_bad += 1
    return part_bad, shift_bad


def _softmax_invariants(rng, trials: int = 200) -> tuple[float, bool]:
    """Worst row-sum error (f64) and whether masked rows behaved."""
    worst = 0.0
    masked_ok = True
    for _ in range(trials):
        n = int(rng.integers(2, 17))
        m = int(rng.integers(1, 7))
        x = Tensor(rng.standard_normal((m, n)) * rng.uniform(0.5, 20.0))
        s = nx.softmax_lastdim(x).data.sum(axis=-1)
        worst = max(worst, float(np.abs(s - 1.0).max()))
        valid = rng.random((m, n)) > 0.4
        sm = nx.softmax_lastdim(x, valid=valid).data
        rows_any = valid.any(axis=-1)
        sums = sm.sum(axis=-1)
        if rows_any.any():
            worst = max(worst, float(np.abs(sums[rows_any] - 1.0).max()))
        if not np.all(sm[~valid] == 0.0):
            masked_ok = False
        if (~rows_any).any() and not np.all(sums[~rows_any] == 0.0):
            masked_ok = False
    return worst, masked_ok


def _gate_monotonicity(rng, pairs: int) -> int:
    """sigma((s - tau) * lam) must be nondecreasing in s; returns violations."""
    bad = 0
    chunks = 10
    per = max(1, pairs // chunks)
    for _ in range(chunks):
        lam = float(np.exp(rng.uniform(np.log(0.1), np.log(100.0))))
        s = np.sort(rng.uniform(-2.0, 2.0, size=(per, 2)), axis=1)
        tau = Tensor(rng.uniform(0.0, 1.0, size=(per, 1)))
        g = soft_select(Tensor(s), tau, lam).data
        bad += int(np.sum(g[:, 0] > g[:, 1]))
        bad += int(np.sum((g < 0.0) | (g > 1.0)))
    return bad


def _grct_roundtrip() -> bool:
    rng = np.random.default_rng(5)
    ok = True
    with tempfile.TemporaryDirectory() as d:
        for arr in (rng.standard_normal((3, 4, 5)).astype(np.float32),
                    rng.standard_normal((2, 3, 4, 5))):
            p = os.path.join(d, "t.grct")
            write_grct(p, Tensor(arr))
            back = read_grct(p)
            ok &= back.dtype == arr.dtype and np.array_equal(back, arr)
            with open(p, "rb") as f:
                first = f.read()
            write_grct(p, Tensor(arr))
            with open(p, "rb") as f:
                ok &= f.read() == first
    return ok


def _mini_config(seed: int = 11) -> PipelineConfig:
    return PipelineConfig(coarse_h=8, coarse_w=8, fine_scale=2, out_h=64, out_w=64,
                          channels=16, heads=4, window=3, encoder_heads=2,
                          scenario="planted-block", dtype="f32", seed=seed)


def invariant_suite(seed: int = 0, roundtrips: int = 1000,
                    gate_pairs: int = 10_000) -> list[tuple[str, bool, str]]:
    """Structural checks; returns (name, ok, detail) triples."""
    rng = np.random.default_rng(seed)
    res: list[tuple[str, bool, str]] = []

    part_bad, shift_bad = _roundtrip_invariants(rng, roundtrips)
    res.append((f"window partition round trip x{roundtrips}", part_bad == 0,
                f"{part_bad} failures"))
    res.append((f"cyclic shift round trip x{roundtrips}", shift_bad == 0,
                f"{shift_bad} failures"))

    worst, masked_ok = _softmax_invariants(rng)
    res.append(("softmax row sums (f64)", worst <= 1e-9, f"max |sum-1| = {worst:.3e}"))
    res.append(("masked softmax zeros", masked_ok, "masked keys and empty rows exact 0"))

    x = rng.standard_normal((5, 9))
    x[2] = 3.25
    mm = nx.minmax_normalize(Tensor(x)).data
    ok = bool(mm.min() >= 0.0 and mm.max() <= 1.0 and np.all(mm[2] == 0.5))
    res.append(("minmax range and constant rows", ok, "range [0,1], constant -> 0.5"))

    bad = _gate_monotonicity(rng, gate_pairs)
    res.append((f"gate monotonicity x{gate_pairs}", bad == 0, f"{bad} violations"))

    flag = (flops_msa(64, 64, 256) == FLAGSHIP_MSA
            and flops_wmsa(64, 64, 256, 6) == FLAGSHIP_WMSA
            and flops_wssa(64, 64, 256, 6, 0.5) == FLAGSHIP_WSSA)
    res.append(("analytic cost reference values", flag,
                f"{FLAGSHIP_MSA} / {FLAGSHIP_WMSA} / {FLAGSHIP_WSSA}"))

    counted_ok = True
    details = []
    for mech, m, rho in (("msa", None, 1.0), ("wmsa", 3, 1.0), ("wssa", 4, 0.5)):
        rep = cost_report(mech, 12, 12, 8, m=m, rho=rho, swin_convention=True)
        counted_ok &= rep.counted == rep.analytic
        details.append(f"{mech}:{rep.counted}")
    r1 = cost_report("wssa", 12, 12, 8, m=3, rho=1.0, swin_convention=True)
    r2 = cost_report("wmsa", 12, 12, 8, m=3, swin_convention=True)
    counted_ok &= r1.counted == r2.counted and r1.analytic == r2.analytic
    res.append(("counted multiplies match analytic", counted_ok, " ".join(details)))

    res.append(("tensor container round trip", _grct_roundtrip(), "f32/f64, stable bytes"))

    cfg = _mini_config()
    a = run_pipeline(cfg)
    b = run_pipeline(cfg)
    same = (a.fine.logits.data.tobytes() == b.fine.logits.data.tobytes()
            and a.coarse.mask.data.tobytes() == b.coarse.mask.data.tobytes()
            and report_json(a.report) == report_json(b.report))
    res.append(("pipeline determinism", same, "two runs byte-identical"))

    in_range = True
    for t in (a.coarse.mask, a.fine.logits, a.fine.amap):
        d = t.data
        in_range &= bool(d.min() >= 0.0 and d.max() <= 1.0)
    res.append(("masks within [0, 1]", in_range, "coarse, fine, activation map"))
    return res
