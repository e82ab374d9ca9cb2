"""Attention cost accounting and the patch/pixel label redundancy metric.

Closed forms (multiplies, exact integers):

    msa:   4*h*w*C^2 + 2*(h*w)^2*C
    wmsa:  4*h*w*C^2 + 2*M^2*h*w
    wssa:  4*h*w*C^2 + rho*2*M^2*h*w

The window-attention terms above omit the channel factor; passing
swin_convention=True multiplies those terms by C, which is also the shape
an instrumented multiply counter actually observes. measure_attention_cost
runs a real single-head kernel under the counter so the two views can be
reconciled exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numerics as nx
from .fine import WindowSpec, window_partition
from .numerics import OpCounter, Tensor, counting

MECHANISMS = ("msa", "wmsa", "wssa")
MEASURE_TOKEN_LIMIT = 4096


def _check_hwc(h: int, w: int, c: int) -> tuple[int, int, int]:
    h, w, c = int(h), int(w), int(c)
    if h < 1 or w < 1 or c < 1:
        raise ValueError(f"h, w, C must be positive, got {h}, {w}, {c}")
    return h, w, c


def _check_window(h: int, w: int, m) -> int:
    if m is None:
        raise ValueError("window mechanisms need M")
    m = int(m)
    if m < 1:
        raise ValueError(f"M must be positive, got {m}")
    if h % m or w % m:
        raise ValueError(f"h and w must be divisible by M, got {h} x {w} with M = {m}")
    return m


def _check_rho(rho) -> float:
    rho = float(rho)
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must sit in (0, 1], got {rho}")
    return rho


def flops_msa(h: int, w: int, c: int) -> int:
    """Dense self-attention multiplies: 4hwC^2 + 2(hw)^2 C."""
    h, w, c = _check_hwc(h, w, c)
    return 4 * h * w * c * c + 2 * (h * w) ** 2 * c


def flops_wmsa(h: int, w: int, c: int, m: int, swin_convention: bool = False) -> int:
    """Window attention multiplies: 4hwC^2 + 2M^2 hw (times C if requested)."""
    h, w, c = _check_hwc(h, w, c)
    m = int(m)
    if m < 1:
        raise ValueError(f"M must be positive, got {m}")
    attn = 2 * m * m * h * w * (c if swin_convention else 1)
    return 4 * h * w * c * c + attn


def flops_wssa(h: int, w: int, c: int, m: int, rho: float,
               swin_convention: bool = False) -> int | float:
    """Sparse window attention: the W-MSA attention term scaled by rho.

    Exact rational arithmetic; returns an int when rho * 2 M^2 hw (C) is
    integral, else a float.
    """
    h, w, c = _check_hwc(h, w, c)
    m = int(m)
    if m < 1:
        raise ValueError(f"M must be positive, got {m}")
    rho = _check_rho(rho)
    attn = Fraction(rho) * 2 * m * m * h * w * (c if swin_convention else 1)
    total = Fraction(4 * h * w * c * c) + attn
    return int(total) if total.denominator == 1 else float(total)


@dataclass(frozen=True)
class FlopReport:
    """One attention cost row: analytic count, plus counter output when run.

    counted stays None for analytic-only rows (grid too large for the
    measurement cap, or not divisible into windows).
    """

    mechanism: str
    h: int
    w: int
    c: int
    m: int | None
    rho: float
    swin_convention: bool
    analytic: int | float
    counted: int | None = None
    counted_proj: int | None = None
    counted_attn: int | None = None

    @property
    def ratio(self) -> float | None:
        if self.counted is None:
            return None
        return self.counted / self.analytic


def measure_attention_cost(
    mechanism: str,
    h: int,
    w: int,
    c: int,
    m: int | None = None,
    rho: float = 1.0,
    seed: int = 0,
    swin_convention: bool = False,
) -> FlopReport:
    """Run a single-head attention kernel and count its matmul multiplies.

    Multiply totals are head-count independent, so one head suffices. For
    wssa each window attends to the top ceil(rho * M^2) keys picked by a
    seeded random score. Grids are capped at 4096 tokens.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    h, w, c = _check_hwc(h, w, c)
    n = h * w
    if n > MEASURE_TOKEN_LIMIT:
        raise ValueError(f"measurement capped at {MEASURE_TOKEN_LIMIT} tokens, got {n}")
    rho = _check_rho(rho)

    r = np.random.default_rng(seed)
    x = Tensor(r.normal(scale=0.2, size=(1, n, c)))
    wq, wk, wv, wo = (Tensor(r.normal(scale=0.2, size=(c, c))) for _ in range(4))
    proj, attn_ct = OpCounter(), OpCounter()

    with counting(proj):
        q = nx.matmul(x, wq)
        k = nx.matmul(x, wk)
        v = nx.matmul(x, wv)

    if mechanism == "msa":
        with counting(attn_ct):
            logits = nx.matmul(q, nx.transpose(k, (0, 2, 1)))
            attn = nx.softmax_lastdim(nx.mul(logits, 1.0 / math.sqrt(c)))
            mixed = nx.matmul(attn, v)
        analytic = flops_msa(h, w, c)
    else:
        m = _check_window(h, w, m)
        spec = WindowSpec(m)

        def to_windows(z):
            wins, _ = window_partition(nx.reshape(z, (1, h, w, c)), spec)
            return wins

        qw, kw, vw = to_windows(q), to_windows(k), to_windows(v)
        if mechanism == "wssa":
            keep = math.ceil(rho * m * m)
            scores = r.random((qw.shape[0], m * m))
            idx = np.argsort(-scores, axis=1)[:, :keep]
            kw = Tensor(np.take_along_axis(kw.data, idx[:, :, None], axis=1))
            vw = Tensor(np.take_along_axis(vw.data, idx[:, :, None], axis=1))
            analytic = flops_wssa(h, w, c, m, rho, swin_convention)
        else:
            analytic = flops_wmsa(h, w, c, m, swin_convention)
        with counting(attn_ct):
            logits = nx.matmul(qw, nx.transpose(kw, (0, 2, 1)))
            attn = nx.softmax_lastdim(nx.mul(logits, 1.0 / math.sqrt(c)))
            mixed = nx.matmul(attn, vw)
        mixed = nx.reshape(mixed, (1, n, c))

    with counting(proj):
        nx.matmul(mixed, wo)

    return FlopReport(
        mechanism=mechanism, h=h, w=w, c=c,
        m=None if mechanism == "msa" else m,
        rho=rho if mechanism == "wssa" else 1.0,
        swin_convention=swin_convention,
        analytic=analytic,
        counted=proj.count + attn_ct.count,
        counted_proj=proj.count,
        counted_attn=attn_ct.count,
    )


def analytic_flops(mechanism: str, h: int, w: int, c: int, m: int | None = None,
                   rho: float = 1.0, swin_convention: bool = False) -> int | float:
    """Closed-form count for one mechanism; no divisibility requirement."""
    if mechanism == "msa":
        return flops_msa(h, w, c)
    if mechanism == "wmsa":
        return flops_wmsa(h, w, c, m, swin_convention)
    if mechanism == "wssa":
        return flops_wssa(h, w, c, m, rho, swin_convention)
    raise ValueError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")


def can_measure(mechanism: str, h: int, w: int, m: int | None = None) -> bool:
    """True when the instrumented kernel can run this configuration."""
    if mechanism not in MECHANISMS:
        return False
    if h * w > MEASURE_TOKEN_LIMIT:
        return False
    if mechanism != "msa":
        if m is None or m < 1 or h % m or w % m:
            return False
    return True


def cost_report(mechanism: str, h: int, w: int, c: int, m: int | None = None,
                rho: float = 1.0, seed: int = 0, swin_convention: bool = False,
                measure: bool = True) -> FlopReport:
    """measure_attention_cost when feasible, otherwise an analytic-only row."""
    if measure and can_measure(mechanism, h, w, m):
        return measure_attention_cost(mechanism, h, w, c, m, rho, seed, swin_convention)
    if mechanism not in MECHANISMS:
        raise ValueError(f"mechanism must be one of {MECHANISMS}, got {mechanism!r}")
    if mechanism == "wssa":
        rho = _check_rho(rho)
    return FlopReport(
        mechanism=mechanism, h=h, w=w, c=c,
        m=None if mechanism == "msa" else int(m),
        rho=rho if mechanism == "wssa" else 1.0,
        swin_convention=swin_convention,
        analytic=analytic_flops(mechanism, h, w, c, m, rho, swin_convention),
    )


def _fmt_count(v) -> str:
    if isinstance(v, float) and not v.is_integer():
        return f"{v:,.1f}"
    return f"{int(v):,}"


def report_table(reports: list[FlopReport]) -> str:
    """Aligned text table with thousands separators."""
    header = ["mechanism", "h", "w", "C", "M", "rho", "analytic", "counted", "ratio"]
    rows = [header]
    for rep in reports:
        rows.append([
            rep.mechanism + ("*" if rep.swin_convention else ""),
            str(rep.h), str(rep.w), str(rep.c),
            "-" if rep.m is None else str(rep.m),
            f"{rep.rho:g}",
            _fmt_count(rep.analytic),
            "-" if rep.counted is None else _fmt_count(rep.counted),
            "-" if rep.ratio is None else f"{rep.ratio:.4g}",
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.rjust(wd) for cell, wd in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * wd for wd in widths))
    return "\n".join(lines)


def report_csv(reports: list[FlopReport]) -> str:
    """CSV with header mechanism,h,w,C,M,rho,analytic,counted,ratio."""
    lines = ["mechanism,h,w,C,M,rho,analytic,counted,ratio"]
    for rep in reports:
        m = "" if rep.m is None else str(rep.m)
        analytic = repr(rep.analytic) if isinstance(rep.analytic, float) else str(rep.analytic)
        counted = "" if rep.counted is None else str(rep.counted)
        ratio = "" if rep.ratio is None else repr(rep.ratio)
        lines.append(
            f"{rep.mechanism},{rep.h},{rep.w},{rep.c},{m},{rep.rho!r},"
            f"{analytic},{counted},{ratio}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# redundancy


def _entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def redundancy_metric(patch_labels, pixel_labels) -> float:
    """1 - H(patch labels) / H(pixel labels), clamped to [0, 1].

    Zero pixel entropy (a single label everywhere) returns 0. Any shapes
    are accepted; only the label multisets matter.
    """
    patch = np.asarray(patch_labels).ravel()
    pixel = np.asarray(pixel_labels).ravel()
    if patch.size == 0 or pixel.size == 0:
        raise ValueError("redundancy_metric needs non-empty label arrays")
    h_pixel = _entropy(pixel)
    if h_pixel == 0.0:
        return 0.0
    r = 1.0 - _entropy(patch) / h_pixel
    return float(min(1.0, max(0.0, r)))
