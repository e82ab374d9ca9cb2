"""Fine stage: upsample, refine, and re-gate masks with windowed attention.

Tokens live in B x H x W x C layout here. Window partitioning pads the
bottom/right edge to a multiple of the window size; padded cells never
receive attention weight and are cropped again on reverse. The coarse
mask guides attention by scaling keys and values with (1 + alpha * m) and,
optionally, by damping pre-softmax logits with the pairwise product
clip(m_i * m_j, 0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .coarse import CoarseOutput, ThresholdSelector
from .numerics import ShapeError, Tensor

PAIRWISE_MODES = ("outer", "off")


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry: side length and cyclic shift offset."""

    window_size: int = 6
    shift: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError(f"window size must be >= 1, got {self.window_size}")
        if not 0 <= self.shift < self.window_size:
            raise ValueError(f"shift must sit in [0, {self.window_size}), got {self.shift}")


@dataclass
class PadRecord:
    """Bookkeeping from window_partition needed to undo it."""

    batch: int
    height: int
    width: int
    padded_h: int
    padded_w: int
    window_size: int
    perm: np.ndarray          # (num_windows * ws^2,) flat gather order
    window_valid: np.ndarray  # (num_windows, ws^2) True for real cells

    @property
    def num_windows(self) -> int:
        return (self.padded_h // self.window_size) * (self.padded_w // self.window_size)


def _partition_perm(h: int, w: int, hp: int, wp: int, ws: int):
    nwh, nww = hp // ws, wp // ws
    wy = np.arange(nwh)
    wx = np.arange(nww)
    iy = np.arange(ws)
    ix = np.arange(ws)
    rows = wy[:, None] * ws + iy[None, :]                    # (nwh, ws)
    cols = wx[:, None] * ws + ix[None, :]                    # (nww, ws)
    perm = rows[:, None, :, None] * wp + cols[None, :, None, :]
    perm = perm.reshape(-1)
    ys, xs = np.divmod(perm, wp)
    valid = ((ys < h) & (xs < w)).reshape(nwh * nww, ws * ws)
    return perm, valid


def window_partition(tokens: Tensor, spec: WindowSpec) -> tuple[Tensor, PadRecord]:
    """Split B x H x W x C tokens into (B * nW) x ws^2 x C windows.

    The grid is zero-padded on the bottom/right to a window-size multiple;
    the returned record marks which window cells are real.
    """
    if tokens.ndim != 4:
        raise ShapeError(f"window_partition expects B x H x W x C, got {tokens.shape}")
    b, h, w, c = tokens.shape
    ws = spec.window_size
    hp = ((h + ws - 1) // ws) * ws
    wp = ((w + ws - 1) // ws) * ws
    x = tokens
    if (hp, wp) != (h, w):
        x = nx.pad(x, ((0, 0), (0, hp - h), (0, wp - w), (0, 0)))
    perm, valid = _partition_perm(h, w, hp, wp, ws)
    flat = nx.reshape(x, (b, hp * wp, c))
    gathered = nx.gather(flat, 1, perm)
    nw = valid.shape[0]
    windows = nx.reshape(gathered, (b * nw, ws * ws, c))
    rec = PadRecord(b, h, w, hp, wp, ws, perm, valid)
    return windows, rec


def window_reverse(windows: Tensor, rec: PadRecord) -> Tensor:
    """Undo window_partition, cropping any padding."""
    ws = rec.window_size
    nw = rec.num_windows
    if windows.ndim != 3 or windows.shape[0] != rec.batch * nw or windows.shape[1] != ws * ws:
        raise ShapeError(
            f"windows shape {windows.shape} does not match record "
            f"({rec.batch} * {nw}, {ws * ws}, C)"
        )
    c = windows.shape[2]
    flat = nx.reshape(windows, (rec.batch, nw * ws * ws, c))
    inv = np.argsort(rec.perm)
    restored = nx.gather(flat, 1, inv)
    grid = nx.reshape(restored, (rec.batch, rec.padded_h, rec.padded_w, c))
    if (rec.padded_h, rec.padded_w) != (rec.height, rec.width):
        grid = nx.narrow(nx.narrow(grid, 1, 0, rec.height), 2, 0, rec.width)
    return grid


def cyclic_shift(tokens: Tensor, shift: int) -> Tensor:
    """Roll both spatial axes of B x H x W x C tokens by `shift`."""
    if tokens.ndim != 4:
        raise ShapeError(f"cyclic_shift expects B x H x W x C, got {tokens.shape}")
    shift = int(shift)
    if abs(shift) >= min(tokens.shape[1], tokens.shape[2]):
        raise ValueError(f"|shift| {abs(shift)} must stay below min(H, W) of {tokens.shape}")
    if shift == 0:
        return tokens
    return nx.roll(tokens, (shift, shift), (1, 2))


def relative_bias_index(window_size: int) -> np.ndarray:
    """ws^2 x ws^2 lookup into the (2ws-1)^2 relative position bias table."""
    ws = int(window_size)
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij"))
    coords = coords.reshape(2, -1)                            # (2, n)
    rel = coords[:, :, None] - coords[:, None, :]             # (2, n, n)
    rel = rel + (ws - 1)
    return rel[0] * (2 * ws - 1) + rel[1]


@dataclass
class SparseAttnParams:
    """Window attention weights plus the guidance scaling knob.

    bias_table has (2ws-1)^2 rows, one column per head; kv_scale is the
    alpha in the (1 + alpha * m) key/value modulation; pairwise chooses
    whether clip(m_i * m_j, 0, 1) damps the pre-softmax logits ("outer")
    or not ("off").
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    bias_table: Tensor
    kv_scale: Tensor
    heads: int = 8
    pairwise: str = "outer"

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be {c} x {c}")
        if c % self.heads != 0:
            raise ShapeError(f"channels {c} not divisible by heads {self.heads}")
        rows, cols = self.bias_table.shape
        side = int(round(np.sqrt(rows)))
        if side * side != rows or side % 2 != 1:
            raise ShapeError(f"bias table rows {rows} are not an odd square")
        if cols != self.heads:
            raise ShapeError(f"bias table has {cols} columns for {self.heads} heads")
        if self.pairwise not in PAIRWISE_MODES:
            raise ValueError(f"pairwise mode must be one of {PAIRWISE_MODES}")
        self.bias_table.check_finite("bias table")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def window_size(self) -> int:
        return (int(round(np.sqrt(self.bias_table.shape[0]))) + 1) // 2

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        window_size: int,
        heads: int = 8,
        dtype: str = "f64",
        pairwise: str = "outer",
    ) -> "SparseAttnParams":
        u = lambda *s: Tensor(rng.uniform(-0.02, 0.02, size=s), dtype=dtype)
        r = (2 * window_size - 1) ** 2
        return cls(
            wq=u(channels, channels),
            wk=u(channels, channels),
            wv=u(channels, channels),
            bias_table=Tensor(np.zeros((r, heads)), dtype=dtype),
            kv_scale=Tensor(np.ones(1), dtype=dtype),
            heads=heads,
            pairwise=pairwise,
        )

    def params(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.bias_table, self.kv_scale]


def _bias_matrix(params: SparseAttnParams, n: int) -> Tensor:
    ws = params.window_size
    if ws * ws != n:
        raise ShapeError(f"bias table is for {ws * ws} tokens per window, got {n}")
    idx = relative_bias_index(ws).reshape(-1)
    flat = nx.gather(params.bias_table, 0, idx)            # (n^2, heads)
    return nx.transpose(nx.reshape(flat, (n, n, params.heads)), (2, 0, 1))


def sparse_window_attention(
    window_tokens: Tensor,
    token_mask: Tensor,
    params: SparseAttnParams,
    valid: np.ndarray | None = None,
    return_attn: bool = False,
):
    """Mask-guided attention inside each window.

    window_tokens: Nw x n x C, token_mask: Nw x n guidance in [0, 1],
    valid: optional Nw x n bools marking real (non-padded) cells. Padded
    cells get exactly zero attention weight. Returns Nw x n x C, plus the
    Nw x heads x n x n attention weights when return_attn is set.
    """
    if window_tokens.ndim != 3:
        raise ShapeError(f"window tokens must be Nw x n x C, got {window_tokens.shape}")
    nw, n, c = window_tokens.shape
    if token_mask.shape != (nw, n):
        raise ShapeError(f"token mask {token_mask.shape} does not match windows {(nw, n)}")
    if c != params.channels:
        raise ShapeError(f"tokens have {c} channels, params expect {params.channels}")
    heads = params.heads
    d = c // heads

    scale = nx.add(nx.mul(token_mask, params.kv_scale), 1.0)
    scale3 = nx.reshape(scale, (nw, n, 1))
    q = nx.matmul(window_tokens, params.wq)
    k = nx.mul(nx.matmul(window_tokens, params.wk), scale3)
    v = nx.mul(nx.matmul(window_tokens, params.wv), scale3)

    def split(z):
        return nx.transpose(nx.reshape(z, (nw, n, heads, d)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    logits = nx.mul(nx.matmul(qh, nx.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    logits = nx.add(logits, _bias_matrix(params, n))
    if params.pairwise == "outer":
        pi = nx.reshape(token_mask, (nw, 1, n, 1))
        pj = nx.reshape(token_mask, (nw, 1, 1, n))
        logits = nx.mul(logits, nx.clip(nx.mul(pi, pj), 0.0, 1.0))

    key_valid = None
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != (nw, n):
            raise ShapeError(f"valid mask {valid.shape} does not match windows {(nw, n)}")
        key_valid = valid.reshape(nw, 1, 1, n)
    attn = nx.softmax_lastdim(logits, valid=key_valid)
    merged = nx.reshape(nx.transpose(nx.matmul(attn, vh), (0, 2, 1, 3)), (nw, n, c))
    if return_attn:
        return merged, attn
    return merged


@dataclass
class BlockParams:
    """Refined window attention block: attention plus LayerNorm-MLP tail."""

    attn: SparseAttnParams
    ln_gamma: Tensor
    ln_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    MLP_RATIO = 4

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        window_size: int,
        heads: int = 8,
        dtype: str = "f64",
        pairwise: str = "outer",
    ) -> "BlockParams":
        c, hid = channels, cls.MLP_RATIO * channels
        return cls(
            attn=SparseAttnParams.init(rng, c, window_size, heads, dtype, pairwise),
            ln_gamma=Tensor(np.ones(c), dtype=dtype),
            ln_beta=Tensor(np.zeros(c), dtype=dtype),
            mlp_w1=Tensor(rng.uniform(-0.02, 0.02, size=(c, hid)), dtype=dtype),
            mlp_b1=Tensor(np.zeros(hid), dtype=dtype),
            # zero final projection keeps the untrained block near-identity
            mlp_w2=Tensor(np.zeros((hid, c)), dtype=dtype),
            mlp_b2=Tensor(np.zeros(c), dtype=dtype),
        )

    def params(self) -> list[Tensor]:
        return self.attn.params() + [self.ln_gamma, self.ln_beta,
                                     self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]


def _smooth_gelu(x: Tensor) -> Tensor:
    return nx.mul(x, nx.sigmoid(nx.mul(x, 1.702)))


def _mlp(x: Tensor, p: BlockParams) -> Tensor:
    h = _smooth_gelu(nx.add(nx.matmul(x, p.mlp_w1), p.mlp_b1))
    return nx.add(nx.matmul(h, p.mlp_w2), p.mlp_b2)


def _as_mask_grid(sparse_mask: Tensor, b: int, h: int, w: int) -> Tensor:
    """Accept B x H x W or B x 1 x H x W guidance, return B x H x W x 1."""
    if sparse_mask.shape == (b, 1, h, w):
        return nx.transpose(sparse_mask, (0, 2, 3, 1))
    if sparse_mask.shape == (b, h, w):
        return nx.reshape(sparse_mask, (b, h, w, 1))
    raise ShapeError(f"guidance mask {sparse_mask.shape} does not fit grid {(b, h, w)}")


def refined_swin_block(tokens: Tensor, sparse_mask: Tensor, params: BlockParams,
                       spec: WindowSpec) -> Tensor:
    """Two windowed attention passes (unshifted, then shifted by ws // 2).

    Both passes share one parameter set; each ends with x = MLP(LN(x)) + x.
    """
    if tokens.ndim != 4:
        raise ShapeError(f"tokens must be B x H x W x C, got {tokens.shape}")
    b, h, w, c = tokens.shape
    mask = _as_mask_grid(sparse_mask, b, h, w)
    ws = spec.window_size

    x = tokens
    for shift in (0, ws // 2):
        if shift >= min(h, w):
            continue  # grid too small to shift, skip the second pass
        xs = cyclic_shift(x, -shift) if shift else x
        ms = cyclic_shift(mask, -shift) if shift else mask
        wins, rec = window_partition(xs, WindowSpec(ws, 0))
        mwin, _ = window_partition(ms, WindowSpec(ws, 0))
        mwin = nx.reshape(mwin, (wins.shape[0], ws * ws))
        valid = np.tile(rec.window_valid, (b, 1))
        attended = sparse_window_attention(wins, mwin, params.attn, valid=valid)
        y = window_reverse(attended, rec)
        if shift:
            y = cyclic_shift(y, shift)
        x = nx.add(_mlp(nx.layer_norm(y, params.ln_gamma, params.ln_beta), params), y)
    return x


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 same-padding convolution over B x C x H x W, weight (3, 3, Cin, Cout)."""
    if x.ndim != 4:
        raise ShapeError(f"conv3x3 expects B x C x H x W, got {x.shape}")
    b, c, h, w = x.shape
    if weight.shape[:2] != (3, 3) or weight.shape[2] != c:
        raise ShapeError(f"weight {weight.shape} does not fit {c} input channels")
    cout = weight.shape[3]
    padded = nx.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = None
    for ky in range(3):
        for kx in range(3):
            patch = nx.narrow(nx.narrow(padded, 2, ky, h), 3, kx, w)
            tok = nx.reshape(nx.transpose(patch, (0, 2, 3, 1)), (b, h * w, c))
            wk = nx.reshape(nx.narrow(nx.narrow(weight, 0, ky, 1), 1, kx, 1), (c, cout))
            term = nx.matmul(tok, wk)
            acc = term if acc is None else nx.add(acc, term)
    out = nx.add(acc, bias)
    return nx.transpose(nx.reshape(out, (b, h, w, cout)), (0, 3, 1, 2))


def identity_conv_weight(channels: int, dtype: str = "f64") -> Tensor:
    """3x3 kernel whose center tap is the identity, all else zero."""
    w = np.zeros((3, 3, channels, channels))
    w[1, 1] = np.eye(channels)
    return Tensor(w, dtype=dtype)


@dataclass
class FineParams:
    """Fine stage weights: refinement conv, attention block, threshold head."""

    conv_w: Tensor
    conv_b: Tensor
    block: BlockParams
    selector: ThresholdSelector

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        window_size: int,
        heads: int = 8,
        dtype: str = "f64",
        temperature: float = 10.0,
        pairwise: str = "outer",
    ) -> "FineParams":
        return cls(
            conv_w=identity_conv_weight(channels, dtype=dtype),
            conv_b=Tensor(np.zeros(channels), dtype=dtype),
            block=BlockParams.init(rng, channels, window_size, heads, dtype, pairwise),
            selector=ThresholdSelector.init(rng, dtype=dtype, temperature=temperature),
        )

    def params(self) -> list[Tensor]:
        return [self.conv_w, self.conv_b] + self.block.params() + self.selector.params()


@dataclass
class FineOutput:
    """Fine stage results: output-resolution mask logits plus diagnostics."""

    logits: Tensor            # B x 1 x out_h x out_w, values in (0, 1)
    tau: Tensor               # B x 1
    amap: Tensor              # B x 1 x Ht x Wt normalized activation map


def fine_pass(
    coarse: CoarseOutput,
    params: FineParams,
    spec: WindowSpec,
    out_hw: tuple[int, int],
    scale: int = 4,
) -> FineOutput:
    """Upsample coarse outputs, refine with guided window attention, re-gate.

    coarse.features: B x C x H x W and coarse.mask: B x 1 x H x W are both
    upsampled by `scale`; the activation norm of the refined tokens is
    normalized, thresholded by the selector, and resized to out_hw.
    """
    scale = int(scale)
    if scale < 1:
        raise ValueError(f"fine scale must be >= 1, got {scale}")
    features, mask = coarse.features, coarse.mask
    if features.ndim != 4 or mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"bad coarse shapes {features.shape} / {mask.shape}")
    if mask.shape[2:] != features.shape[2:] or mask.shape[0] != features.shape[0]:
        raise ShapeError(f"mask grid {mask.shape} does not match features {features.shape}")
    out_h, out_w = int(out_hw[0]), int(out_hw[1])

    f_up = nx.bilinear_upsample(features, scale)
    m_up = nx.bilinear_upsample(mask, scale)
    f_ref = conv3x3(f_up, params.conv_w, params.conv_b)
    tokens = nx.transpose(f_ref, (0, 2, 3, 1))
    refined = refined_swin_block(tokens, m_up, params.block, spec)

    b, ht, wt, _ = refined.shape
    act = nx.l2_norm(refined, axis=-1)
    act = nx.minmax_normalize(act, per_sample=True)
    tau = params.selector(nx.reshape(act, (b, ht * wt)))
    sharp = params.selector.temperature
    gate = nx.sigmoid(nx.mul(nx.sub(act, nx.reshape(tau, (b, 1, 1))), sharp))
    logits = nx.bilinear_resize(nx.reshape(gate, (b, 1, ht, wt)), out_h, out_w)
    return FineOutput(logits=logits, tau=tau, amap=nx.reshape(act, (b, 1, ht, wt)))
