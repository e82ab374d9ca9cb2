"""Coarse stage: fuse class-token attention into patch scores, gate, refresh.

The stage takes encoder features (B x C x H x W) plus a stack of per-layer
attention maps, turns the class-token rows into normalized patch scores,
fuses them with learned layer weights, gates the scores through a soft
threshold, and runs guided global attention where the gated scores weight
the keys and values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

LAYER_CONFIGS = {
    "A": (0, 3, 6, 9),
    "B": (1, 4, 7, 10),
    "C": (1, 4, 8, 11),
    "D": (2, 5, 8, 11),
}
DEFAULT_LAYER_IDS = LAYER_CONFIGS["C"]


@dataclass
class AttentionStack:
    """Per-layer encoder attention maps, each B x heads x T x T.

    T counts the class token plus N patch tokens; cls_index says which
    row/column is the class token. layer_ids optionally records which
    encoder depths the stored layers came from (bookkeeping only).
    """

    layers: list[Tensor]
    cls_index: int = 0
    layer_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("attention stack needs at least one layer")
        ref = self.layers[0].shape
        for i, layer in enumerate(self.layers):
            if layer.ndim != 4 or layer.shape[-1] != layer.shape[-2]:
                raise ShapeError(f"layer {i} must be B x heads x T x T, got {layer.shape}")
            if layer.shape[0] != ref[0] or layer.shape[-1] != ref[-1]:
                raise ShapeError(f"layer {i} shape {layer.shape} disagrees with layer 0 {ref}")
        if not 0 <= self.cls_index < ref[-1]:
            raise ShapeError(f"cls_index {self.cls_index} out of range for {ref[-1]} tokens")
        if self.layer_ids is not None and len(self.layer_ids) != len(self.layers):
            raise ShapeError("layer_ids length disagrees with the number of layers")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_tokens(self) -> int:
        return self.layers[0].shape[-1]

    @property
    def num_patches(self) -> int:
        return self.num_tokens - 1

    def validate(self, atol: float = 1e-5) -> list[str]:
        """Warn (and return messages) for rows that are not row-stochastic."""
        messages = []
        for i, layer in enumerate(self.layers):
            sums = layer.data.sum(axis=-1, dtype=np.float64)
            worst = float(np.max(np.abs(sums - 1.0)))
            if worst > atol:
                messages.append(f"layer {i} rows deviate from sum 1 by {worst:.3g}")
        side = np.sqrt(self.num_patches)
        if side != int(side):
            messages.append(f"patch count {self.num_patches} is not a perfect square")
        for m in messages:
            warnings.warn(m, stacklevel=2)
        return messages


@dataclass
class LayerWeights:
    """Learnable fusion weights, stored as logits and read out by softmax."""

    logits: Tensor

    def weights(self) -> Tensor:
        if self.logits.ndim != 1:
            raise ShapeError(f"layer weight logits must be 1-D, got {self.logits.shape}")
        return nx.softmax_lastdim(self.logits)


@dataclass
class ThresholdSelector:
    """Tiny MLP mapping per-sample score stats [mean, std, max] to a threshold.

    Hidden layer of width 8 with tanh, sigmoid output, so the threshold
    lands in (0, 1). Weights start near zero, which pins the initial
    threshold at about 0.5.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    temperature: float = 10.0

    HIDDEN = 8

    @classmethod
    def init(cls, rng: np.random.Generator, dtype: str = "f64", temperature: float = 10.0) -> "ThresholdSelector":
        h = cls.HIDDEN
        return cls(
            w1=Tensor(rng.uniform(-0.02, 0.02, size=(3, h)), dtype=dtype),
            b1=Tensor(np.zeros(h), dtype=dtype),
            w2=Tensor(rng.uniform(-0.02, 0.02, size=(h, 1)), dtype=dtype),
            b2=Tensor(np.zeros(1), dtype=dtype),
            temperature=float(temperature),
        )

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, scores: Tensor) -> Tensor:
        """scores: B x N in [0, 1]; returns thresholds B x 1 in (0, 1)."""
        if scores.ndim != 2:
            raise ShapeError(f"selector expects B x N scores, got {scores.shape}")
        mean = nx.reduce_mean(scores, axis=1, keepdims=True)
        centered = nx.sub(scores, mean)
        # centered second moment, never negative, so sqrt stays real
        var = nx.reduce_mean(nx.mul(centered, centered), axis=1, keepdims=True)
        std = nx.sqrt(var)
        mx = nx.reduce_max(scores, axis=1, keepdims=True)
        stats = nx.concat([mean, std, mx], axis=1)
        hidden = nx.tanh(nx.add(nx.matmul(stats, self.w1), self.b1))
        return nx.sigmoid(nx.add(nx.matmul(hidden, self.w2), self.b2))


def extract_cls_attention(stack: AttentionStack, layer: int) -> Tensor:
    """Class-token row of one layer: head-mean, cls column dropped, minmax to [0, 1].

    Returns B x N patch scores for N = T - 1.
    """
    if not 0 <= layer < stack.num_layers:
        raise ShapeError(f"layer {layer} out of range for stack of {stack.num_layers}")
    a = stack.layers[layer]
    b, heads, t, _ = a.shape
    cls = stack.cls_index
    row = nx.reshape(nx.narrow(a, 2, cls, 1), (b, heads, t))
    keep = np.array([i for i in range(t) if i != cls], dtype=np.int64)
    row = nx.gather(row, 2, keep)
    mean = nx.reduce_mean(row, axis=1)
    return nx.minmax_normalize(mean, per_sample=True)


def fuse_layers(scores: list[Tensor], weights: LayerWeights) -> Tensor:
    """Convex combination of per-layer scores with softmaxed weights."""
    w = weights.weights()
    if len(scores) != w.shape[0]:
        raise ShapeError(f"{len(scores)} score maps vs {w.shape[0]} layer weights")
    out = None
    for i, s in enumerate(scores):
        if s.shape != scores[0].shape:
            raise ShapeError(f"score map {i} shape {s.shape} disagrees with {scores[0].shape}")
        term = nx.mul(s, nx.narrow(w, 0, i, 1))
        out = term if out is None else nx.add(out, term)
    return out


def soft_select(scores: Tensor, tau: Tensor, lam: float) -> Tensor:
    """Soft gate sigmoid((scores - tau) * lam); lam must be positive."""
    lam = float(lam)
    if lam <= 0:
        raise ValueError(f"gate sharpness must be positive, got {lam}")
    tau = nx.as_tensor(tau, like=scores)
    return nx.sigmoid(nx.mul(nx.sub(scores, tau), lam))


def expand_layer_weights(weights: Tensor, n: int, mode: str = "interp") -> Tensor:
    """Stretch L fusion weights to N token positions.

    interp: linear interpolation of the L values placed evenly on [0, 1].
    ones: constant 1, which disables the modulation.
    """
    if mode == "ones":
        return Tensor(np.ones(n, dtype=weights.data.dtype))
    if mode != "interp":
        raise ValueError(f"unknown expansion mode {mode!r}")
    L = weights.shape[0]
    if L == 1 or n == 1:
        idx = np.zeros(n, dtype=np.int64)
        return nx.gather(weights, 0, idx)
    pos = np.linspace(0.0, L - 1.0, n)
    i0 = np.minimum(np.floor(pos).astype(np.int64), L - 2)
    frac = (pos - i0).astype(weights.data.dtype)
    left = nx.gather(weights, 0, i0)
    right = nx.gather(weights, 0, i0 + 1)
    return nx.add(left, nx.mul(nx.sub(right, left), Tensor(frac)))


@dataclass
class CoarseParams:
    """Weights for the coarse stage attention refresh."""

    layer_weights: LayerWeights
    selector: ThresholdSelector
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    heads: int = 8
    alpha_expand: str = "interp"

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be {c} x {c}")
        if self.fuse_w.shape != (2 * c, c):
            raise ShapeError(f"fuse_w must be {2 * c} x {c}, got {self.fuse_w.shape}")
        if c % self.heads != 0:
            raise ShapeError(f"channels {c} not divisible by heads {self.heads}")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        channels: int,
        num_layers: int,
        heads: int = 8,
        dtype: str = "f64",
        temperature: float = 10.0,
        alpha_expand: str = "interp",
    ) -> "CoarseParams":
        c = channels
        u = lambda *s: Tensor(rng.uniform(-0.02, 0.02, size=s), dtype=dtype)
        zeros = lambda *s: Tensor(np.zeros(s), dtype=dtype)
        fuse = np.zeros((2 * c, c))
        fuse[:c] = np.eye(c)  # untrained fusion passes the input features through
        return cls(
            layer_weights=LayerWeights(zeros(num_layers)),
            selector=ThresholdSelector.init(rng, dtype=dtype, temperature=temperature),
            wq=u(c, c), bq=zeros(c),
            wk=u(c, c), bk=zeros(c),
            wv=u(c, c), bv=zeros(c),
            wo=u(c, c), bo=zeros(c),
            fuse_w=Tensor(fuse, dtype=dtype),
            fuse_b=zeros(c),
            heads=heads,
            alpha_expand=alpha_expand,
        )

    def params(self) -> list[Tensor]:
        own = [self.layer_weights.logits, self.wq, self.bq, self.wk, self.bk,
               self.wv, self.bv, self.wo, self.bo, self.fuse_w, self.fuse_b]
        return own + self.selector.params()


@dataclass
class CoarseOutput:
    """Coarse stage results: refreshed features, mask, threshold, fused scores."""

    features: Tensor          # B x C x H x W
    mask: Tensor              # B x 1 x H x W, values in (0, 1)
    tau: Tensor | None = None          # B x 1
    fused_scores: Tensor | None = None  # B x N


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _mha(q_in: Tensor, kv_in: Tensor, p: CoarseParams) -> Tensor:
    b, n, c = q_in.shape
    d = c // p.heads
    q = _split_heads(nx.add(nx.matmul(q_in, p.wq), p.bq), p.heads)
    k = _split_heads(nx.add(nx.matmul(kv_in, p.wk), p.bk), p.heads)
    v = _split_heads(nx.add(nx.matmul(kv_in, p.wv), p.bv), p.heads)
    logits = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    attn = nx.softmax_lastdim(logits)
    out = _merge_heads(nx.matmul(attn, v))
    return nx.add(nx.matmul(out, p.wo), p.bo)


def guided_global_attention(features: Tensor, fused: Tensor, params: CoarseParams) -> CoarseOutput:
    """Gate the fused scores and refresh features with score-weighted attention.

    features: B x C x H x W, fused: B x N with N = H * W. The gated scores
    scale keys and values, queries stay ungated, and a 1x1 fusion mixes the
    attention output back into the input features.
    """
    if features.ndim != 4:
        raise ShapeError(f"features must be B x C x H x W, got {features.shape}")
    b, c, h, w = features.shape
    n = h * w
    if fused.shape != (b, n):
        raise ShapeError(f"fused scores must be {b} x {n}, got {fused.shape}")
    if c != params.channels:
        raise ShapeError(f"features have {c} channels, params expect {params.channels}")

    x = nx.reshape(nx.transpose(features, (0, 2, 3, 1)), (b, n, c))
    tau = params.selector(fused)
    gate = soft_select(fused, tau, params.selector.temperature)
    alpha = expand_layer_weights(params.layer_weights.weights(), n, params.alpha_expand)
    wsoft = nx.mul(gate, nx.reshape(alpha, (1, n)))

    kv = nx.mul(x, nx.reshape(wsoft, (b, n, 1)))
    attn_out = _mha(x, kv, params)

    stacked = nx.concat([x, attn_out], axis=2)
    refreshed = nx.add(nx.matmul(stacked, params.fuse_w), params.fuse_b)
    f_prime = nx.transpose(nx.reshape(refreshed, (b, h, w, c)), (0, 3, 1, 2))

    # the gate is uniform across channels, so its channel mean is itself
    mask = nx.reshape(wsoft, (b, 1, h, w))
    return CoarseOutput(features=f_prime, mask=mask, tau=tau, fused_scores=fused)


def run_coarse_stage(stack: AttentionStack, features: Tensor, params: CoarseParams) -> CoarseOutput:
    """Full coarse pass: extract scores per layer, fuse, gate, refresh."""
    scores = [extract_cls_attention(stack, i) for i in range(stack.num_layers)]
    fused = fuse_layers(scores, params.layer_weights)
    return guided_global_attention(features, fused, params)
