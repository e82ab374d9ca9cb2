"""Synthetic encoder outputs for running the pipeline without a backbone.

Three scenarios:

* uniform: constant features, perfectly uniform attention rows;
* planted-block: a contiguous block of patches gets brighter features and
  strong class-token attention, the rest stays near baseline;
* random: fully random features and row-normalized random attention.

Parameter init and input synthesis draw from separate SeedSequence spawn
keys of the same seed, so either can be regenerated independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coarse import AttentionStack
from .config import PipelineConfig
from .numerics import Tensor

PARAM_STREAM = 0
SYNTH_STREAM = 1


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one stream of a run seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)))


@dataclass
class SynthInputs:
    """Synthetic encoder features plus the attention stack that goes with them."""

    features: Tensor
    stack: AttentionStack
    block: tuple[int, int, int, int] | None = None  # y0, x0, bh, bw in coarse cells


def _uniform_stack(b, heads, t, layers, dt):
    return [Tensor(np.full((b, heads, t, t), 1.0 / t, dtype=dt)) for _ in range(layers)]


def _planted_block(rng, hc, wc):
    lo_h, hi_h = max(1, hc // 4), max(1, hc // 2)
    lo_w, hi_w = max(1, wc // 4), max(1, wc // 2)
    bh = int(rng.integers(lo_h, hi_h + 1))
    bw = int(rng.integers(lo_w, hi_w + 1))
    y0 = int(rng.integers(0, hc - bh + 1))
    x0 = int(rng.integers(0, wc - bw + 1))
    return y0, x0, bh, bw


def synth_inputs(cfg: PipelineConfig) -> SynthInputs:
    """Build features and an attention stack for cfg.scenario."""
    rng = stream_rng(cfg.seed, SYNTH_STREAM)
    dt = np.float32 if cfg.dtype == "f32" else np.float64
    b, c = cfg.batch, cfg.channels
    hc, wc = cfg.coarse_h, cfg.coarse_w
    n = hc * wc
    t = n + 1
    heads = cfg.encoder_heads
    layers = len(cfg.layer_ids)

    if cfg.scenario == "uniform":
        features = Tensor(np.ones((b, c, hc, wc), dtype=dt))
        return SynthInputs(features, AttentionStack(_uniform_stack(b, heads, t, layers, dt),
                                                    layer_ids=cfg.layer_ids))

    if cfg.scenario == "planted-block":
        y0, x0, bh, bw = _planted_block(rng, hc, wc)
        feats = rng.normal(0.0, 0.05, size=(b, c, hc, wc))
        feats[:, :, y0:y0 + bh, x0:x0 + bw] += 1.5
        # token ids of the planted patches, offset 1 for the class token
        cell_ids = (np.arange(y0, y0 + bh)[:, None] * wc + np.arange(x0, x0 + bw)[None, :])
        token_ids = 1 + cell_ids.ravel()
        mats = []
        for _ in range(layers):
            layer = np.full((b, heads, t, t), 1.0 / t, dtype=dt)
            row = rng.uniform(0.5, 1.5, size=(b, heads, t))
            row[:, :, token_ids] *= 8.0
            row /= row.sum(axis=-1, keepdims=True)
            layer[:, :, 0, :] = row
            mats.append(Tensor(layer.astype(dt, copy=False)))
        return SynthInputs(Tensor(feats.astype(dt)), AttentionStack(mats, layer_ids=cfg.layer_ids),
                           block=(y0, x0, bh, bw))

    if cfg.scenario == "random":
        feats = rng.standard_normal(size=(b, c, hc, wc), dtype=dt)
        mats = []
        for _ in range(layers):
            layer = rng.random(size=(b, heads, t, t), dtype=dt) + dt(1e-3)
            layer /= layer.sum(axis=-1, keepdims=True)
            mats.append(Tensor(layer))
        return SynthInputs(Tensor(feats), AttentionStack(mats, layer_ids=cfg.layer_ids))

    raise ValueError(f"unknown scenario {cfg.scenario!r}")
