"""End-to-end driver: synthetic inputs -> coarse gating -> windowed refinement.

The run report is a plain dict of shapes, thresholds, mask statistics and
analytic attention costs.  It deliberately carries no timestamps or host
info so that identical configs serialize to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .coarse import CoarseOutput, CoarseParams, run_coarse_stage
from .complexity import flops_msa, flops_wmsa, flops_wssa
from .config import PipelineConfig
from .fine import FineOutput, FineParams, WindowSpec, fine_pass
from .numerics import Tensor
from .synth import PARAM_STREAM, SynthInputs, stream_rng, synth_inputs


@dataclass
class PipelineParams:
    coarse: CoarseParams
    fine: FineParams


@dataclass
class PipelineResult:
    coarse: CoarseOutput
    fine: FineOutput
    inputs: SynthInputs
    report: dict


def init_pipeline_params(cfg: PipelineConfig) -> PipelineParams:
    """Draw both stages' parameters from the params stream of cfg.seed."""
    rng = stream_rng(cfg.seed, PARAM_STREAM)
    coarse = CoarseParams.init(rng, cfg.channels, len(cfg.layer_ids), heads=cfg.heads,
                               dtype=cfg.dtype, temperature=cfg.temp_coarse,
                               alpha_expand=cfg.alpha_expand)
    fine = FineParams.init(rng, cfg.channels, window_size=cfg.window, heads=cfg.heads,
                           dtype=cfg.dtype, temperature=cfg.temp_fine,
                           pairwise=cfg.pairwise)
    return PipelineParams(coarse=coarse, fine=fine)


def _flops_entry(cfg: PipelineConfig, rho: float) -> dict:
    h, w, c, m = cfg.coarse_h, cfg.coarse_w, cfg.channels, cfg.window
    entry = {
        "h": h, "w": w, "c": c, "m": m, "rho": rho,
        "msa": flops_msa(h, w, c),
        "wmsa": flops_wmsa(h, w, c, m),
        "wssa": flops_wssa(h, w, c, m, rho),
        "wmsa_swin": flops_wmsa(h, w, c, m, swin_convention=True),
        "wssa_swin": flops_wssa(h, w, c, m, rho, swin_convention=True),
    }
    return entry


def build_report(cfg: PipelineConfig, coarse: CoarseOutput, fine: FineOutput) -> dict:
    """Shapes, thresholds, occupancy and analytic costs for one run."""
    cmask = coarse.mask.data
    fmask = fine.logits.data
    # effective keep ratio of the coarse gate drives the sparse-cost row
    rho = float(np.clip(cmask.mean(), 1e-6, 1.0))
    report = {
        "config": asdict(cfg),
        "shapes": {
            "nominal_input": [cfg.batch, 3, cfg.out_h, cfg.out_w],
            "encoder_features": [cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w],
            "coarse_features": list(coarse.features.shape),
            "coarse_mask": list(coarse.mask.shape),
            "fine_tokens": [cfg.batch, cfg.channels, cfg.fine_h, cfg.fine_w],
            "guidance_mask": [cfg.batch, 1, cfg.fine_h, cfg.fine_w],
            "fine_logits": list(fine.logits.shape),
        },
        "thresholds": {
            "tau_coarse": [float(v) for v in np.ravel(coarse.tau.data)],
            "tau_fine": [float(v) for v in np.ravel(fine.tau.data)],
        },
        "masks": {
            "coarse_mean": float(cmask.mean()),
            "coarse_min": float(cmask.min()),
            "coarse_max": float(cmask.max()),
            "fine_mean": float(fmask.mean()),
            "fine_min": float(fmask.min()),
            "fine_max": float(fmask.max()),
        },
        "flops": _flops_entry(cfg, rho),
    }
    return report


def run_pipeline(cfg: PipelineConfig,
                 params: PipelineParams | None = None,
                 inputs: SynthInputs | None = None) -> PipelineResult:
    """Run both stages on synthetic (or supplied) inputs and report."""
    if params is None:
        params = init_pipeline_params(cfg)
    if inputs is None:
        inputs = synth_inputs(cfg)
    want = (cfg.batch, cfg.channels, cfg.coarse_h, cfg.coarse_w)
    if inputs.features.shape != want:
        raise ValueError(f"features shape {inputs.features.shape} does not match config {want}")

    coarse = run_coarse_stage(inputs.stack, inputs.features, params.coarse)
    coarse.features.check_finite("coarse features")
    coarse.mask.check_finite("coarse mask")

    fine = fine_pass(coarse, params.fine, WindowSpec(cfg.window),
                     out_hw=(cfg.out_h, cfg.out_w), scale=cfg.fine_scale)
    fine.logits.check_finite("fine logits")

    report = build_report(cfg, coarse, fine)
    return PipelineResult(coarse=coarse, fine=fine, inputs=inputs, report=report)


def report_json(report: dict) -> str:
    """Deterministic serialization: sorted keys, two-space indent."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
