"""Command line front end.

Subcommands: pipeline, coarse, fine, flops, gradcheck, selftest, losses.
Exit codes: 0 on success, 1 when a verification check fails or results go
non-finite, 2 for usage, config and file errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .coarse import CoarseOutput
from .complexity import MECHANISMS, cost_report, redundancy_metric, report_csv, report_table
from .config import ALPHA_MODES, DTYPES, ConfigError, PipelineConfig, apply_override
from .fine import WindowSpec, fine_pass
from .losses import LossWeights, bce_dice_loss, ce_label_smoothing, focal_loss, total_loss
from .numerics import NonFiniteError, ShapeError, Tensor
from .pipeline import init_pipeline_params, report_json, run_pipeline
from .tensorfile import FormatError, export_pgm, read_grct, write_grct
from .verification import GRAD_TOL, gradient_suite, invariant_suite


class UsageError(Exception):
    """Bad arguments discovered after argparse; exits with code 2."""


def _shared_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared options")
    d = argparse.SUPPRESS
    g.add_argument("--config", metavar="PATH", default=d, help="load a config file")
    g.add_argument("--seed", type=int, default=d, help="override the run seed")
    g.add_argument("--out-dir", dest="out_dir", metavar="DIR", default=d,
                   help="artifact directory (default: out)")
    g.add_argument("--dtype", choices=sorted(DTYPES), default=d, help="compute precision")
    g.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   default=d, help="override any config field (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_flags()
    root = argparse.ArgumentParser(
        prog="coarse2fine",
        description="Coarse-to-fine mask generation on synthetic encoder outputs.",
        parents=[shared],
    )
    sub = root.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("pipeline", parents=[shared],
                       help="run both stages and write all artifacts")
    p.add_argument("--alpha-expand", choices=ALPHA_MODES, default=argparse.SUPPRESS,
                   help="layer weight expansion mode")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("coarse", parents=[shared], help="run the coarse stage only")
    p.add_argument("--alpha-expand", choices=ALPHA_MODES, default=argparse.SUPPRESS)
    p.set_defaults(func=cmd_coarse)

    p = sub.add_parser("fine", parents=[shared],
                       help="run the fine stage, optionally from saved tensors")
    p.add_argument("--features", metavar="PATH", default=None,
                   help="coarse feature tensor (.grct)")
    p.add_argument("--mask", metavar="PATH", default=None,
                   help="coarse mask tensor (.grct)")
    p.set_defaults(func=cmd_fine)

    p = sub.add_parser("flops", parents=[shared],
                       help="analytic and counted attention costs")
    p.add_argument("--mechanisms", default=",".join(MECHANISMS),
                   help="comma list from msa,wmsa,wssa")
    p.add_argument("--swin-convention", action="store_true",
                   help="carry the channel factor in window attention terms")
    p.add_argument("--no-measure", action="store_true",
                   help="skip the instrumented kernels, report analytic only")
    p.add_argument("--csv", metavar="PATH", default=None, help="also write a csv table")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="finite difference checks on every differentiable surface")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", parents=[shared],
                       help="structural invariants: round trips, sums, determinism")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("losses", parents=[shared],
                       help="evaluate the training losses on saved or synthetic tensors")
    p.add_argument("--pred", metavar="PATH", default=None, help="predictions (.grct)")
    p.add_argument("--target", metavar="PATH", default=None, help="binary targets (.grct)")
    p.add_argument("--logits", metavar="PATH", default=None,
                   help="class logits for smoothed CE (.grct)")
    p.add_argument("--labels", metavar="PATH", default=None,
                   help="integer labels stored as a float tensor (.grct)")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--alpha-bal", dest="alpha_bal", type=float, default=0.25)
    p.add_argument("--lambda-c", dest="lambda_c", type=float, default=None)
    p.add_argument("--lambda-r", dest="lambda_r", type=float, default=None)
    p.add_argument("--lambda-f", dest="lambda_f", type=float, default=None)
    p.set_defaults(func=cmd_losses)
    return root


def resolve_config(ns: argparse.Namespace) -> PipelineConfig:
    """config file, then single-purpose flags, then --set pairs (last wins)."""
    path = getattr(ns, "config", None)
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    if getattr(ns, "seed", None) is not None:
        cfg = apply_override(cfg, "seed", str(ns.seed))
    if getattr(ns, "dtype", None):
        cfg = apply_override(cfg, "dtype", ns.dtype)
    if getattr(ns, "alpha_expand", None):
        cfg = apply_override(cfg, "alpha_expand", ns.alpha_expand)
    for pair in getattr(ns, "overrides", None) or []:
        key, sep, val = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        cfg = apply_override(cfg, key.strip(), val.strip())
    return cfg


def _out_dir(ns: argparse.Namespace) -> Path:
    out = Path(getattr(ns, "out_dir", None) or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_tensor(path: str, dtype: str) -> Tensor:
    arr = read_grct(path)
    want = np.float32 if dtype == "f32" else np.float64
    return Tensor(arr.astype(want, copy=False))


def _say(msg: str) -> None:
    print(msg)


def _write_mask_artifacts(out: Path, stem: str, mask: Tensor) -> list[Path]:
    grct = out / f"{stem}.grct"
    pgm = out / f"{stem}.pgm"
    write_grct(grct, mask)
    export_pgm(pgm, mask.data[0, 0])
    return [grct, pgm]


def cmd_pipeline(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    out = _out_dir(ns)
    res = run_pipeline(cfg)
    written = []
    written += _write_mask_artifacts(out, "coarse_mask", res.coarse.mask)
    write_grct(out / "fused_scores.grct", res.coarse.fused_scores)
    written.append(out / "fused_scores.grct")
    write_grct(out / "fine_logits.grct", res.fine.logits)
    written.append(out / "fine_logits.grct")
    export_pgm(out / "fine_mask.pgm", res.fine.logits.data[0, 0])
    written.append(out / "fine_mask.pgm")
    (out / "report.json").write_text(report_json(res.report))
    written.append(out / "report.json")

    rep = res.report
    _say(f"scenario {cfg.scenario}  seed {cfg.seed}  dtype {cfg.dtype}")
    for key in ("nominal_input", "encoder_features", "coarse_mask", "fine_tokens",
                "guidance_mask", "fine_logits"):
        _say(f"  {key:<18} {rep['shapes'][key]}")
    _say(f"  tau coarse {rep['thresholds']['tau_coarse']}")
    _say(f"  tau fine   {rep['thresholds']['tau_fine']}")
    fl = rep["flops"]
    _say(f"  flops msa {fl['msa']:,}  wmsa {fl['wmsa']:,}  "
         f"wssa {fl['wssa']:,.0f} (rho={fl['rho']:.4f})")
    _say("wrote " + "  ".join(str(p) for p in written))
    return 0


def cmd_coarse(ns: argparse.Namespace) -> int:
    cfg = resolve_config(ns)
    out = _out_dir(ns)
    from .coarse import run_coarse_stage
    from .pipeline import init_pipeline_params
    from .synth import synth_inputs

    params = init_pipeline_params(cfg)
    inputs = synth_inputs(cfg)
    res = run_coarse_stage(inputs.stack, inputs.features, params.coarse)
    res.features.check_finite("coarse features")
    res.mask.check_finite("coarse mask")

    write_grct(out / "coarse_features.grct", res.features)
    _write_mask_artifacts(out, "coarse_mask", res.mask)
    write_grct(out / "fused_scores.grct", res.fused_scores)
    rep = {
        "config": dataclasses.asdict(cfg),
        "shapes": {"coarse_features": list(res.features.shape),
                   "coarse_mask": list(res.mask.shape)},
        "tau_coarse": [float(v) for v in np.ravel(res.tau.data)],
        "mask_mean": float(res.mask.data.mean()),
    }
    (out / "coarse_report.json").write_text(json.dumps(rep, sort_keys=True, indent=2) + "\n")
    _say(f"coarse mask {res.mask.shape}  mean {rep['mask_mean']:.4f}  "
         f"tau {rep['tau_coarse']}")
    _say(f"wrote {out}/coarse_features.grct  {out}/coarse_mask.grct  "
         f"{out}/coarse_mask.pgm  {out}/fused_scores.grct  {out}/coarse_report.json")
    return 0


def cmd_fine(ns: argparse.Namespace) -> int:
    if (ns.features is None) != (ns.mask is None):
        raise UsageError("--features and --mask must be given together")
    cfg = resolve_config(ns)

    if ns.features is not None:
        feats = _load_tensor(ns.features, cfg.dtype)
        mask = _load_tensor(ns.mask, cfg.dtype)
        if mask.ndim == 3:
            mask = Tensor(mask.data[:, None, :, :])
        if feats.ndim != 4 or mask.ndim != 4:
            raise FormatError("fine stage expects rank-4 feature and mask tensors")
        if mask.shape != (feats.shape[0], 1, feats.shape[2], feats.shape[3]):
            raise FormatError(f"mask shape {mask.shape} does not match features {feats.shape}")
        # adopt the stored geometry so params line up with the file
        cfg = dataclasses.replace(cfg, batch=feats.shape[0], channels=feats.shape[1],
                                  coarse_h=feats.shape[2], coarse_w=feats.shape[3])
        coarse = CoarseOutput(features=feats, mask=mask)
    else:
        from .coarse import run_coarse_stage
        from .synth import synth_inputs
        inputs = synth_inputs(cfg)
        coarse = run_coarse_stage(inputs.stack, inputs.features,
                                  init_pipeline_params(cfg).coarse)

    out = _out_dir(ns)
    params = init_pipeline_params(cfg).fine
    res = fine_pass(coarse, params, WindowSpec(cfg.window),
                    out_hw=(cfg.out_h, cfg.out_w), scale=cfg.fine_scale)
    res.logits.check_finite("fine logits")

    write_grct(out / "fine_logits.grct", res.logits)
    export_pgm(out / "fine_mask.pgm", res.logits.data[0, 0])
    write_grct(out / "amap.grct", res.amap)
    rep = {
        "config": dataclasses.asdict(cfg),
        "shapes": {"fine_logits": list(res.logits.shape), "amap": list(res.amap.shape)},
        "tau_fine": [float(v) for v in np.ravel(res.tau.data)],
        "logits_mean": float(res.logits.data.mean()),
    }
    (out / "fine_report.json").write_text(json.dumps(rep, sort_keys=True, indent=2) + "\n")
    _say(f"fine logits {res.logits.shape}  mean {rep['logits_mean']:.4f}  "
         f"tau {rep['tau_fine']}")
    _say(f"wrote {out}/fine_logits.grct  {out}/fine_mask.pgm  {out}/amap.grct  "
         f"{out}/fine_report.json")
    return 0


_FLOPS_DEFAULTS = {"h": 64, "w": 64, "c": 256, "m": 6, "rho": 0.5, "seed": 0}


def _flops_params(ns: argparse.Namespace) -> dict:
    p = dict(_FLOPS_DEFAULTS)
    for pair in getattr(ns, "overrides", None) or []:
        key, sep, val = pair.partition("=")
        key = key.strip().lower()
        if not sep or key not in p:
            raise UsageError(f"flops --set accepts {sorted(p)}, got {pair!r}")
        try:
            p[key] = float(val) if key == "rho" else int(val)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {val!r}") from exc
    return p


def cmd_flops(ns: argparse.Namespace) -> int:
    p = _flops_params(ns)
    mechs = [m.strip() for m in ns.mechanisms.split(",") if m.strip()]
    for m in mechs:
        if m not in MECHANISMS:
            raise UsageError(f"unknown mechanism {m!r}; choose from {', '.join(MECHANISMS)}")
    reports = [
        cost_report(mech, p["h"], p["w"], p["c"], m=p["m"], rho=p["rho"], seed=p["seed"],
                    swin_convention=ns.swin_convention, measure=not ns.no_measure)
        for mech in mechs
    ]
    _say(report_table(reports))
    if ns.csv:
        Path(ns.csv).write_text(report_csv(reports))
        _say(f"wrote {ns.csv}")
    return 0


def cmd_gradcheck(ns: argparse.Namespace) -> int:
    seed = getattr(ns, "seed", None)
    results = gradient_suite(seed if seed is not None else 0)
    worst = 0.0
    failed = 0
    for name, err in results:
        ok = err <= GRAD_TOL
        failed += not ok
        worst = max(worst, err)
        _say(f"{'PASS' if ok else 'FAIL'}  {name:<36} max_rel_err={err:.3e}  tol={GRAD_TOL:.0e}")
    _say(f"{len(results) - failed}/{len(results)} gradient checks passed "
         f"(worst {worst:.3e})")
    return 0 if failed == 0 else 1


def cmd_selftest(ns: argparse.Namespace) -> int:
    seed = getattr(ns, "seed", None)
    results = invariant_suite(seed if seed is not None else 0)
    failed = 0
    for name, ok, detail in results:
        failed += not ok
        _say(f"{'PASS' if ok else 'FAIL'}  {name:<40} {detail}")
    _say(f"{len(results) - failed}/{len(results)} invariant checks passed")
    return 0 if failed == 0 else 1


def cmd_losses(ns: argparse.Namespace) -> int:
    if (ns.pred is None) != (ns.target is None):
        raise UsageError("--pred and --target must be given together")
    if (ns.logits is None) != (ns.labels is None):
        raise UsageError("--logits and --labels must be given together")
    cfg = resolve_config(ns)

    if ns.pred is not None:
        pred = _load_tensor(ns.pred, "f64")
        target = _load_tensor(ns.target, "f64")
    else:
        rng = np.random.default_rng(cfg.seed)
        pred = Tensor(rng.uniform(0.02, 0.98, size=(2, 1, 8, 8)))
        target = Tensor((rng.random((2, 1, 8, 8)) > 0.5).astype(np.float64))
        _say("no --pred/--target given, using synthetic tensors")

    if ns.logits is not None:
        logits = _load_tensor(ns.logits, "f64")
        labels = read_grct(ns.labels).astype(np.int64)
    else:
        rng = np.random.default_rng(cfg.seed + 1)
        logits = Tensor(rng.standard_normal((2, 3, 8, 8)))
        labels = rng.integers(0, 3, size=(2, 8, 8))

    focal = focal_loss(pred, target, gamma=ns.gamma, alpha_bal=ns.alpha_bal)
    dice = bce_dice_loss(pred, target)
    ce = ce_label_smoothing(logits, labels)
    kw = {}
    for field in ("lambda_c", "lambda_r", "lambda_f"):
        v = getattr(ns, field)
        if v is not None:
            kw[field] = v
    weights = LossWeights(**kw)
    total = total_loss(focal, dice, ce, weights)
    _say(f"focal            = {focal.item():.10f}")
    _say(f"bce_dice         = {dice.item():.10f}")
    _say(f"ce_smoothed      = {ce.item():.10f}")
    _say(f"total (c={weights.lambda_c}, r={weights.lambda_r}, f={weights.lambda_f}) "
         f"= {total.item():.10f}")
    return 0


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    if not hasattr(ns, "func"):
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return ns.func(ns)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FormatError, ShapeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(cli_main())
