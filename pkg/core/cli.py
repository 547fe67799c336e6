"""
Command-line interface.

Exit codes: 0 success, 1 internal error, 2 usage/configuration error,
3 data/compatibility/format error, 4 numeric or analysis failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

import numpy as np

from core import config as cfgmod
from core import formats
from core.analysis import (DEFAULT_ALPHAS, DEFAULT_DIRECTIONS, COUNT_CUTOFF, QuadraticModel,
                           grad_distribution, masked_step_contrast, probe_landscape,
                           stationarity_ratio, verify_prop1)
from core.data import BlockSource, LM_KINDS, CLS_KINDS, SyntheticTask, gen_synthetic, holdout_split, read_corpus
from core.errors import PMPError, UsageError
from core.experiments import DEFAULT_SEEDS, STUDIES, run_study
from core.mask import check_rho
from core.model import build_model
from core.trainer import (FinetuneMode, MetricsLog, PMPMode, StandardMode, discover_mask, finetune, pretrain)
from core.utils import get_logger, set_console_level

logger = get_logger("PMP.cli")

FINETUNE_MODES = {
    "unauthorized": "unauthorized_full",
    "authorized": "authorized_masked",
    "lora": "lora",
    "head-only": "head_only",
}


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _run_config(args) -> cfgmod.RunConfig:
    overrides: Dict[str, Any] = {
        "seed": args.seed, "lr": args.lr, "total": args.updates, "warmup": args.warmup,
        "micro_batch": args.micro_batch, "accum": args.accum, "clip": args.clip,
        "block_len": getattr(args, "block_len", None), "shuffle_buffer": getattr(args, "shuffle_buffer", None),
        "t_eb": getattr(args, "t_eb", None), "iou_threshold": getattr(args, "iou_threshold", None),
        "streak": getattr(args, "streak", None), "ft_lr": getattr(args, "ft_lr", None),
        "ft_epochs": getattr(args, "epochs", None),
    }
    return cfgmod.resolve(args.preset, args.config, overrides)


def _lm_source(args, run: cfgmod.RunConfig, prefetch: int = 0):
    """(training source, held-out blocks) from --corpus or a synthetic LM task."""
    if args.corpus:
        train_docs, eval_docs = holdout_split(read_corpus(args.corpus))
        source = BlockSource(train_docs, run.block_len, shuffle_buffer=run.shuffle_buffer,
                             seed=run.seed, prefetch=prefetch)
        held = BlockSource(eval_docs, run.block_len).take(run.eval_blocks)
    else:
        task = SyntheticTask(args.task, seed=run.seed, length=run.block_len)
        source = BlockSource.from_task(task, run.block_len, shuffle_buffer=run.shuffle_buffer,
                                       seed=run.seed, prefetch=prefetch)
        held = BlockSource.from_task(task, run.block_len, split_index=1).take(run.eval_blocks)
    if not held:
        logger.warning("EVAL_EMPTY: held-out split too small for a single block")
    return source, held


def _eval_batch(args, run: cfgmod.RunConfig, max_seq_len: int) -> np.ndarray:
    run.block_len = min(run.block_len, max_seq_len)
    _, held = _lm_source(args, run)
    if not held:
        raise UsageError("no held-out blocks available for evaluation; use a larger corpus or smaller --block-len")
    return np.stack(held)


def _pmp_mode(args, run: cfgmod.RunConfig) -> PMPMode:
    exclude = tuple(s.strip() for s in (args.exclude or "").split(",") if s.strip())
    return PMPMode(rho=check_rho(args.rho), t_eb=run.t_eb, iou_threshold=run.iou_threshold,
                   required_streak=run.required_streak, exclude=exclude, ema_beta=args.ema_beta,
                   continue_after_warmup=args.continue_after_warmup,
                   mask_source="random" if args.random_mask else "earlybird").validate()


def _finish(out: Path, manifest: formats.RunManifest):
    path = formats.write_manifest(out, manifest)
    logger.info(f"MANIFEST: {path}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    run = _run_config(args)
    mode = _pmp_mode(args, run) if args.pmp else StandardMode()
    out = Path(args.out)
    mask_out = Path(args.mask_out) if args.mask_out else out.with_suffix(".mask")
    metrics_out = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    manifest = formats.RunManifest("pretrain", run.snapshot(), run.seed,
                                   inputs={"corpus": str(args.corpus or f"synthetic:{args.task}")})

    source, held = _lm_source(args, run, prefetch=args.prefetch)
    model = build_model(run.model, run.seed)
    with MetricsLog(metrics_out, background=True) as metrics:
        result = pretrain(model, source, run.train, mode, metrics, eval_blocks=held or None)

    formats.write_checkpoint(out, result.checkpoint)
    manifest.outputs.update({"checkpoint": str(out), "metrics": str(metrics_out)})
    if result.mask is not None:
        formats.write_mask(mask_out, result.mask)
        manifest.outputs["mask"] = str(mask_out)
        if held:
            batch = np.stack(held)
            manifest.config["stationarity_ratio_end"] = stationarity_ratio(model, batch, result.mask)
            start = build_model(run.model, run.seed)
            manifest.config["stationarity_ratio_start"] = stationarity_ratio(start, batch, result.mask)
    manifest.config["eval_loss"] = {"initial": result.initial_eval_loss, "final": result.final_eval_loss}
    _finish(out, manifest)
    return 0


def cmd_discover_mask(args) -> int:
    run = _run_config(args)
    mode = _pmp_mode(args, run)
    out = Path(args.out)
    source, _ = _lm_source(args, run, prefetch=args.prefetch)
    model = build_model(run.model, run.seed)
    metrics_out = Path(args.metrics) if args.metrics else out.with_name(out.name + ".metrics.jsonl")
    with MetricsLog(metrics_out) as metrics:
        mask, tracker = discover_mask(model, source, run.train, mode, metrics)
    formats.write_mask(out, mask)
    manifest = formats.RunManifest("discover-mask", run.snapshot(), run.seed,
                                   inputs={"corpus": str(args.corpus or f"synthetic:{args.task}")},
                                   outputs={"mask": str(out), "metrics": str(metrics_out)})
    manifest.config["earlybird"] = {"calls": tracker.calls, "converged": not tracker.adopted,
                                    "history": tracker.history}
    _finish(out, manifest)
    return 0


def cmd_finetune(args) -> int:
    run = _run_config(args)
    ckpt = formats.read_checkpoint(args.checkpoint)
    kind = FINETUNE_MODES[args.mode]
    if kind == "authorized_masked":
        if not args.mask:
            raise UsageError("--mode authorized needs --mask")
        mode = FinetuneMode.authorized_masked(formats.read_mask(args.mask))
    else:
        mode = FinetuneMode(kind, rank=args.lora_rank, alpha=args.lora_alpha)
    max_len = int(ckpt.model_config.get("max_seq_len", 64))
    task = SyntheticTask(args.task, seed=run.seed, n_train=run.n_train, n_eval=run.n_eval,
                         length=min(args.length, max_len)).validate()
    out = Path(args.out)
    metrics_out = out.with_name(out.name + ".metrics.jsonl")
    with MetricsLog(metrics_out) as metrics:
        result = finetune(ckpt, gen_synthetic(task), run.finetune, mode, metrics)
    report = {"mode": kind, "task": args.task, "pre_accuracy": result.pre_accuracy,
              "post_accuracy": result.post_accuracy, "baseline_accuracy": result.baseline_accuracy,
              "gain": result.gain}
    formats.write_json(out, report)
    manifest = formats.RunManifest("finetune", run.snapshot(), run.seed,
                                   inputs={"checkpoint": str(args.checkpoint), "mask": str(args.mask or "")},
                                   outputs={"report": str(out), "metrics": str(metrics_out)})
    _finish(out, manifest)
    return 0


def cmd_probe_landscape(args) -> int:
    run = _run_config(args)
    ckpt = formats.read_checkpoint(args.checkpoint)
    mask = formats.read_mask(args.mask)
    batch = _eval_batch(args, run, int(ckpt.model_config.get("max_seq_len", run.block_len)))
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(DEFAULT_ALPHAS)
    probe = probe_landscape(ckpt, mask, batch, alphas, args.directions, run.seed, args.filter_norm)
    out = Path(args.out)
    formats.write_landscape_csv(out, probe.rows())
    manifest = formats.RunManifest("probe-landscape", run.snapshot(), run.seed,
                                   inputs={"checkpoint": str(args.checkpoint), "mask": str(args.mask)},
                                   outputs={"csv": str(out)})
    manifest.config["base_loss"] = probe.base_loss
    _finish(out, manifest)
    return 0


def cmd_grad_dist(args) -> int:
    run = _run_config(args)
    ckpt = formats.read_checkpoint(args.checkpoint)
    mask = formats.read_mask(args.mask)
    batch = _eval_batch(args, run, int(ckpt.model_config.get("max_seq_len", run.block_len)))
    dist = grad_distribution(ckpt, mask, batch, args.cutoff, args.bins)
    out = Path(args.out)
    formats.write_json(out, dist.to_dict())
    manifest = formats.RunManifest("grad-dist", run.snapshot(), run.seed,
                                   inputs={"checkpoint": str(args.checkpoint), "mask": str(args.mask)},
                                   outputs={"report": str(out)})
    _finish(out, manifest)
    return 0


def cmd_verify_theory(args) -> int:
    params = cfgmod.resolve_theory(args.preset)
    for key, value in (("d_M", args.d_m), ("d_Mbar", args.d_mbar), ("eps_flat", args.eps),
                       ("lambda_curv", args.lambda_curv), ("noise_sigma", args.sigma), ("eta", args.eta),
                       ("n_samples", args.samples), ("seed", args.seed)):
        if value is not None:
            params[key] = value
    eta, n, seed = params.pop("eta"), params.pop("n_samples"), params.pop("seed")
    quad = QuadraticModel(**params).validate()
    prop1 = verify_prop1(quad, eta, n, seed, args.workers)
    contrast = masked_step_contrast(quad, eta, n, seed, args.workers)
    out = Path(args.out)
    formats.write_json(out, {"model": {**params, "eta": eta, "n_samples": n, "seed": seed},
                             "prop1": prop1.to_dict(), "contrast": contrast.to_dict(),
                             "pass": prop1.passed})
    manifest = formats.RunManifest("verify-theory", {"preset": args.preset, **params}, seed,
                                   outputs={"report": str(out)})
    _finish(out, manifest)
    if not prop1.passed:
        logger.warning("PROP1_FAILED: empirical increase below the predicted bound")
    return 0


def cmd_ablate(args) -> int:
    run = _run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    report = run_study(args.study, run, seeds, check_rho(args.rho))
    out = Path(args.out)
    formats.write_json(out, report)
    manifest = formats.RunManifest("ablate", run.snapshot(), run.seed, outputs={"report": str(out)})
    _finish(out, manifest)
    return 0


def cmd_view(args) -> int:
    from ui.main_window import launch_viewer
    return launch_viewer(args.dir)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("run configuration")
    g.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
    g.add_argument("--config", help="key=value / INI config file (overrides the preset)")
    g.add_argument("--seed", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--updates", type=int, help="total optimizer updates")
    g.add_argument("--warmup", type=int, help="learning-rate warmup updates")
    g.add_argument("--micro-batch", type=int)
    g.add_argument("--accum", type=int, help="gradient accumulation steps")
    g.add_argument("--clip", type=float, help="global gradient-norm clip (0 disables)")


def _add_data_flags(p: argparse.ArgumentParser, default_task: str = "markov-lm"):
    g = p.add_argument_group("data")
    g.add_argument("--corpus", help="directory of text files or a single text file")
    g.add_argument("--task", default=default_task, choices=LM_KINDS, help="synthetic LM task when no --corpus")
    g.add_argument("--block-len", type=int)
    g.add_argument("--shuffle-buffer", type=int)


def _add_pmp_flags(p: argparse.ArgumentParser, with_switch: bool):
    g = p.add_argument_group("private mask")
    if with_switch:
        g.add_argument("--pmp", action="store_true", help="masked pre-training")
    g.add_argument("--rho", type=float, default=0.7, help="mask ratio in (0, 1]")
    g.add_argument("--t-eb", type=int, help="maximum EarlyBird warm-up updates")
    g.add_argument("--iou-threshold", type=float)
    g.add_argument("--streak", type=int, help="consecutive stable comparisons required")
    g.add_argument("--exclude", help="comma-separated tensor-name substrings kept out of the mask")
    g.add_argument("--ema-beta", type=float, help="rank masks by an EMA of |grad|")
    g.add_argument("--continue-after-warmup", action="store_true",
                   help="start masked training from theta(t_EB) instead of theta(0)")
    g.add_argument("--random-mask", action="store_true", help="random mask of the same ratio (ablation)")
    g.add_argument("--prefetch", type=int, default=0, help="background prefetch queue size")
    g.add_argument("--metrics", help="metrics JSON-lines path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmp", description="Private mask pre-training toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="standard or masked pre-training")
    _add_run_flags(p)
    _add_data_flags(p)
    _add_pmp_flags(p, with_switch=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mask-out", help="mask path (default <out>.mask)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("discover-mask", help="EarlyBird warm-up only; writes the mask")
    _add_run_flags(p)
    _add_data_flags(p)
    _add_pmp_flags(p, with_switch=False)
    p.add_argument("--out", required=True, help="mask path")
    p.set_defaults(func=cmd_discover_mask)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a classification task")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="keyword-cls", choices=CLS_KINDS)
    p.add_argument("--length", type=int, default=64, help="example length in bytes")
    p.add_argument("--mode", default="unauthorized", choices=sorted(FINETUNE_MODES))
    p.add_argument("--mask", help="mask file (authorized mode)")
    p.add_argument("--lora-rank", type=int, default=8)
    p.add_argument("--lora-alpha", type=float, default=16.0)
    p.add_argument("--ft-lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe-landscape", help="1D loss interpolation along masked and full directions")
    _add_run_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--alphas", help="comma-separated grid (default 21 points in [-0.5, 0.5])")
    p.add_argument("--directions", type=int, default=DEFAULT_DIRECTIONS)
    p.add_argument("--filter-norm", action="store_true", help="per-tensor direction normalization")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_probe_landscape)

    p = sub.add_parser("grad-dist", help="gradient magnitude histograms split by mask")
    _add_run_flags(p)
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--cutoff", type=float, default=COUNT_CUTOFF)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True, help="JSON path")
    p.set_defaults(func=cmd_grad_dist)

    p = sub.add_parser("verify-theory", help="Monte Carlo check on a quadratic model")
    p.add_argument("--preset", default="prop1-default", choices=sorted(cfgmod.THEORY_PRESETS))
    p.add_argument("--d-m", type=int)
    p.add_argument("--d-mbar", type=int)
    p.add_argument("--eps", type=float, help="curvature along the masked block")
    p.add_argument("--lambda", dest="lambda_curv", type=float, help="curvature along the complement")
    p.add_argument("--sigma", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="JSON path")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("ablate", help="multi-seed comparison studies")
    _add_run_flags(p)
    p.add_argument("--study", required=True, choices=STUDIES)
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--rho", type=float, default=0.7)
    p.add_argument("--out", required=True, help="JSON path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("view", help="open the desktop viewer")
    p.add_argument("--dir", help="directory with run artifacts")
    p.set_defaults(func=cmd_view)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        set_console_level(logging.DEBUG)
    elif args.quiet:
        set_console_level(logging.WARNING)
    try:
        return args.func(args)
    except PMPError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.error("interrupted")
        return 130
    except Exception as e:
        logger.exception(f"internal error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
