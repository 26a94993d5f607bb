"""Command-line entry point.

Exit codes: 0 success, 1 unexpected error, 2 config error, 3 numeric
failure during training, 4 experiment finished with some branches failed.
Errors also print one JSON line on stderr::

    {"error": "config", "exit_code": 2, "message": "..."}
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import __version__
from . import datasets as ds
from . import pipeline as pl
from . import reporting
from .config import PRESETS, ConfigError, RunConfig, load_run_config
from .degradation import DegradationSpec
from .models import Model
from .tensor_core import ShapeError
from .trainer import CheckpointError, NumericError, atomic_write, load_checkpoint, save_checkpoint, train

log = logging.getLogger("domainmap")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _config(args) -> RunConfig:
    preset = getattr(args, "preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}")
    cfg = load_run_config(args.config, PRESETS.get(preset) if preset else None)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    return cfg


def _spec(cfg: RunConfig, name: str) -> DegradationSpec:
    if name == "identity" and name not in cfg.degradations:
        return DegradationSpec()
    return cfg.spec(name)


def _out(args, *parts) -> str:
    path = os.path.join(args.out, *parts)
    os.makedirs(os.path.dirname(path) if parts else path, exist_ok=True)
    return path


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


# --------------------------------------------------------------------------
# commands


def cmd_degrade(args) -> int:
    cfg = _config(args)
    spec = _spec(cfg, args.spec)
    manifest: dict = {}
    records = ds.load_dir(args.input, args.pattern, manifest)
    out_dir = _out(args)
    ds.save_records(ds.degrade_records(records, spec), out_dir, args.bitdepth)
    _emit({"command": "degrade", "spec": spec.label, "images": len(records), "skipped": sorted(manifest["skipped"]),
           "out": out_dir})
    return EXIT_OK


def _train_pairs(args, cfg: RunConfig, input_spec: DegradationSpec, target_spec: DegradationSpec):
    ratio = target_spec.net_scale / input_spec.net_scale
    if ratio.denominator != 1 or int(ratio) not in (1, 2, 4):
        raise ConfigError(f"{input_spec.label or 'identity'} -> {target_spec.label or 'identity'} "
                          f"has scale ratio {ratio}; need 1, 2 or 4")
    scale = int(ratio)
    model_cfg = cfg.model_config(args.model, scale)
    model_cfg = replace(model_cfg, scale=scale)
    train_gt, _ = cfg.corpus.split()
    return ds.make_pairs(train_gt, input_spec, scale, target_spec=target_spec), model_cfg


def _run_training(args, cfg: RunConfig, pairs, model_cfg, name: str) -> int:
    tcfg = cfg.train_config()
    if args.iters is not None:
        tcfg = replace(tcfg, total_iters=args.iters, halve_every=max(1, args.iters // 3) if args.iters else tcfg.halve_every)
    path = args.checkpoint or _out(args, f"{name}.ckpt")
    resume = load_checkpoint(args.resume) if getattr(args, "resume", None) else None
    model = resume.build_model() if resume else Model(model_cfg, seed=tcfg.seed)
    try:
        ckpt, history = train(model, pairs, tcfg, resume=resume)
    except NumericError as e:
        if e.checkpoint is not None:
            save_checkpoint(e.checkpoint, path + ".failed")
        raise
    save_checkpoint(ckpt, path)
    hist_path = os.path.splitext(path)[0] + "_loss.csv"
    atomic_write(hist_path, ("iteration,l1\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history))).encode())
    _emit({"command": args.command, "checkpoint": path, "digest": ckpt.digest(), "iterations": ckpt.iteration,
           "scale": model_cfg.scale, "input_domain": pairs.input_domain, "target_domain": pairs.target_domain,
           "final_loss": history[-1] if history else None})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    inp = _spec(cfg, args.input_spec)
    tgt = _spec(cfg, args.target_spec) if args.target_spec else DegradationSpec()
    pairs, model_cfg = _train_pairs(args, cfg, inp, tgt)
    return _run_training(args, cfg, pairs, model_cfg, args.name or "model")


def cmd_map(args) -> int:
    cfg = _config(args)
    src, dst = _spec(cfg, args.source), _spec(cfg, args.target)
    ratio = dst.net_scale / src.net_scale
    if ratio not in (1, 2):
        raise ConfigError(f"mapping {args.source} -> {args.target} has scale ratio {ratio}; need 1 or 2")
    pairs, model_cfg = _train_pairs(args, cfg, src, dst)
    return _run_training(args, cfg, pairs, model_cfg, args.name or "map")


def _apply_checkpoints(args, expected_scale: Optional[int]) -> int:
    models = [load_checkpoint(p).build_model() for p in args.checkpoint]
    pipe = pl.compose(models, expected_scale)  # scale chain checked before any image is touched
    records = ds.load_dir(args.input, args.pattern)
    outputs = [ds.ImageRecord(r.id, pipe.predict(r.pixels), f"{r.provenance}|{args.command}") for r in records]
    out_dir = _out(args)
    ds.save_records(outputs, out_dir, args.bitdepth)
    _emit({"command": args.command, "images": len(outputs), "scale": pipe.scale, "out": out_dir,
           "stages": [os.path.basename(p) for p in args.checkpoint]})
    return EXIT_OK


def cmd_sr(args) -> int:
    return _apply_checkpoints(args, args.scale)


def cmd_restore(args) -> int:
    return _apply_checkpoints(args, 1)


def cmd_eval(args) -> int:
    preds = {r.id: r for r in ds.load_dir(args.pred, args.pattern)}
    gts = ds.load_dir(args.gt, args.pattern)
    missing = [g.id for g in gts if g.id not in preds]
    if missing:
        raise ConfigError(f"predictions missing for {len(missing)} GT image(s): {', '.join(missing[:5])}")
    rep = pl.evaluate(pl.IdentityStage(), [preds[g.id] for g in gts], gts, args.label, os.path.basename(
        os.path.normpath(args.gt)))
    os.makedirs(args.out, exist_ok=True)
    atomic_write(os.path.join(args.out, "eval.csv"), reporting.image_rows_csv([rep]).encode())
    atomic_write(os.path.join(args.out, "eval_summary.csv"), reporting.summary_csv([rep]).encode())
    s = rep.summary()
    print(f"images={s['n_images']} psnr_mean_db={reporting.fmt(s['psnr_mean_db'])} "
          f"psnr_pooled_db={reporting.fmt(s['psnr_pooled_db'])} ssim_mean={reporting.fmt(s['ssim_mean'])}")
    return EXIT_OK


def _roles(cfg: RunConfig, scale: int) -> pl.RoleConfigs:
    return pl.RoleConfigs(cfg.model_config(scale=scale), cfg.train_config(), dict(cfg.training_roles))


def cmd_experiment(args) -> int:
    cfg = _config(args)
    e = cfg.experiment
    if args.branches:
        allowed = pl.SR_BRANCHES if e.kind == "sr" else pl.RESTORE_BRANCHES
        bad = [b for b in args.branches if b not in allowed]
        if bad:
            raise ConfigError(f"not {e.kind} branches: {', '.join(bad)}; choose from {', '.join(allowed)}")
        e.branches = list(args.branches)
    for b in e.branch_list:  # chain problems surface before any training
        pl.plan_branch(b, e.blur_from[0] if e.kind == "restore" else None, e.blur_to if e.kind == "restore" else None)
    out_dir = e.output_dir if e.output_dir and args.out == DEFAULT_OUT else args.out
    store = pl.ModelStore(args.store or os.path.join(out_dir, "models"))
    train_gt, test_gt = cfg.corpus.split()
    if e.kind == "sr":
        transfer = cfg.transfer_corpus.load() if cfg.transfer_corpus and e.transfer_unknown else None
        setup = pl.SRSetup(train_gt, test_gt, cfg.spec(e.unknown), transfer,
                           cfg.spec(e.transfer_unknown) if transfer else None,
                           bool(e.warm_start_specialized))
        result = pl.run_sr_experiment(e.branch_list, setup, _roles(cfg, 4), store)
        md = reporting.sr_markdown(result)
    else:
        warm = True if e.warm_start_specialized is None else e.warm_start_specialized
        setup = pl.RestoreSetup(train_gt, test_gt, e.blur_to, tuple(e.blur_from), e.noise_db, e.seed,
                                dict(e.sigmas), warm)
        result = pl.run_restore_experiment(e.branch_list, setup, _roles(cfg, 1), store)
        md = reporting.restore_markdown(result, e.blur_to)
    paths = reporting.write_reports(result, out_dir, md, figures=not args.no_figures)
    sys.stdout.write(md)
    _emit({"command": "experiment", "kind": e.kind, "reports": len(result.reports),
           "failed": sorted(result.failures), "files": paths})
    if result.failures:
        raise CliError("partial", EXIT_PARTIAL,
                       f"{len(result.failures)} branch(es) failed: " +
                       "; ".join(f"{k}: {v}" for k, v in sorted(result.failures.items())))
    return EXIT_OK


def cmd_branches(args) -> int:
    for b in pl.BRANCHES:
        print(b)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

DEFAULT_OUT = "out"


def build_parser() -> argparse.ArgumentParser:
    branches = ", ".join(pl.BRANCHES)
    p = argparse.ArgumentParser(
        prog="domainmap",
        description="Two-stage domain-mapped super-resolution and deblurring at desk scale.",
        epilog=f"Pipeline branches: {branches}. Presets: {', '.join(sorted(PRESETS))}.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML run config (strict: unknown keys are rejected)")
    p.add_argument("--seed", type=int, help="override experiment.seed")
    p.add_argument("--out", default=DEFAULT_OUT, help="output directory (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def images(sp):
        sp.add_argument("--pattern", default="*.png", help="filename glob (default: %(default)s)")
        sp.add_argument("--bitdepth", type=int, choices=(8, 16), default=8)

    sp = sub.add_parser("degrade", help="apply a named degradation to a directory of PNGs")
    sp.add_argument("--spec", required=True, help="degradation name from the config ('identity' is built in)")
    sp.add_argument("--in", dest="input", required=True, help="input PNG directory")
    images(sp)
    sp.set_defaults(func=cmd_degrade)

    def training(sp, name):
        sp.add_argument("--model", help="model name from the config (default: experiment.model)")
        sp.add_argument("--iters", type=int, help="override training.defaults.total_iters")
        sp.add_argument("--checkpoint", help=f"checkpoint path (default: OUT/{name}.ckpt)")
        sp.add_argument("--resume", help="checkpoint to resume from")
        sp.add_argument("--name", help=f"output stem (default: {name})")

    sp = sub.add_parser("train", help="train one model on (input spec -> target spec) pairs from the corpus")
    sp.add_argument("--input-spec", required=True, help="degradation producing the network input")
    sp.add_argument("--target-spec", help="degradation producing the target (default: GT)")
    training(sp, "model")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("map", help="train a mapping network between two degradation domains")
    sp.add_argument("--from", dest="source", required=True, help="source degradation name")
    sp.add_argument("--to", dest="target", required=True, help="intermediate degradation name")
    training(sp, "map")
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("sr", help="run one or more checkpoints in sequence over a PNG directory")
    sp.add_argument("--checkpoint", required=True, action="append", help="stage checkpoint, repeat to chain")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--scale", type=int, help="expected overall scale; checked before running")
    images(sp)
    sp.set_defaults(func=cmd_sr)

    sp = sub.add_parser("restore", help="like sr, but the chain must keep the image size")
    sp.add_argument("--checkpoint", required=True, action="append")
    sp.add_argument("--in", dest="input", required=True)
    images(sp)
    sp.set_defaults(func=cmd_restore)

    sp = sub.add_parser("eval", help="PSNR/SSIM of predictions against GT (matched by filename)")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--label", default="eval", help="branch label written in the CSV")
    sp.add_argument("--pattern", default="*.png")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("experiment", help="train and evaluate a set of branches, write CSV/markdown/figures",
                        epilog=f"SR branches: {', '.join(pl.SR_BRANCHES)}. "
                               f"Restoration branches: {', '.join(pl.RESTORE_BRANCHES)}.")
    sp.add_argument("--preset", help=f"built-in config ({', '.join(sorted(PRESETS))}); --config overrides it")
    sp.add_argument("--branches", nargs="+", metavar="BRANCH", help="subset of branches to run")
    sp.add_argument("--store", help="model checkpoint directory (default: OUT/models)")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("branches", help="list every pipeline branch name")
    sp.set_defaults(func=cmd_branches)
    return p


def _fail(kind: str, code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("DOMAINMAP_LOG") or ("DEBUG" if args.verbose > 1 else "INFO" if args.verbose else "WARNING")
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        return _fail(e.kind, e.code, str(e))
    except (ConfigError, pl.ChainError) as e:
        return _fail("config", EXIT_CONFIG, str(e))
    except NumericError as e:
        return _fail("numeric", EXIT_NUMERIC, str(e))
    except (CheckpointError, FileNotFoundError, ShapeError, ValueError, KeyError, OSError) as e:
        return _fail(type(e).__name__, EXIT_ERROR, str(e))


if __name__ == "__main__":
    sys.exit(main())
