"""Command-line entry points: aim gen-data|train|rl|eval|inspect.

Every command echoes the fully resolved configuration and seed before
running, as the provenance record of its outputs.  Exit codes: 0 success,
1 usage error, 2 data/format error, 3 invariant failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys

import numpy as np

from . import dataset as ds
from . import flowmatch as fm
from . import model as mdl
from . import numcore as nc
from . import pngout
from . import rl as rl_mod
from . import rollout as ro
from . import tokenizer as tok
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, load_config

log = logging.getLogger("aim.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="aim", description="Intent-aware world-action model toolkit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", default=None, help="key/value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)

    sp = sub.add_parser("gen-data", help="generate an expert dataset")
    common(sp)
    sp.add_argument("--n", type=int, default=512, help="number of trajectories")

    sp = sub.add_parser("train", help="stage-1 flow-matching training")
    common(sp)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--lambda-m", type=float, default=None)
    sp.add_argument("--lambda-a", type=float, default=None)
    sp.add_argument("--from", dest="resume", default=None,
                    help="checkpoint to resume from")

    sp = sub.add_parser("rl", help="GRPO post-training of the action head")
    common(sp)
    sp.add_argument("--stage1", default=None, help="stage-1 checkpoint (required)")
    sp.add_argument("--group-size", type=int, default=None)
    sp.add_argument("--eps-clip", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None, help="GRPO iterations")

    sp = sub.add_parser("eval", help="closed-loop success-rate evaluation")
    common(sp)
    sp.add_argument("--from", dest="ckpt", default=None, help="checkpoint (required)")
    sp.add_argument("--n", type=int, default=50, help="episodes per task")

    sp = sub.add_parser("inspect", help="render prediction and mask panels")
    common(sp)
    sp.add_argument("--from", dest="ckpt", default=None, help="checkpoint (required)")
    sp.add_argument("--n", type=int, default=0, help="trajectory index")
    return p


def _resolve_config(args) -> Config:
    overrides = {}
    if args.seed is not None:
        overrides["training.seed"] = str(args.seed)
        overrides["rl.seed"] = str(args.seed)
    for flag, key in (("steps", "training.steps"),
                      ("lambda_m", "training.lambda_m"),
                      ("lambda_a", "training.lambda_a"),
                      ("group_size", "rl.group_size"),
                      ("eps_clip", "rl.eps_clip")):
        val = getattr(args, flag, None)
        if val is not None:
            if flag == "steps" and args.command == "rl":
                key = "rl.iterations"
            overrides[key] = str(val)
    return load_config(args.config, overrides)


def _echo(cfg: Config, seed: int):
    sys.stdout.write(cfg.to_text())
    sys.stdout.write(f"seed = {seed}\n")


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    _echo(cfg, seed)
    out = args.out or cfg.paths.dataset
    parent = os.path.dirname(out)
    if parent and not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory does not exist: {parent!r}")
    stats = ds.generate_dataset(args.n, seed, out, cfg.env, cfg.model)
    sys.stdout.write(stats)
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    _echo(cfg, seed)
    trajs, _ = ds.read_dataset(cfg.paths.dataset)
    opt_state = None
    if args.resume:
        params, opt_state = load_checkpoint(args.resume)
    else:
        params = mdl.init_params(cfg.model, np.random.default_rng(seed))
    out_dir = args.out or cfg.paths.out
    rows = fm.train_stage1(params, trajs, cfg, out_dir, opt_state=opt_state)
    print(rows[-1])
    print(f"wrote {os.path.join(out_dir, 'ckpt_final.aimc')}")
    return 0


def cmd_rl(args) -> int:
    if not args.stage1:
        raise UsageError("rl requires --stage1 CHECKPOINT")
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.rl.seed
    _echo(cfg, seed)
    params, _ = load_checkpoint(args.stage1)
    out_dir = args.out or cfg.paths.out
    before = rl_mod.branch_hash(params)
    rl_mod.post_train(params, cfg, out_dir)
    after = rl_mod.branch_hash(params)
    save_checkpoint(os.path.join(out_dir, "ckpt_rl.aimc"), params)
    print(f"frozen-branch hash before: {before}")
    print(f"frozen-branch hash after:  {after}")
    print(f"wrote {os.path.join(out_dir, 'ckpt_rl.aimc')}")
    return 0


def cmd_eval(args) -> int:
    if not args.ckpt:
        raise UsageError("eval requires --from CHECKPOINT")
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.rl.seed
    _echo(cfg, seed)
    params, _ = load_checkpoint(args.ckpt)
    rows = ["task,n_episodes,success_rate"]
    rates = []
    for task in cfg.env.task_list():
        sr = rl_mod.evaluate(params, task, range(seed, seed + args.n), cfg)
        rows.append(f"{task},{args.n},{sr:.6f}")
        rates.append(sr)
    rows.append(f"mean,{args.n * len(rates)},{np.mean(rates):.6f}")
    report = "\n".join(rows) + "\n"
    sys.stdout.write(report)
    if args.out:
        parent = os.path.dirname(args.out)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(report)
    return 0


def cmd_inspect(args) -> int:
    if not args.ckpt:
        raise UsageError("inspect requires --from CHECKPOINT")
    cfg = _resolve_config(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    _echo(cfg, seed)
    params, _ = load_checkpoint(args.ckpt)
    trajs, _ = ds.read_dataset(cfg.paths.dataset)
    if not (0 <= args.n < len(trajs)):
        raise ds.FormatError(f"trajectory index {args.n} outside dataset")
    mcfg = params.cfg
    win = ds.window_at(trajs[args.n], mcfg.k - 1, mcfg.k, mcfg.h)
    prefix = fm.prefix_for_window(win, params)
    x, m, _ = fm.euler_sample(params, prefix, win.fut_times, 8,
                              np.random.default_rng(seed))

    with open(args.ckpt, "rb") as fh:
        digest = hashlib.sha256(fh.read() + cfg.paths.dataset.encode()
                                + bytes([args.n % 256])).hexdigest()[:8]
    out_dir = args.out or cfg.paths.out
    os.makedirs(out_dir, exist_ok=True)
    panels = {
        "pred_frames": pngout.tile_grid(list(x), cols=len(x)),
        "pred_maps": pngout.tile_grid([pngout.heatmap_rgb(v[:, :, 0]) for v in m],
                                      cols=len(m)),
        "gt_maps": pngout.tile_grid([pngout.heatmap_rgb(v[:, :, 0])
                                     for v in win.fut_maps], cols=len(win.fut_maps)),
    }
    layout = prefix.layout + (
        [tok.Token(tok.FUT_X, t) for t in win.fut_times for _ in range(mcfg.n_patch)]
        + [tok.Token(tok.FUT_M, t) for t in win.fut_times for _ in range(mcfg.n_patch)]
        + [tok.Token(tok.NOISE_M, win.fut_times[0])]
        + [tok.Token(tok.FUT_A, t) for t in win.fut_times])
    allow = mdl.build_intent_causal_mask(layout).allow
    panels["mask"] = pngout.tile_grid([pngout.heatmap_rgb(allow.astype(float))],
                                      cols=1, scale=1)
    for name, img in panels.items():
        path = os.path.join(out_dir, f"inspect_{digest}_{name}.png")
        pngout.write_png(path, img)
        print(f"wrote {path}")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "rl": cmd_rl,
            "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    level = os.environ.get("AIM_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(name)s %(levelname)s %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (gen-data|train|rl|eval|inspect)")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, ds.FormatError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (nc.ContractError, nc.ShapeError, AssertionError, RuntimeError,
            ValueError, KeyError) as e:
        print(f"invariant failure: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
