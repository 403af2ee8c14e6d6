"""Flow-matching training and Euler sampling for the three future streams.

All streams follow the straight rectified-flow path
point(t) = (1 - t) * noise + t * clean and regress the clean endpoint;
the implied velocity at state z is (pred - z) / (1 - t), so the final
Euler step lands exactly on the prediction.
"""
from __future__ import annotations

import logging
import math
import os
import time

import numpy as np

from . import dataset as ds
from . import model as mdl
from . import numcore as nc
from . import tokenizer as tok
from .checkpoint import save_checkpoint
from .config import Config, ModelConfig, TrainConfig
from .model import ModelParams, PrefixContext
from .numcore import Tensor
from .tokenizer import PackedFrame

log = logging.getLogger("aim.flowmatch")


def flow_point(clean: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    return (1.0 - t) * noise + t * clean


def flow_velocity(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return clean - noise


def draw_sample(rng: np.random.Generator, cfg: ModelConfig, horizon: int,
                t_power: float = 1.0, t_mix: float = 0.0):
    """Flow time plus per-modality standard normal noise for one window.

    t is u**t_power with probability 1 - t_mix (low-t emphasis) and uniform
    otherwise, so mid-flow inputs where the noisy sample is already
    informative stay covered.
    """
    t = float(rng.uniform())
    if not (t_mix > 0.0 and float(rng.uniform()) < t_mix):
        t = t ** t_power
    nx = rng.standard_normal((horizon, cfg.canvas_h, cfg.canvas_w, 3))
    nm = rng.standard_normal((horizon, cfg.canvas_h, cfg.canvas_w, 3))
    na = rng.standard_normal((horizon, cfg.d_action))
    return t, nx, nm, na


def prefix_for_window(win: ds.Window, params: ModelParams) -> PrefixContext:
    frames = [PackedFrame(f) for f in win.hist_frames]
    seq = tok.assemble_prefix(frames, list(win.hist_actions), win.task, params,
                              times=win.hist_times)
    return PrefixContext(params, seq, ref_frame=win.hist_frames[-1])


def _frames_to_patches(frames: np.ndarray, patch: int) -> np.ndarray:
    return np.concatenate([tok.patchify(f, patch) for f in frames], axis=0)


def _mse(pred: Tensor, target: np.ndarray,
         weight: np.ndarray | None = None) -> Tensor:
    diff = nc.sub(pred, Tensor(target))
    sq = nc.mul(diff, diff)
    if weight is None:
        return nc.mean_all(sq)
    w = weight / weight.mean()
    return nc.mean_all(nc.mul(sq, Tensor(w)))


def window_loss(params: ModelParams, win: ds.Window, tr_cfg: TrainConfig,
                t: float, noise_x: np.ndarray, noise_m: np.ndarray,
                noise_a: np.ndarray):
    """Joint loss L = L_rgb + lambda_m * L_map + lambda_a * L_act on one window.

    Every term regresses the clean endpoint; frame/map terms work in patch
    space (patchify is a permutation, so this equals the pixel-space MSE).
    """
    cfg = params.cfg
    prefix = prefix_for_window(win, params)
    noisy_x = flow_point(win.fut_frames, noise_x, t)
    noisy_m = flow_point(win.fut_maps, noise_m, t)
    noisy_a = flow_point(win.fut_actions, noise_a, t)
    out = mdl.model_forward(params, prefix, noisy_x, noisy_m, noisy_a, t,
                            win.fut_times,
                            detach_value_for_action=not tr_cfg.act_grad_into_value)
    tgt_x = _frames_to_patches(win.fut_frames, cfg.patch)
    tgt_m = _frames_to_patches(win.fut_maps, cfg.patch)
    ref_x = np.tile(tok.patchify(win.hist_frames[-1], cfg.patch),
                    (len(win.fut_times), 1))
    w_x = 1.0 + tr_cfg.motion_emphasis * np.abs(tgt_x - ref_x)
    w_m = 1.0 + tr_cfg.map_emphasis * tgt_m
    l_rgb = _mse(out.vx_tok, tgt_x, w_x)
    l_map = _mse(out.vm_tok, tgt_m, w_m)
    l_act = _mse(out.a_hat, win.fut_actions)
    total = nc.add(l_rgb, nc.add(nc.scale(l_map, tr_cfg.lambda_m),
                                 nc.scale(l_act, tr_cfg.lambda_a)))
    parts = {"L_rgb": l_rgb.item(), "L_map": l_map.item(), "L_act": l_act.item()}
    return total, parts


def batch_loss(params: ModelParams, wins: list[ds.Window], tr_cfg: TrainConfig,
               rng: np.random.Generator):
    """Mean window loss over a batch; draws flow time and noise per window."""
    totals, parts_acc = [], {"L_rgb": 0.0, "L_map": 0.0, "L_act": 0.0}
    for win in wins:
        t, nx, nm, na = draw_sample(rng, params.cfg, len(win.fut_times),
                                    tr_cfg.t_power, tr_cfg.t_mix)
        total, parts = window_loss(params, win, tr_cfg, t, nx, nm, na)
        totals.append(total)
        for k in parts_acc:
            parts_acc[k] += parts[k] / len(wins)
    stacked = nc.concat_rows([nc.reshape(x, (1, 1)) for x in totals])
    return nc.mean_all(stacked), parts_acc


def euler_sample(params: ModelParams, prefix, future_times, n_steps: int,
                 rng: np.random.Generator,
                 freeze_value_hidden: np.ndarray | None = None):
    """Integrate the learned flow from pure noise over uniform steps.

    Returns (frames, maps, actions): frames/maps clipped to [0, 1],
    actions exactly the final decoded chunk.
    """
    cfg = params.cfg
    if n_steps < 1:
        raise nc.ContractError("n_steps must be >= 1")
    hzn = len(future_times)
    x = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    m = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    a = rng.standard_normal((hzn, cfg.d_action))
    dt = 1.0 / n_steps
    with nc.no_grad():
        for i in range(n_steps):
            t = i * dt
            out = mdl.model_forward(params, prefix, x, m, a, t, future_times,
                                    freeze_value_hidden=freeze_value_hidden)
            x = x + (out.pred_x() - x) * (dt / (1.0 - t))
            m = m + (out.pred_m() - m) * (dt / (1.0 - t))
            a = a + (out.a_hat.data - a) * (dt / (1.0 - t))
    return np.clip(x, 0.0, 1.0), np.clip(m, 0.0, 1.0), a


class Adam:
    """Standard Adam with bias correction; state is serializable."""

    def __init__(self, params: ModelParams, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params: ModelParams, grads: nc.GradientMap,
             names: list[str] | None = None):
        self.step_count += 1
        b1t = 1.0 - self.beta1 ** self.step_count
        b2t = 1.0 - self.beta2 ** self.step_count
        for n in (names if names is not None else list(params)):
            g = grads[n].data
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            upd = (self.m[n] / b1t) / (np.sqrt(self.v[n] / b2t) + self.eps)
            params[n].data -= self.lr * upd

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, st: dict):
        self.step_count = int(st["step"])
        self.m, self.v = dict(st["m"]), dict(st["v"])


def train_stage1(params: ModelParams, trajs: list[ds.Trajectory], cfg: Config,
                 out_dir: str, steps: int | None = None,
                 opt_state: dict | None = None) -> list[str]:
    """Supervised flow-matching stage over expert windows.

    Writes loss.csv and periodic checkpoints under out_dir; returns the
    CSV rows (also left on disk).  Passing a saved optimizer state resumes
    with continuous step numbering.
    """
    tr = cfg.training
    steps = tr.steps if steps is None else steps
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(tr.seed)
    index = ds.all_windows(trajs, cfg.model.k, cfg.model.h)
    if not index:
        raise nc.ContractError("no training windows in dataset")
    opt = Adam(params, tr.lr)
    if opt_state is not None:
        opt.load_state(opt_state)
    horizon = opt.step_count + steps
    ann_pool = rest_pool = None
    if tr.annotated_frac > 0.0:
        flags = [bool(np.max(trajs[ti].maps[t + 1:t + 1 + cfg.model.h]) > 0)
                 for ti, t in index]
        ann_pool = np.flatnonzero(flags)
        rest_pool = np.flatnonzero(np.logical_not(flags))
    rows = ["step,L_total,L_rgb,L_map,L_act"]
    t0 = time.time()
    for _ in range(steps):
        # linear warmup into a cosine decay over the full run
        s = opt.step_count + 1
        ramp = min(1.0, s / max(1, tr.warmup))
        opt.lr = tr.lr * ramp * 0.5 * (1.0 + math.cos(math.pi * (s - 1) / horizon))
        bsz = min(tr.batch, len(index))
        if ann_pool is not None and len(ann_pool) and len(rest_pool):
            n_ann = min(len(ann_pool), int(round(bsz * tr.annotated_frac)))
            n_rest = min(len(rest_pool), bsz - n_ann)
            picks = np.concatenate([
                rng.choice(ann_pool, size=n_ann, replace=False),
                rng.choice(rest_pool, size=n_rest, replace=False)])
        else:
            picks = rng.choice(len(index), size=bsz, replace=False)
        wins = [ds.window_at(trajs[index[i][0]], index[i][1],
                             cfg.model.k, cfg.model.h) for i in picks]
        total, parts = batch_loss(params, wins, tr, rng)
        grads = nc.backward(total, {n: p for n, p in params.items()})
        opt.step(params, grads)
        step = opt.step_count
        rows.append(f"{step},{total.item():.6f},{parts['L_rgb']:.6f},"
                    f"{parts['L_map']:.6f},{parts['L_act']:.6f}")
        if step % 50 == 0:
            log.info("step %d loss %.4f (%.1fs)", step,
                     total.item(), time.time() - t0)
        if step % tr.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{step}.aimc"),
                            params, opt.state())
    save_checkpoint(os.path.join(out_dir, "ckpt_final.aimc"), params, opt.state())
    with open(os.path.join(out_dir, "loss.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return rows
