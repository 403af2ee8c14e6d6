"""GRPO post-training on dense projected-value rewards.

The policy is a diagonal Gaussian around the deterministic planned action
mean, with a learnable log standard deviation.  Groups of episodes share
an environment seed; returns are normalized within the group into
advantages and only the action branch is updated, so the world model and
value head stay frozen.
"""
from __future__ import annotations

import hashlib
import logging
import os

import numpy as np

from . import model as mdl
from . import numcore as nc
from . import rollout as ro
from . import simenv
from . import tokenizer as tok
from .config import Config
from .flowmatch import Adam
from .model import ModelParams
from .numcore import Tensor

log = logging.getLogger("aim.rl")

FROZEN_BRANCHES = ("video", "value", "enc")
LOG_2PI = float(np.log(2.0 * np.pi))


def bilinear(grid: np.ndarray, u: float, v: float) -> float:
    """Sample a 2-D grid at continuous (u, v); u indexes columns, v rows."""
    h, w = grid.shape
    u = float(np.clip(u, 0.0, w - 1.0))
    v = float(np.clip(v, 0.0, h - 1.0))
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    top = grid[v0, u0] * (1.0 - fu) + grid[v0, u1] * fu
    bot = grid[v1, u0] * (1.0 - fu) + grid[v1, u1] * fu
    return float(top * (1.0 - fv) + bot * fv)


def dense_reward(p: np.ndarray, value_map: np.ndarray, cams, cfg,
                 out_of_view_reward: float = 0.0) -> float:
    """Max over views of the predicted value map sampled at the projection
    of world point p; falls back to out_of_view_reward when p is invisible
    in every view.  Always in [0, 1] (resp. the fallback value)."""
    best = None
    for cam, slot in zip(cams, tok._view_slots(cfg)):
        try:
            u, v, _ = simenv.project(p, cam)
        except simenv.OutOfViewError:
            continue
        if not (0.0 <= u <= cam.size - 1 and 0.0 <= v <= cam.size - 1):
            continue
        val = bilinear(value_map[slot][:, :, 0], u, v)
        best = val if best is None else max(best, val)
    if best is None:
        return float(out_of_view_reward)
    return float(np.clip(best, 0.0, 1.0))


def episode_return(trace: ro.EpisodeTrace, cfg: Config):
    """R = lambda_d * sum of per-step dense rewards + lambda_s * success."""
    dense = 0.0
    for rec in trace.steps:
        p = np.array([rec.state.ee[rec.arm][0], rec.state.ee[rec.arm][1], 0.0])
        cams = simenv.cameras_for(rec.state, cfg.model.view)
        dense += dense_reward(p, rec.map_hat, cams, cfg.model,
                              cfg.rl.out_of_view_reward)
    total = cfg.rl.lambda_d * dense + cfg.rl.lambda_s * float(trace.success)
    return total, dense


def chunk_mean(params: ModelParams, chunk: ro.ChunkRecord, n_steps: int) -> Tensor:
    """Replan the chunk's action mean on the tape.

    Arithmetic mirrors plan_chunk exactly (same seeds, same update order),
    so the result is bit-identical; only action-branch ops are recorded.
    """
    cfg = params.cfg
    rng = np.random.default_rng(chunk.noise_seed)
    hzn = len(chunk.future_times)
    x = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    m = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    a = Tensor(np.zeros((hzn, cfg.d_action)))
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = i * dt
        out = mdl.model_forward(params, chunk.prefix, x, m, a, t,
                                chunk.future_times, action_only_grad=True)
        x = x + (out.pred_x() - x) * (dt / (1.0 - t))
        m = m + (out.pred_m() - m) * (dt / (1.0 - t))
        a = nc.add(a, nc.scale(nc.sub(out.a_hat, a), dt / (1.0 - t)))
    return a


def chunk_logprobs(params: ModelParams, chunk: ro.ChunkRecord,
                   n_steps: int) -> list[Tensor]:
    """Gaussian log-probability of each executed (pre-clip) sample."""
    if chunk.a_samp is None:
        raise nc.ContractError("chunk has no recorded action samples")
    mean = chunk_mean(params, chunk, n_steps)
    log_sigma = params["action.log_sigma"]
    inv_sigma = nc.exp(nc.scale(log_sigma, -1.0))
    sum_log_sigma = nc.sum_all(log_sigma)
    d = params.cfg.d_action
    out = []
    for j in range(len(chunk.executed)):
        diff = nc.sub(Tensor(chunk.a_samp[j][None, :]),
                      nc.slice_rows(mean, j, j + 1))
        z = nc.mul(diff, inv_sigma)
        lp = nc.add(nc.scale(nc.sum_all(nc.mul(z, z)), -0.5),
                    nc.add(nc.scale(sum_log_sigma, -1.0),
                           Tensor(-0.5 * d * LOG_2PI)))
        out.append(lp)
    return out


def sample_episode(params: ModelParams, task: str, env_seed: int, cfg: Config,
                   noise_seed: int, explore_seed: int) -> ro.EpisodeTrace:
    """One exploratory rollout with old-policy log-probs recorded."""
    rng = np.random.default_rng([explore_seed])
    trace = ro.rollout_episode(params, task, env_seed, cfg, noise_seed,
                               explore_rng=rng)
    with nc.no_grad():
        for chunk in trace.chunks:
            lps = chunk_logprobs(params, chunk, cfg.rl.n_steps_sample)
            chunk.logprob_old = np.array([lp.item() for lp in lps])
    return trace


def group_rollout(params: ModelParams, task: str, env_seed: int, cfg: Config,
                  iter_seed: int):
    """G episodes from the same initial state, different exploration noise."""
    traces, returns = [], []
    for g in range(cfg.rl.group_size):
        tr = sample_episode(params, task, env_seed, cfg,
                            noise_seed=iter_seed * 7919 + g,
                            explore_seed=iter_seed * 104_729 + g)
        total, _ = episode_return(tr, cfg)
        traces.append(tr)
        returns.append(total)
    return traces, np.array(returns)


def grpo_advantage(returns: np.ndarray) -> np.ndarray:
    return (returns - returns.mean()) / (returns.std() + 1e-8)


def grpo_loss(params: ModelParams, traces, advantages: np.ndarray,
              cfg: Config) -> Tensor:
    """Clipped surrogate: -mean over steps of min(rho*A, clip(rho)*A)."""
    eps = cfg.rl.eps_clip
    terms = []
    for trace, adv in zip(traces, advantages):
        k = 0
        for chunk in trace.chunks:
            lps = chunk_logprobs(params, chunk, cfg.rl.n_steps_sample)
            for j, lp in enumerate(lps):
                rho = nc.exp(nc.sub(lp, Tensor(chunk.logprob_old[j])))
                r = rho.item()
                s1 = r * adv
                s2 = float(np.clip(r, 1.0 - eps, 1.0 + eps)) * adv
                # the clipped branch is constant, so it carries no gradient
                terms.append(nc.scale(rho, adv) if s1 <= s2 else Tensor(s2))
                k += 1
    stacked = nc.concat_rows([nc.reshape(t, (1, 1)) for t in terms])
    return nc.scale(nc.mean_all(stacked), -1.0)


def branch_hash(params: ModelParams, branches=FROZEN_BRANCHES) -> str:
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        if ModelParams.branch_of(name) in branches:
            h.update(name.encode())
            h.update(params[name].data.tobytes())
    return h.hexdigest()


def evaluate(params: ModelParams, task: str, seeds, cfg: Config) -> float:
    """Deterministic success rate under the policy mean."""
    wins = 0
    for s in seeds:
        tr = ro.rollout_episode(params, task, int(s), cfg, noise_seed=int(s))
        wins += int(tr.success)
    return wins / len(seeds)


def post_train(params: ModelParams, cfg: Config, out_dir: str,
               tasks: list[str] | None = None,
               iterations: int | None = None) -> list[str]:
    """GRPO loop: sample a group, normalize returns, one clipped update.

    Only action-branch parameters move; the frozen branches are hash
    checked.  Writes reward.csv under out_dir and returns its rows.
    """
    os.makedirs(out_dir, exist_ok=True)
    tasks = tasks if tasks is not None else cfg.env.task_list()
    iters = cfg.rl.iterations if iterations is None else iterations
    frozen_before = branch_hash(params)
    action_names = params.branch_names("action")
    opt = Adam(params, cfg.rl.lr)
    rng = np.random.default_rng(cfg.rl.seed)
    rows = ["iter,mean_return,mean_dense,success_rate"]
    for it in range(1, iters + 1):
        task = tasks[(it - 1) % len(tasks)]
        env_seed = int(rng.integers(0, 2**31 - 1))
        iter_seed = int(rng.integers(0, 2**31 - 1))
        traces, returns = group_rollout(params, task, env_seed, cfg, iter_seed)
        adv = grpo_advantage(returns)
        if returns.std() > 0.0:
            loss = grpo_loss(params, traces, adv, cfg)
            grads = nc.backward(loss, {n: params[n] for n in action_names})
            opt.step(params, grads, names=action_names)
        dense = float(np.mean([episode_return(t, cfg)[1] for t in traces]))
        sr = float(np.mean([t.success for t in traces]))
        rows.append(f"{it},{returns.mean():.6f},{dense:.6f},{sr:.6f}")
        if it % 10 == 0 or it == iters:
            log.info("iter %d/%d task %s return %.3f sr %.2f",
                     it, iters, task, returns.mean(), sr)
    if branch_hash(params) != frozen_before:
        raise nc.ContractError("frozen branches changed during post-training")
    with open(os.path.join(out_dir, "reward.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return rows
