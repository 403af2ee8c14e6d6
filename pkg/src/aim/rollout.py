"""Autoregressive closed-loop rollout with a sliding-window KV cache.

The cache holds per-layer keys/values for committed prefix tokens
(observation frames, executed actions, the instruction) and exposes the
same interface as a freshly assembled prefix, so planning a chunk never
re-encodes history.  Old frames are evicted once the window exceeds the
configured history length.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import flowmatch as fm
from . import model as mdl
from . import numcore as nc
from . import simenv
from . import tokenizer as tok
from .config import Config
from .model import ModelParams
from .numcore import Tensor
from .tokenizer import ACT, LANG, OBS, PackedFrame, Token

log = logging.getLogger("aim.rollout")


class CacheSnapshot:
    """Immutable view of a cache state; drop-in prefix for model_forward."""

    def __init__(self, layout, kv_pairs, lang, ref_frame=None):
        self.layout = layout
        self._kv = kv_pairs
        self.lang = lang
        self.ref_frame = ref_frame

    def kv(self, layer: int):
        return self._kv[layer]


class KVCache:
    """Sliding-window prefix cache.

    Keys/values are stored per committed token block and concatenated in
    the canonical prefix order (observations by time, actions by time,
    language) so cached planning matches the uncached forward pass.
    """

    def __init__(self, params: ModelParams, instr: int):
        self.params = params
        self.cfg = params.cfg
        self._obs: list[tuple[int, list]] = []   # (time, per-layer (k, v))
        self._act: list[tuple[int, list]] = []
        self.ref_frame: np.ndarray | None = None
        with nc.no_grad():
            lang = tok._with_stream_time(tok.embed_instruction(instr, params),
                                         LANG, 0, params, False)
            self._lang_kv = self._project(lang)
        self.lang = Tensor(lang.data)

    def _project(self, emb: Tensor) -> list:
        out = []
        with nc.no_grad():
            for i in range(self.cfg.layers):
                pre = f"video.l{i}."
                a = nc.layer_norm(emb, self.params[pre + "ln1_g"],
                                  self.params[pre + "ln1_b"])
                out.append((nc.matmul(a, self.params[pre + "wk"]).data,
                            nc.matmul(a, self.params[pre + "wv"]).data))
        return out

    def append_frame(self, frame: PackedFrame, time: int):
        with nc.no_grad():
            emb = tok.obs_tokens(frame, time, self.params)
        self._obs.append((time, self._project(emb)))
        self.ref_frame = np.asarray(frame.pixels).copy()
        while len(self._obs) > self.cfg.k:
            self._obs.pop(0)
        while len(self._act) > len(self._obs) - 1:
            self._act.pop(0)

    def append_action(self, a: np.ndarray, time: int):
        with nc.no_grad():
            emb = tok._with_stream_time(tok.embed_action(a, self.params),
                                        ACT, time, self.params, False)
        self._act.append((time, self._project(emb)))

    @property
    def layout(self) -> list[Token]:
        out = [Token(OBS, t) for t, _ in self._obs for _ in range(self.cfg.n_patch)]
        out += [Token(ACT, t) for t, _ in self._act]
        out += [Token(LANG, 0) for _ in range(self.cfg.n_lang)]
        return out

    def kv(self, layer: int):
        blocks = [kv[layer] for _, kv in self._obs] + \
                 [kv[layer] for _, kv in self._act] + [self._lang_kv[layer]]
        k = np.concatenate([b[0] for b in blocks], axis=0)
        v = np.concatenate([b[1] for b in blocks], axis=0)
        return Tensor(k), Tensor(v)

    def snapshot(self) -> CacheSnapshot:
        layers = [(Tensor(k.data.copy()), Tensor(v.data.copy()))
                  for k, v in (self.kv(i) for i in range(self.cfg.layers))]
        ref = None if self.ref_frame is None else self.ref_frame.copy()
        return CacheSnapshot(self.layout, layers, Tensor(self.lang.data.copy()), ref)


def plan_chunk(params: ModelParams, prefix, future_times, n_steps: int,
               noise_seed: int):
    """Deterministic plan: Euler integration with seeded frame/map noise
    and the action stream started from zeros.

    Returns (frames, maps, actions); the action output is the policy mean.
    """
    cfg = params.cfg
    rng = np.random.default_rng(noise_seed)
    hzn = len(future_times)
    x = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    m = rng.standard_normal((hzn, cfg.canvas_h, cfg.canvas_w, 3))
    a = np.zeros((hzn, cfg.d_action))
    dt = 1.0 / n_steps
    with nc.no_grad():
        for i in range(n_steps):
            t = i * dt
            out = mdl.model_forward(params, prefix, x, m, a, t, future_times)
            x = x + (out.pred_x() - x) * (dt / (1.0 - t))
            m = m + (out.pred_m() - m) * (dt / (1.0 - t))
            a = a + (out.a_hat.data - a) * (dt / (1.0 - t))
    return np.clip(x, 0.0, 1.0), np.clip(m, 0.0, 1.0), a


@dataclass
class ChunkRecord:
    """Everything needed to replan this chunk bit-identically later."""
    prefix: CacheSnapshot
    future_times: list[int]
    noise_seed: int
    mean: np.ndarray          # (h, d_action) planned action mean
    maps: np.ndarray          # (h, canvas, 3) predicted value maps
    eps: np.ndarray | None    # exploration noise actually applied
    executed: np.ndarray      # (n_exec, d_action) actions sent to the env
    a_samp: np.ndarray | None = None    # pre-clip samples, (h, d_action)
    logprob_old: np.ndarray | None = None


@dataclass
class StepRecord:
    state: simenv.WorldState  # post-transition state
    action: np.ndarray
    map_hat: np.ndarray       # predicted value map for this step
    arm: str


@dataclass
class EpisodeTrace:
    task: str
    seed: int
    success: bool
    steps: list[StepRecord] = field(default_factory=list)
    chunks: list[ChunkRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


def rollout_episode(params: ModelParams, task: str, seed: int, cfg: Config,
                    noise_seed: int, explore_rng: np.random.Generator | None = None,
                    max_steps: int | None = None) -> EpisodeTrace:
    """Closed-loop episode under the cached policy.

    Plans a chunk, executes the first ``rl.execute_horizon`` actions, then
    replans from the updated cache.  With explore_rng set, executed actions
    are the mean plus sigma-scaled Gaussian noise (recorded for reuse).
    """
    rl = cfg.rl
    n_exec = max(1, min(rl.execute_horizon, cfg.model.h))
    limit = rl.max_steps if max_steps is None else max_steps
    state = simenv.env_reset(task, seed)
    cache = KVCache(params, simenv.task_id(task))
    cache.append_frame(simenv.observe(state, cfg.model), 0)
    trace = EpisodeTrace(task, seed, False)
    sigma = np.exp(params["action.log_sigma"].data)
    chunk_i = 0

    while state.step_idx < limit and not state.success:
        t_now = state.step_idx
        fut_times = list(range(t_now + 1, t_now + 1 + cfg.model.h))
        snap = cache.snapshot()
        seed_i = noise_seed * 100_003 + chunk_i
        _, maps, mean = plan_chunk(params, snap, fut_times, rl.n_steps_sample, seed_i)
        eps = None
        a_samp = mean
        if explore_rng is not None:
            eps = explore_rng.standard_normal(mean.shape)
            a_samp = mean + sigma * eps
        acts = np.clip(a_samp, -1.0, 1.0)
        executed = []
        for j in range(n_exec):
            a = acts[j]
            arm = "right" if a[3] >= 0 else "left"
            state, _, done, _ = simenv.env_step(state, a, cfg.env)
            cache.append_action(a, t_now + j)
            cache.append_frame(simenv.observe(state, cfg.model), t_now + j + 1)
            trace.steps.append(StepRecord(state, a, maps[j], arm))
            executed.append(a)
            if done or state.step_idx >= limit:
                break
        trace.chunks.append(ChunkRecord(snap, fut_times, seed_i, mean, maps,
                                        eps, np.stack(executed), a_samp=a_samp))
        chunk_i += 1
    trace.success = state.success
    return trace


def uncached_prefix(params: ModelParams, frames, actions, instr: int,
                    times) -> mdl.PrefixContext:
    """Reference prefix built from scratch; used to validate the cache."""
    seq = tok.assemble_prefix([PackedFrame(f) for f in frames],
                              list(actions), instr, params, times=times)
    ref = np.asarray(frames[-1]) if len(frames) else None
    return mdl.PrefixContext(params, seq, ref_frame=ref)
