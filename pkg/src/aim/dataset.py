"""Trajectory recording, value-map labeling, and the binary dataset format.

File layout (little-endian):
    header:  magic "AIMD", u32 version, u32 n_traj,
             u32 canvas_h, u32 canvas_w, u32 d_a, u32 h, u32 k
    per trajectory:
        u32 task_id, u32 length,
        3 cameras x 15 f32 (focal, cx, cy, position[3], rotation[9]),
        per step: frame f32[H][W][3], value map f32[H][W][3],
                  action f32[d_a], success u8
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import simenv
from .config import EnvConfig, ModelConfig, TASK_NAMES
from .simenv import Camera, ContactEvent

log = logging.getLogger("aim.dataset")

MAGIC = b"AIMD"
VERSION = 1

DILATION_STEPS = 4  # label this many approach steps before each event


class FormatError(ValueError):
    """Dataset file does not match the documented schema."""


@dataclass
class Trajectory:
    task: int
    frames: np.ndarray    # (T, H, W, 3)
    maps: np.ndarray      # (T, H, W, 3)
    actions: np.ndarray   # (T, d_a)
    success: np.ndarray   # (T,) uint8
    cams: tuple[Camera, Camera, Camera]
    contacts: list[ContactEvent] = field(default_factory=list)

    def __len__(self):
        return self.frames.shape[0]


def record_episode(task: str, seed: int, env_cfg: EnvConfig,
                   model_cfg: ModelConfig, tail_steps: int | None = None) -> Trajectory:
    """Run the scripted expert, annotate contact events, and assemble labels.

    After success, a few zero-action tail steps are recorded so event frames
    can still appear as prediction targets of earlier windows.
    """
    tail = model_cfg.h if tail_steps is None else tail_steps
    state = simenv.env_reset(task, seed)
    cams0 = simenv.cameras_for(state, model_cfg.view)
    frames, actions, successes = [], [], []
    post_cams, post_objects, events, releases = [], [], [], []

    done = False
    remaining_tail = tail
    for t in range(env_cfg.max_steps + tail):
        frames.append(simenv.observe(state, model_cfg).pixels)
        a = np.zeros(4) if done else simenv.expert_action(state, env_cfg)
        held_before = [o.held_by for o in state.objects]
        state, evs, done, _ = simenv.env_step(state, a, env_cfg)
        actions.append(a)
        successes.append(1 if state.success else 0)
        post_cams.append(simenv.cameras_for(state, model_cfg.view))
        post_objects.append([(o.center.copy(), float(np.linalg.norm(o.velocity)))
                             for o in state.objects])
        events.extend(evs)
        for i, o in enumerate(state.objects):
            if held_before[i] is not None and o.held_by is None:
                releases.append((t, i))
        if done:
            remaining_tail -= 1
            if remaining_tail <= 0:
                break
    if not state.success:
        raise RuntimeError(f"expert failed on task {task!r} seed {seed}")

    T = len(frames)
    maps = np.zeros((T, model_cfg.canvas_h, model_cfg.canvas_w, 3))
    labeled: list[tuple[int, np.ndarray]] = []
    for ev in events:
        if ev.kind == "grasp":
            vm = simenv.annotate_pick(ev, post_cams[ev.step], model_cfg,
                                      env_cfg.sigma_world)
            labeled.append((ev.step, vm.values))
    for (rstep, oi) in releases:
        segment = [(post_objects[u][oi][0], post_objects[u][oi][1], post_cams[u])
                   for u in range(rstep, T)]
        try:
            vm, estep = simenv.annotate_place(segment, rstep,
                                              state.objects[oi].radius, model_cfg,
                                              env_cfg.sigma_world, env_cfg.v_stable)
        except simenv.AnnotationFailure as exc:
            raise simenv.AnnotationFailure(f"task {task!r} seed {seed}: {exc}")
        labeled.append((estep, vm.values))
    for estep, vm in sorted(labeled, key=lambda x: x[0]):
        for u in range(max(0, estep - DILATION_STEPS), min(estep + 1, T)):
            maps[u] = vm

    return Trajectory(task=simenv.task_id(task),
                      frames=np.stack(frames),
                      maps=maps,
                      actions=np.stack(actions),
                      success=np.array(successes, dtype=np.uint8),
                      cams=cams0, contacts=events)


def _write_camera(fh, cam: Camera):
    vals = [cam.focal, cam.cx, cam.cy, *cam.position, *cam.rotation.reshape(-1)]
    fh.write(struct.pack("<15f", *vals))


def _read_camera(fh) -> Camera:
    vals = struct.unpack("<15f", fh.read(60))
    return Camera(np.array(vals[3:6], dtype=np.float64),
                  np.array(vals[6:15], dtype=np.float64).reshape(3, 3),
                  float(vals[0]), float(vals[1]), float(vals[2]))


def write_dataset(path: str, trajectories: list[Trajectory], cfg: ModelConfig):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<7I", VERSION, len(trajectories), cfg.canvas_h,
                             cfg.canvas_w, cfg.d_action, cfg.h, cfg.k))
        for tr in trajectories:
            fh.write(struct.pack("<2I", tr.task, len(tr)))
            for cam in tr.cams:
                _write_camera(fh, cam)
            for t in range(len(tr)):
                fh.write(tr.frames[t].astype("<f4").tobytes())
                fh.write(tr.maps[t].astype("<f4").tobytes())
                fh.write(tr.actions[t].astype("<f4").tobytes())
                fh.write(struct.pack("<B", int(tr.success[t])))


def read_dataset(path: str) -> tuple[list[Trajectory], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise FormatError(f"{path}: bad magic")
        version, n_traj, ch, cw, da, h, k = struct.unpack("<7I", fh.read(28))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        meta = {"n_traj": n_traj, "canvas_h": ch, "canvas_w": cw,
                "d_a": da, "h": h, "k": k}
        trajs = []
        frame_n = ch * cw * 3
        for _ in range(n_traj):
            task, length = struct.unpack("<2I", fh.read(8))
            cams = tuple(_read_camera(fh) for _ in range(3))
            frames = np.empty((length, ch, cw, 3))
            maps = np.empty((length, ch, cw, 3))
            actions = np.empty((length, da))
            succ = np.empty(length, dtype=np.uint8)
            for t in range(length):
                frames[t] = np.frombuffer(fh.read(4 * frame_n), "<f4").reshape(ch, cw, 3)
                maps[t] = np.frombuffer(fh.read(4 * frame_n), "<f4").reshape(ch, cw, 3)
                actions[t] = np.frombuffer(fh.read(4 * da), "<f4")
                succ[t] = struct.unpack("<B", fh.read(1))[0]
            trajs.append(Trajectory(task, frames, maps, actions, succ, cams))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return trajs, meta


def dataset_stats(trajectories: list[Trajectory]) -> str:
    """Per-task stats table as CSV text."""
    lines = ["task,n_traj,success_rate,mean_length,n_annotated_steps"]
    for tid, name in enumerate(TASK_NAMES):
        rows = [t for t in trajectories if t.task == tid]
        if not rows:
            continue
        sr = float(np.mean([t.success[-1] for t in rows]))
        ml = float(np.mean([len(t) for t in rows]))
        ann = int(sum((t.maps.reshape(len(t), -1).max(axis=1) > 0).sum() for t in rows))
        lines.append(f"{name},{len(rows)},{sr},{ml},{ann}")
    return "\n".join(lines) + "\n"


def generate_dataset(n_traj: int, seed: int, out_path: str,
                     env_cfg: EnvConfig | None = None,
                     model_cfg: ModelConfig | None = None) -> str:
    """Round-robin the task set, run experts, write the file; returns stats CSV."""
    env_cfg = env_cfg or EnvConfig()
    model_cfg = model_cfg or ModelConfig()
    tasks = env_cfg.task_list()
    trajs = []
    for i in range(n_traj):
        task = tasks[i % len(tasks)]
        trajs.append(record_episode(task, seed * 1_000_003 + i, env_cfg, model_cfg))
    write_dataset(out_path, trajs, model_cfg)
    return dataset_stats(trajs)


# ---------------------------------------------------------------------------
# training windows

@dataclass
class Window:
    """One supervised sample: observation/action history plus the future chunk."""
    hist_frames: np.ndarray   # (n_hist, H, W, 3), n_hist <= k
    hist_actions: np.ndarray  # (n_hist - 1, d_a)
    hist_times: list[int]
    fut_frames: np.ndarray    # (h, H, W, 3)
    fut_maps: np.ndarray      # (h, H, W, 3)
    fut_actions: np.ndarray   # (h, d_a)
    fut_times: list[int]
    task: int


def window_at(traj: Trajectory, t: int, k: int, h: int) -> Window:
    if not (0 <= t and t + h <= len(traj) - 1):
        raise FormatError(f"window at t={t} outside trajectory of length {len(traj)}")
    lo = max(0, t - k + 1)
    return Window(
        hist_frames=traj.frames[lo:t + 1],
        hist_actions=traj.actions[lo:t],
        hist_times=list(range(lo, t + 1)),
        fut_frames=traj.frames[t + 1:t + 1 + h],
        fut_maps=traj.maps[t + 1:t + 1 + h],
        fut_actions=traj.actions[t:t + h],
        fut_times=list(range(t + 1, t + 1 + h)),
        task=traj.task)


def all_windows(trajs: list[Trajectory], k: int, h: int) -> list[tuple[int, int]]:
    """(trajectory index, t) pairs of every valid window start."""
    out = []
    for i, tr in enumerate(trajs):
        out.extend((i, t) for t in range(0, len(tr) - h))
    return out
