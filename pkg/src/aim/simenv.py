"""Deterministic 2D tabletop manipulation simulator.

Two planar point grippers on a [-1, 1]^2 table, disc objects, disc target
regions, three downward-looking pinhole cameras (head fixed above the
table center, wrist cameras tracking their end-effectors).  Contact events
feed the pick/place value-map annotation pipeline.

Actions are 4-vectors in [-1, 1]: x-velocity, y-velocity, gripper command
(negative closes, positive opens), arm selector (negative = left arm,
non-negative = right arm).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import EnvConfig, ModelConfig, TASK_NAMES
from .numcore import ContractError
from .tokenizer import PackedFrame, pack_tpose

log = logging.getLogger("aim.simenv")

TABLE_LIMIT = 0.95
GRASP_MARGIN = 0.05
REACH_TOL = 0.12
FRICTION = 0.5
# sprites must stay clearly visible at the 16px head view (~0.14 world
# units per pixel), so discs are sized well above one pixel
EE_RADIUS = 0.12
N_CONTACT_POINTS = 5
N_FOOTPRINT_POINTS = 8

COLORS = {
    "object": (0.9, 0.2, 0.2),
    "button": (0.95, 0.65, 0.1),
    "target": (0.1, 0.7, 0.1),
    "gripper_open": (0.25, 0.35, 0.95),
    "gripper_closed": (0.45, 0.85, 0.95),
}


class VocabularyError(KeyError):
    """Unknown task identifier."""


class OutOfViewError(ValueError):
    """Point has non-positive depth in the camera frame."""


class AnnotationFailure(RuntimeError):
    """A trajectory segment yields no valid annotation."""


# canonical downward-looking orientation: image x = world x, image y = -world y
DOWN_ROT = np.array([[1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0],
                     [0.0, 0.0, -1.0]])


@dataclass
class Camera:
    position: np.ndarray      # (3,) world units
    rotation: np.ndarray      # (3, 3) world -> camera
    focal: float
    cx: float
    cy: float
    size: int = 16


def head_camera(view: int = 16) -> Camera:
    c = (view - 1) / 2.0
    return Camera(np.array([0.0, 0.0, 2.0]), DOWN_ROT.copy(), 14.0, c, c, view)


def wrist_camera(ee_xy: np.ndarray, view: int = 16) -> Camera:
    c = (view - 1) / 2.0
    pos = np.array([ee_xy[0], ee_xy[1], 0.8])
    return Camera(pos, DOWN_ROT.copy(), 20.0, c, c, view)


def project(point: np.ndarray, cam: Camera):
    """Pinhole projection: continuous (u, v) pixel coordinates plus depth."""
    p = cam.rotation @ (np.asarray(point, dtype=np.float64) - cam.position)
    if p[2] <= 0.0:
        raise OutOfViewError("point behind the camera")
    u = cam.focal * p[0] / p[2] + cam.cx
    v = cam.focal * p[1] / p[2] + cam.cy
    return u, v, p[2]


@dataclass
class ObjectState:
    center: np.ndarray          # (2,)
    radius: float
    graspable: bool = True
    is_button: bool = False
    held_by: str | None = None
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    awaiting_place: bool = False
    placed: bool = False


@dataclass
class ContactEvent:
    kind: str                   # "grasp" | "place"
    points: list[np.ndarray]    # 3-vectors on the contacting surfaces
    step: int
    object_id: int


@dataclass
class WorldState:
    task: str
    ee: dict[str, np.ndarray]
    aperture: dict[str, float]
    ee_velocity: dict[str, np.ndarray]
    objects: list[ObjectState]
    target: np.ndarray | None
    target_radius: float
    step_idx: int = 0
    success: bool = False
    handover_source: str | None = None

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)


def task_id(task: str) -> int:
    if task not in TASK_NAMES:
        raise VocabularyError(f"unknown task {task!r}")
    return TASK_NAMES.index(task)


def _sample_separated(rng, existing: list[np.ndarray], min_sep: float,
                      lo: float = -0.65, hi: float = 0.65) -> np.ndarray:
    for _ in range(1000):
        p = rng.uniform(lo, hi, size=2)
        if all(np.linalg.norm(p - q) >= min_sep for q in existing):
            return p
    raise RuntimeError("could not place entities with required separation")


def _sample_banded(rng, anchors: list[np.ndarray], r_min: float, r_max: float,
                   lo: float = -0.65, hi: float = 0.65) -> np.ndarray:
    """Uniform sample whose distance to the NEAREST anchor lies in a band.

    Keeps approach phases a few control steps long, so interaction events
    sit within a model chunk horizon of the episode start.
    """
    for _ in range(5000):
        p = rng.uniform(lo, hi, size=2)
        d = min(np.linalg.norm(p - q) for q in anchors)
        if r_min <= d <= r_max:
            return p
    raise RuntimeError("could not place entity within the distance band")


def env_reset(task: str, seed: int) -> WorldState:
    if task not in TASK_NAMES:
        raise VocabularyError(f"unknown task {task!r}")
    rng = np.random.default_rng([seed, task_id(task)])
    ee = {"left": np.array([-0.55, -0.45]), "right": np.array([0.55, -0.45])}
    state = WorldState(task=task, ee={k: v.copy() for k, v in ee.items()},
                       aperture={"left": 1.0, "right": 1.0},
                       ee_velocity={"left": np.zeros(2), "right": np.zeros(2)},
                       objects=[], target=None, target_radius=0.14)
    taken = [ee["left"], ee["right"]]

    if task == "reach":
        state.target = _sample_banded(rng, taken, 0.3, 0.55)
        state.target_radius = REACH_TOL
    elif task == "pick":
        c = _sample_banded(rng, taken, 0.3, 0.55)
        state.objects.append(ObjectState(center=c, radius=0.11))
    elif task == "press":
        c = _sample_banded(rng, taken, 0.3, 0.55)
        state.objects.append(ObjectState(center=c, radius=0.12,
                                         graspable=False, is_button=True))
    elif task in ("place", "pick_and_place"):
        state.target = _sample_banded(rng, taken, 0.3, 0.55)
        taken = taken + [state.target]
        if task == "place":
            arm = "left" if state.target[0] < 0 else "right"
            obj = ObjectState(center=state.ee[arm].copy(), radius=0.11, held_by=arm)
            state.aperture[arm] = 0.0
            state.objects.append(obj)
        else:
            c = _sample_separated(rng, taken, 0.35)
            state.objects.append(ObjectState(center=c, radius=0.11))
    elif task == "handover":
        obj = ObjectState(center=state.ee["left"].copy(), radius=0.11, held_by="left")
        state.aperture["left"] = 0.0
        state.objects.append(obj)
        state.handover_source = "left"
    return state


def _check_success(state: WorldState) -> bool:
    t = state.task
    if t == "reach":
        return any(np.linalg.norm(p - state.target) < REACH_TOL
                   for p in state.ee.values())
    if t == "pick":
        return any(o.held_by is not None for o in state.objects)
    if t in ("place", "pick_and_place"):
        o = state.objects[0]
        return (o.held_by is None and o.placed
                and np.linalg.norm(o.center - state.target) < state.target_radius)
    if t == "press":
        o = state.objects[0]
        return any(np.linalg.norm(p - o.center) < o.radius + GRASP_MARGIN
                   and state.aperture[arm] < 0.5
                   for arm, p in state.ee.items())
    if t == "handover":
        return state.objects[0].held_by == "right" and state.handover_source == "left"
    raise VocabularyError(t)


def _grasp_points(obj: ObjectState, ee: np.ndarray) -> list[np.ndarray]:
    """Boundary samples on the arc of the disc facing the gripper."""
    d = ee - obj.center
    base = np.arctan2(d[1], d[0]) if np.linalg.norm(d) > 1e-12 else 0.0
    angles = base + np.linspace(-0.7, 0.7, N_CONTACT_POINTS)
    return [np.array([obj.center[0] + obj.radius * np.cos(a),
                      obj.center[1] + obj.radius * np.sin(a), 0.0])
            for a in angles]


def footprint_points(center: np.ndarray, radius: float) -> list[np.ndarray]:
    """Contact patch of a resting disc: boundary samples of its footprint."""
    angles = np.linspace(0.0, 2.0 * np.pi, N_FOOTPRINT_POINTS, endpoint=False)
    return [np.array([center[0] + radius * np.cos(a),
                      center[1] + radius * np.sin(a), 0.0]) for a in angles]


def env_step(state: WorldState, action: np.ndarray,
             cfg: EnvConfig | None = None):
    """Pure kinematic step.  Returns (state', contact events, done, success)."""
    cfg = cfg or EnvConfig()
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    s = state.copy()
    events: list[ContactEvent] = []
    arm = "right" if a[3] >= 0 else "left"

    old_pos = s.ee[arm].copy()
    s.ee[arm] = np.clip(s.ee[arm] + a[:2] * cfg.max_speed, -TABLE_LIMIT, TABLE_LIMIT)
    for other in s.ee:
        s.ee_velocity[other] = np.zeros(2)
    s.ee_velocity[arm] = s.ee[arm] - old_pos

    ap_old = s.aperture[arm]
    s.aperture[arm] = float(np.clip(ap_old + 0.6 * a[2], 0.0, 1.0))
    closing = ap_old >= 0.5 > s.aperture[arm]
    opening = ap_old < 0.5 <= s.aperture[arm]

    # held objects track their holder exactly
    for obj in s.objects:
        if obj.held_by is not None:
            obj.center = s.ee[obj.held_by].copy()
            obj.velocity = s.ee_velocity[obj.held_by].copy()

    if closing:
        for i, obj in enumerate(s.objects):
            if obj.held_by is not None:
                continue
            if np.linalg.norm(s.ee[arm] - obj.center) <= obj.radius + GRASP_MARGIN:
                events.append(ContactEvent("grasp", _grasp_points(obj, s.ee[arm]),
                                           s.step_idx, i))
                if obj.graspable:
                    obj.held_by = arm
                    obj.center = s.ee[arm].copy()
                    obj.awaiting_place = False
                    obj.placed = False
                break

    if opening:
        for obj in s.objects:
            if obj.held_by == arm:
                obj.held_by = None
                obj.velocity = s.ee_velocity[arm].copy()
                obj.awaiting_place = True

    # free sliding with friction, then stabilization (place) detection
    for i, obj in enumerate(s.objects):
        if obj.held_by is None and np.linalg.norm(obj.velocity) > 0.0:
            obj.center = np.clip(obj.center + obj.velocity, -TABLE_LIMIT, TABLE_LIMIT)
            obj.velocity = obj.velocity * FRICTION
            if np.linalg.norm(obj.velocity) < cfg.v_stable:
                obj.velocity = np.zeros(2)
        if obj.awaiting_place and np.linalg.norm(obj.velocity) < cfg.v_stable:
            events.append(ContactEvent("place",
                                       footprint_points(obj.center, obj.radius),
                                       s.step_idx, i))
            obj.awaiting_place = False
            obj.placed = True

    s.step_idx += 1
    s.success = s.success or _check_success(s)  # success latches
    return s, events, s.success, s.success


def cameras_for(state: WorldState, view: int = 16):
    return (head_camera(view),
            wrist_camera(state.ee["left"], view),
            wrist_camera(state.ee["right"], view))


def _rasterize(cam: Camera, state: WorldState) -> np.ndarray:
    """Flat-color rasterization by back-projecting pixel centers to z=0."""
    v = cam.size
    z = cam.position[2]
    us = (np.arange(v) - cam.cx) * z / cam.focal
    vs = (np.arange(v) - cam.cy) * z / cam.focal
    wx = cam.position[0] + us[None, :]
    wy = cam.position[1] - vs[:, None]
    img = np.zeros((v, v, 3))

    def paint(center, radius, color):
        hit = (wx - center[0]) ** 2 + (wy - center[1]) ** 2 <= radius ** 2
        img[hit] = color

    # paint objects last: the manipulated object stays visible through a
    # grasp (the slightly larger gripper disc shows as a rim around it)
    if state.target is not None:
        paint(state.target, state.target_radius, COLORS["target"])
    for arm, p in state.ee.items():
        key = "gripper_open" if state.aperture[arm] >= 0.5 else "gripper_closed"
        paint(p, EE_RADIUS, COLORS[key])
    for obj in state.objects:
        paint(obj.center, obj.radius, COLORS["button" if obj.is_button else "object"])
    return img


def render_views(state: WorldState, view: int = 16):
    head, left, right = (_rasterize(c, state) for c in cameras_for(state, view))
    return head, left, right


def observe(state: WorldState, cfg: ModelConfig) -> PackedFrame:
    return pack_tpose(*render_views(state, cfg.view), cfg)


# ---------------------------------------------------------------------------
# value-map annotation

@dataclass
class ValueMap:
    values: np.ndarray  # (canvas_h, canvas_w, 3) in [0, 1], channels identical


def _splat_view(points, cam: Camera, sigma_world: float) -> np.ndarray:
    v = cam.size
    out = np.zeros((v, v))
    uu, vv = np.meshgrid(np.arange(v, dtype=float), np.arange(v, dtype=float),
                         indexing="xy")
    any_valid = False
    for p in points:
        try:
            u, w, depth = project(p, cam)
        except OutOfViewError:
            continue
        # a point that projects outside the view contributes nothing;
        # otherwise peak-normalizing would blow its far tail up to 1.0
        # and fill distant views with spurious gradient ramps
        if not (0.0 <= u <= v - 1 and 0.0 <= w <= v - 1):
            continue
        any_valid = True
        sigma_px = cam.focal * sigma_world / depth
        out += np.exp(-((uu - u) ** 2 + (vv - w) ** 2) / (2.0 * sigma_px ** 2))
    if not any_valid:
        return np.zeros((v, v))
    peak = out.max()
    return out / peak if peak > 0.0 else out


def _pack_view_maps(maps, cfg: ModelConfig) -> ValueMap:
    rgb = [np.repeat(m[:, :, None], 3, axis=2) for m in maps]
    return ValueMap(pack_tpose(*rgb, cfg).pixels)


def annotate_pick(event: ContactEvent, cams, cfg: ModelConfig,
                  sigma_world: float) -> ValueMap:
    """Gaussian splats of projected grasp contact points, peak-normalized
    per view, with sigma_px = focal * sigma_world / depth."""
    if event.kind != "grasp":
        raise ContractError("annotate_pick requires a grasp event")
    maps = [_splat_view(event.points, cam, sigma_world) for cam in cams]
    if all(m.max() == 0.0 for m in maps):
        log.warning("grasp event at step %d invisible in all views", event.step)
    return _pack_view_maps(maps, cfg)


def annotate_place(segment, release_step: int, radius: float,
                   cfg: ModelConfig, sigma_world: float, v_stable: float):
    """Scan a post-release segment for the first stable step and splat the
    object footprint there.

    segment is a list of per-step records: (object center (2,), com speed,
    cameras tuple).  Returns (ValueMap, absolute step index).
    """
    for i, (center, speed, cams) in enumerate(segment):
        if speed < v_stable:
            pts = footprint_points(np.asarray(center), radius)
            maps = [_splat_view(pts, cam, sigma_world) for cam in cams]
            return _pack_view_maps(maps, cfg), release_step + i
    raise AnnotationFailure(
        f"no stabilization within {len(segment)} steps after release at {release_step}")


# ---------------------------------------------------------------------------
# scripted experts (deterministic proportional controllers)

def _move_toward(ee: np.ndarray, goal: np.ndarray, arm: str,
                 cfg: EnvConfig, grip: float = 0.0) -> np.ndarray:
    v = np.clip((goal - ee) / cfg.max_speed, -1.0, 1.0)
    sel = 1.0 if arm == "right" else -1.0
    return np.array([v[0], v[1], grip, sel])


def _grip_only(arm: str, grip: float) -> np.ndarray:
    return np.array([0.0, 0.0, grip, 1.0 if arm == "right" else -1.0])


def _nearest_arm(state: WorldState, point: np.ndarray) -> str:
    return min(state.ee, key=lambda a: np.linalg.norm(state.ee[a] - point))


def expert_action(state: WorldState, cfg: EnvConfig | None = None) -> np.ndarray:
    """Deterministic expert policy for every task template."""
    cfg = cfg or EnvConfig()
    t = state.task
    if t == "reach":
        arm = _nearest_arm(state, state.target)
        return _move_toward(state.ee[arm], state.target, arm, cfg)
    if t in ("pick", "press"):
        obj = state.objects[0]
        arm = _nearest_arm(state, obj.center)
        if np.linalg.norm(state.ee[arm] - obj.center) > obj.radius:
            return _move_toward(state.ee[arm], obj.center, arm, cfg)
        return _grip_only(arm, -1.0)
    if t in ("place", "pick_and_place"):
        obj = state.objects[0]
        if obj.held_by is None and not obj.placed:
            arm = _nearest_arm(state, obj.center)
            if np.linalg.norm(state.ee[arm] - obj.center) > obj.radius:
                return _move_toward(state.ee[arm], obj.center, arm, cfg)
            return _grip_only(arm, -1.0)
        if obj.held_by is not None:
            arm = obj.held_by
            if np.linalg.norm(state.ee[arm] - state.target) > 0.03:
                return _move_toward(state.ee[arm], state.target, arm, cfg)
            return _grip_only(arm, 1.0)
        return np.zeros(4)  # placed, waiting for success latch
    if t == "handover":
        obj = state.objects[0]
        meet = np.array([0.0, 0.0])
        if obj.held_by == "left":
            if np.linalg.norm(state.ee["left"] - meet) > 0.03:
                return _move_toward(state.ee["left"], meet, "left", cfg)
            return _grip_only("left", 1.0)
        if obj.held_by is None:
            if np.linalg.norm(state.ee["right"] - obj.center) > obj.radius:
                return _move_toward(state.ee["right"], obj.center, "right", cfg)
            return _grip_only("right", -1.0)
        return np.zeros(4)
    raise VocabularyError(t)
