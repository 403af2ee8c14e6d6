"""Run configuration: defaults, key/value file loading, CLI overrides.

The config file format is one flat ``section.key = value`` assignment per
line (``#`` comments allowed).  Unknown keys are rejected; the resolved
config is echoed back as the provenance record of every command.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Bad configuration key or value."""


TASK_NAMES = ("reach", "pick", "place", "pick_and_place", "press", "handover")


@dataclass
class ModelConfig:
    d_model: int = 64
    d_act_ratio: int = 4          # action-head width = d_model / d_act_ratio
    layers: int = 2
    patch: int = 8
    k: int = 2                    # observation history window
    h: int = 4                    # future chunk horizon
    n_lang: int = 4               # language tokens per instruction
    d_action: int = 4
    canvas_h: int = 32
    canvas_w: int = 48
    view: int = 16
    ffn_mult: int = 2
    n_tasks: int = len(TASK_NAMES)

    @property
    def d_act(self) -> int:
        return self.d_model // self.d_act_ratio

    @property
    def n_patch(self) -> int:
        return (self.canvas_h // self.patch) * (self.canvas_w // self.patch)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup: int = 50              # linear lr warmup steps
    batch: int = 8
    steps: int = 2000
    lambda_m: float = 1.0
    lambda_a: float = 1.0
    # importance weights inside the frame/map MSE: pixels that move (vs the
    # reference frame) and pixels near an annotation peak are rare but carry
    # all the signal, so they get weight 1 + emphasis * |saliency|
    motion_emphasis: float = 30.0
    map_emphasis: float = 30.0
    # flow time is drawn as u**t_power (u uniform): powers > 1 emphasize the
    # low-t regime where the model must generate from the prefix alone,
    # which is what sampling quality is bounded by
    t_power: float = 1.0
    t_mix: float = 0.0            # probability of a uniform flow-time draw
    # fraction of each batch drawn from windows whose future chunk contains
    # an annotated (nonzero) value map; those windows are rare but carry all
    # of the map-stream supervision.  0 disables stratification.
    annotated_frac: float = 0.0
    seed: int = 0
    n_steps_sample: int = 8       # Euler steps at inference
    checkpoint_every: int = 1000
    act_grad_into_value: bool = True  # let L_act gradients reach the value stream


@dataclass
class RLConfig:
    group_size: int = 8
    eps_clip: float = 0.2
    lambda_d: float = 0.5
    lambda_s: float = 1.0
    iterations: int = 100
    lr: float = 3e-4
    out_of_view_reward: float = 0.0
    n_steps_sample: int = 4       # cheaper Euler integration during rollouts
    execute_horizon: int = 2
    max_steps: int = 48
    seed: int = 0


@dataclass
class EnvConfig:
    tasks: str = ",".join(TASK_NAMES)
    v_stable: float = 1e-3
    sigma_world: float = 0.12
    max_steps: int = 64
    max_speed: float = 0.12

    def task_list(self) -> list[str]:
        out = [t.strip() for t in self.tasks.split(",") if t.strip()]
        for t in out:
            if t not in TASK_NAMES:
                raise ConfigError(f"unknown task {t!r}")
        return out


@dataclass
class PathConfig:
    dataset: str = "data/train.aimd"
    out: str = "out"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def set_key(self, dotted: str, raw: str) -> None:
        try:
            section, key = dotted.split(".", 1)
        except ValueError:
            raise ConfigError(f"expected section.key, got {dotted!r}")
        if not hasattr(self, section) or section.startswith("_"):
            raise ConfigError(f"unknown config section {section!r}")
        sub = getattr(self, section)
        match = [f for f in fields(sub) if f.name == key]
        if not match:
            raise ConfigError(f"unknown config key {dotted!r}")
        f = match[0]
        try:
            if f.type in ("int", int):
                val = int(raw)
            elif f.type in ("float", float):
                val = float(raw)
            elif f.type in ("bool", bool):
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(raw)
                val = raw.lower() in ("true", "1")
            else:
                val = raw
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for {dotted}")
        setattr(sub, key, val)

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            sub = getattr(self, sec.name)
            for f in fields(sub):
                lines.append(f"{sec.name}.{f.name} = {getattr(sub, f.name)}")
        return "\n".join(lines) + "\n"


def load_config(path: str | None = None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    if path is not None:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key = value")
                key, raw = (s.strip() for s in line.split("=", 1))
                cfg.set_key(key, raw)
    for key, raw in (overrides or {}).items():
        cfg.set_key(key, raw)
    return cfg


def config_hash(cfg: Config) -> int:
    """Stable 64-bit hash of the resolved config text."""
    import hashlib

    digest = hashlib.sha256(cfg.to_text().encode()).digest()
    return int.from_bytes(digest[:8], "little")
