"""Observation/value-map/action/instruction tokenization and prefix assembly.

Stream tags used throughout:
    obs       packed observation frame patches (history, including current)
    act_hist  executed past actions, one token each
    lang      instruction tokens from the learned embedding table
    fut_x     future RGB patch tokens being denoised
    fut_m     future value-map patch tokens being denoised
    noise_m   the single learned value noise token (one per chunk)
    fut_a     future action tokens being denoised (action-head width)

Prefix layout order is fixed: obs tokens by time, then action-history
tokens by time, then language tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import numcore as nc
from .config import ModelConfig
from .numcore import ShapeError, Tensor

OBS = "obs"
ACT = "act_hist"
LANG = "lang"
FUT_X = "fut_x"
FUT_M = "fut_m"
NOISE_M = "noise_m"
FUT_A = "fut_a"

PREFIX_TAGS = (OBS, ACT, LANG)
FUTURE_TAGS = (FUT_X, FUT_M, NOISE_M, FUT_A)
ALL_TAGS = PREFIX_TAGS + FUTURE_TAGS

# index into the learned stream-embedding table (d_model-wide streams only)
STREAM_INDEX = {OBS: 0, ACT: 1, LANG: 2, FUT_X: 3, FUT_M: 4}


class VocabularyError(KeyError):
    """Unknown instruction/task identifier."""


class ValidationError(ValueError):
    """Input value outside its documented range."""


class Token(NamedTuple):
    tag: str
    time: int


@dataclass
class PackedFrame:
    """T-pose canvas: head view centered in the top band, wrist views in the
    lower corners; uncovered pixels are zero."""
    pixels: np.ndarray  # (canvas_h, canvas_w, 3) in [0, 1]


@dataclass
class TokenSequence:
    layout: list[Token]
    emb: Tensor  # (len(layout), d_model)


def _view_slots(cfg: ModelConfig):
    v = cfg.view
    head = (slice(0, v), slice((cfg.canvas_w - v) // 2, (cfg.canvas_w - v) // 2 + v))
    left = (slice(v, 2 * v), slice(0, v))
    right = (slice(v, 2 * v), slice(cfg.canvas_w - v, cfg.canvas_w))
    return head, left, right


def pack_tpose(head: np.ndarray, left: np.ndarray, right: np.ndarray,
               cfg: ModelConfig) -> PackedFrame:
    v = cfg.view
    for img in (head, left, right):
        if img.shape != (v, v, 3):
            raise ShapeError(f"view must be {(v, v, 3)}, got {img.shape}")
    canvas = np.zeros((cfg.canvas_h, cfg.canvas_w, 3))
    for slot, img in zip(_view_slots(cfg), (head, left, right)):
        canvas[slot] = img
    return PackedFrame(canvas)


def unpack_tpose(frame: PackedFrame, cfg: ModelConfig):
    return tuple(frame.pixels[slot].copy() for slot in _view_slots(cfg))


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) -> (n_patch, patch*patch*3), patches in row-major grid order."""
    h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ShapeError(f"canvas {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = pixels.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(n_patch, patch*patch*3) -> (canvas_h, canvas_w, 3)."""
    p = cfg.patch
    gh, gw = cfg.canvas_h // p, cfg.canvas_w // p
    x = tokens.reshape(gh, gw, p, p, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(cfg.canvas_h, cfg.canvas_w, 3)


def sinusoid(t: float, d: int) -> np.ndarray:
    """Standard sinusoidal embedding of a scalar position/time."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    out = np.zeros(d)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang[: d - half])
    return out


def encode_frame(frame: PackedFrame, params) -> Tensor:
    """Shared linear patch encoder; also used for value maps."""
    patches = patchify(frame.pixels, params.cfg.patch)
    return nc.add(nc.matmul(Tensor(patches), params["enc.patch_w"]),
                  params["enc.patch_b"])


def encode_value_map(values: np.ndarray, params) -> Tensor:
    """Same weights as encode_frame so value tokens stay grid-aligned."""
    return encode_frame(PackedFrame(np.asarray(values, dtype=np.float64)), params)


def embed_action(a: np.ndarray, params) -> Tensor:
    """2-layer tanh MLP mapping one action vector to one d_model token."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (params.cfg.d_action,):
        raise ShapeError(f"action must be shape ({params.cfg.d_action},)")
    if np.abs(a).max() > 1.0 + 1e-12:
        raise ValidationError("action components must lie in [-1, 1]")
    hid = nc.tanh(nc.add(nc.matmul(Tensor(a[None, :]), params["enc.act_w1"]),
                         params["enc.act_b1"]))
    return nc.add(nc.matmul(hid, params["enc.act_w2"]), params["enc.act_b2"])


def embed_instruction(instr: int, params) -> Tensor:
    """(n_lang, d_model) block from the learned instruction table."""
    cfg = params.cfg
    if not (0 <= int(instr) < cfg.n_tasks):
        raise VocabularyError(f"instruction id {instr} outside vocabulary")
    table = params["enc.instr_table"]  # (n_tasks * n_lang, d_model)
    start = int(instr) * cfg.n_lang
    return nc.slice_rows(table, start, start + cfg.n_lang)


def _with_stream_time(content: Tensor, tag: str, time: int, params,
                      patch_grid: bool) -> Tensor:
    cfg = params.cfg
    idx = STREAM_INDEX[tag]
    out = nc.add(content, nc.slice_rows(params["enc.stream_embed"], idx, idx + 1))
    out = nc.add(out, Tensor(sinusoid(time, cfg.d_model)[None, :]))
    if patch_grid:
        out = nc.add(out, params["enc.patch_pos"])
    return out


def obs_tokens(frame: PackedFrame, time: int, params) -> Tensor:
    return _with_stream_time(encode_frame(frame, params), OBS, time, params, True)


def assemble_prefix(frames: Sequence[PackedFrame], actions: Sequence[np.ndarray],
                    instr: int, params, times: Sequence[int] | None = None) -> TokenSequence:
    """Ordered prefix: obs tokens by time, action tokens by time, lang tokens.

    len(actions) must be len(frames) - 1; times are absolute step indices
    of the observations (defaults to 0..k-1).
    """
    cfg = params.cfg
    if len(actions) != len(frames) - 1:
        raise nc.ContractError(
            f"history mismatch: {len(frames)} frames vs {len(actions)} actions")
    if times is None:
        times = list(range(len(frames)))
    if len(times) != len(frames):
        raise nc.ContractError("times must align with frames")

    layout: list[Token] = []
    parts: list[Tensor] = []
    for t, frame in zip(times, frames):
        parts.append(obs_tokens(frame, t, params))
        layout.extend(Token(OBS, t) for _ in range(cfg.n_patch))
    for t, a in zip(times[:-1], actions):
        parts.append(_with_stream_time(embed_action(a, params), ACT, t, params, False))
        layout.append(Token(ACT, t))
    # language tokens carry a fixed time of 0 so cached copies never go stale
    lang = _with_stream_time(embed_instruction(instr, params), LANG, 0, params, False)
    parts.append(lang)
    layout.extend(Token(LANG, 0) for _ in range(cfg.n_lang))
    return TokenSequence(layout, nc.concat_rows(parts))


def prefix_token_count(cfg: ModelConfig, k: int) -> int:
    return k * cfg.n_patch + (k - 1) + cfg.n_lang
