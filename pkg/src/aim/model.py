"""Three-stream transformer with intent-causal masked self-attention.

One shared masked self-attention joins the video stream (prefix +
future RGB tokens), the value stream (future value-map tokens plus the
learned noise token) and the action stream (future action tokens, at a
quarter of the hidden width).  Feed-forward layers, projections and
decoders are branch-specific; instruction tokens enter the video stream
only, through cross-attention.

Prefix tokens are given context: they are embedded once and provide
static per-layer keys/values, but are not themselves updated by the
block stack.  This keeps the action stream exactly independent of
language and future-RGB perturbations (the information-flow contract)
and makes KV caching trivially consistent.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import tokenizer as tok
from .config import ModelConfig
from .numcore import ContractError, Tensor
from .tokenizer import (ACT, FUT_A, FUT_M, FUT_X, LANG, NOISE_M, OBS, Token,
                        TokenSequence)

BRANCHES = ("video", "value", "action", "enc")

# stream tag -> parameter branch owning its projections
STREAM_BRANCH = {OBS: "video", ACT: "video", LANG: "video", FUT_X: "video",
                 FUT_M: "value", NOISE_M: "value", FUT_A: "action"}


class ModelParams:
    """Named parameter tensors, partitioned by branch via name prefix."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        for name in tensors:
            if self.branch_of(name) not in BRANCHES:
                raise ContractError(f"parameter {name!r} outside branch partition")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @staticmethod
    def branch_of(name: str) -> str:
        return name.split(".", 1)[0]

    def branch_names(self, branch: str) -> list[str]:
        return [n for n in self.tensors if self.branch_of(n) == branch]

    def copy(self) -> "ModelParams":
        out = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
               for n, t in self.tensors.items()}
        return ModelParams(self.cfg, out)


def _p(rng, *shape, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(shape[0])
    return rng.normal(0.0, scale, size=shape)


def _grid_pos(cfg: ModelConfig) -> np.ndarray:
    """2D sin-cos positional code per patch, unit scale so patch addressing
    works from the first optimizer step."""
    gh, gw = cfg.canvas_h // cfg.patch, cfg.canvas_w // cfg.patch
    half = cfg.d_model // 2
    out = np.zeros((cfg.n_patch, cfg.d_model))
    for r in range(gh):
        for c in range(gw):
            out[r * gw + c, :half] = tok.sinusoid(float(r), half)
            out[r * gw + c, half:] = tok.sinusoid(float(c),
                                                  cfg.d_model - half)
    return out


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    d, da, f = cfg.d_model, cfg.d_act, cfg.d_model * cfg.ffn_mult
    fa = cfg.d_act * cfg.ffn_mult
    pdim = cfg.patch * cfg.patch * 3
    t: dict[str, np.ndarray] = {}

    t["enc.patch_w"] = _p(rng, pdim, d)
    t["enc.patch_b"] = np.zeros(d)
    t["enc.patch_pos"] = _grid_pos(cfg)
    t["enc.stream_embed"] = rng.normal(0.0, 0.02, size=(len(tok.STREAM_INDEX), d))
    t["enc.act_w1"] = _p(rng, cfg.d_action, 32)
    t["enc.act_b1"] = np.zeros(32)
    t["enc.act_w2"] = _p(rng, 32, d)
    t["enc.act_b2"] = np.zeros(d)
    t["enc.instr_table"] = rng.normal(0.0, 0.02, size=(cfg.n_tasks * cfg.n_lang, d))

    for i in range(cfg.layers):
        for w in ("wq", "wk", "wv"):
            t[f"video.l{i}.{w}"] = _p(rng, d, d)
            t[f"value.l{i}.{w}"] = _p(rng, d, d)
            t[f"action.l{i}.{w}"] = _p(rng, da, d, scale=1.0 / np.sqrt(da))
        t[f"video.l{i}.wo"] = _p(rng, d, d)
        t[f"value.l{i}.wo"] = _p(rng, d, d)
        t[f"action.l{i}.wo"] = _p(rng, d, da)
        for br, width, fw in (("video", d, f), ("value", d, f), ("action", da, fa)):
            t[f"{br}.l{i}.ln1_g"] = np.ones(width)
            t[f"{br}.l{i}.ln1_b"] = np.zeros(width)
            t[f"{br}.l{i}.ln2_g"] = np.ones(width)
            t[f"{br}.l{i}.ln2_b"] = np.zeros(width)
            t[f"{br}.l{i}.ffn_w1"] = _p(rng, width, fw)
            t[f"{br}.l{i}.ffn_b1"] = np.zeros(fw)
            t[f"{br}.l{i}.ffn_w2"] = _p(rng, fw, width)
            t[f"{br}.l{i}.ffn_b2"] = np.zeros(width)
        # language cross-attention, video stream only
        t[f"video.l{i}.ln_ca_g"] = np.ones(d)
        t[f"video.l{i}.ln_ca_b"] = np.zeros(d)
        t[f"video.l{i}.ca_wq"] = _p(rng, d, d)
        t[f"video.l{i}.ca_wk"] = _p(rng, d, d)
        t[f"video.l{i}.ca_wv"] = _p(rng, d, d)
        t[f"video.l{i}.ca_wo"] = _p(rng, d, d)
        t[f"video.l{i}.ca_bo"] = np.zeros(d)

    for br, width in (("video", d), ("value", d), ("action", da)):
        t[f"{br}.lnf_g"] = np.ones(width)
        t[f"{br}.lnf_b"] = np.zeros(width)
    t["video.dec_x_w"] = _p(rng, d, pdim)
    t["video.dec_x_b"] = np.zeros(pdim)
    t["video.ref_w"] = _p(rng, pdim, d)
    t["value.ref_w"] = _p(rng, pdim, d)
    t["video.view_w"] = _p(rng, pdim, d)
    t["value.view_w"] = _p(rng, pdim, d)
    # direct pixel-level skip from the reference patch into the map decoder:
    # the annotation is close to a pointwise function of the rendered scene
    t["value.skip_w"] = _p(rng, pdim, pdim // 3)
    # per-future-step, per-view linear refinements from the reference view
    # pixels: each camera view's future content is close to a per-step linear
    # function of what that view currently shows (approach motion contracts
    # the scene toward the contact point at a fixed speed), and a direct
    # linear path fits that in far fewer optimizer steps than attention does.
    # Outputs are laid out patch-major (the view's 2x2 patch block in row
    # order) so they concatenate straight into the token decoders.
    vpix = 3 * cfg.view * cfg.view
    n_vp = (cfg.view // cfg.patch) ** 2
    for j in range(cfg.h):
        for vi in range(3):
            t[f"video.vskip{j}.{vi}_w"] = np.zeros((vpix, n_vp * pdim))
            t[f"value.vskip{j}.{vi}_w"] = np.zeros((vpix, n_vp * pdim // 3))
    t["value.noise_token"] = rng.normal(0.0, 0.02, size=(1, d))
    # value maps are grayscale: decode one value per pixel, replicate to RGB
    t["value.dec_m_w"] = _p(rng, d, pdim // 3)
    t["value.dec_m_b"] = np.zeros(pdim // 3)
    t["action.in_w"] = _p(rng, cfg.d_action, da)
    t["action.in_b"] = np.zeros(da)
    t["action.dec_w"] = _p(rng, da, cfg.d_action)
    t["action.dec_b"] = np.zeros(cfg.d_action)
    t["action.log_sigma"] = np.full(cfg.d_action, -1.6)

    tensors = {n: Tensor(v, requires_grad=True, name=n) for n, v in t.items()}
    return ModelParams(cfg, tensors)


@dataclass
class VisibilityMask:
    allow: np.ndarray  # bool, queries x keys
    layout: list[Token]


def build_intent_causal_mask(layout: list[Token]) -> VisibilityMask:
    """Visibility rule per (query tag, key tag):

        prefix tags (obs/act_hist/lang) -> all prefix tags
        fut_x            -> obs, act_hist, lang, fut_x
        fut_m / noise_m  -> obs, fut_x, fut_m, noise_m
        fut_a            -> current-time obs, act_hist, fut_m, noise_m, fut_a
    """
    tags = np.array([t.tag for t in layout])
    times = np.array([t.time for t in layout])
    for t in layout:
        if t.tag not in tok.ALL_TAGS:
            raise ContractError(f"unknown stream tag {t.tag!r}")
    n = len(layout)
    is_prefix = np.isin(tags, tok.PREFIX_TAGS)
    is_obs = tags == OBS
    cur_obs = is_obs & (times == times[is_obs].max()) if is_obs.any() \
        else np.zeros(n, dtype=bool)

    allow = np.zeros((n, n), dtype=bool)
    allow[np.ix_(is_prefix, is_prefix)] = True
    q = tags == FUT_X
    allow[np.ix_(q, is_prefix | (tags == FUT_X))] = True
    q = (tags == FUT_M) | (tags == NOISE_M)
    k = is_obs | (tags == FUT_X) | (tags == FUT_M) | (tags == NOISE_M)
    allow[np.ix_(q, k)] = True
    q = tags == FUT_A
    k = (tags == ACT) | (tags == FUT_M) | (tags == NOISE_M) | (tags == FUT_A)
    allow[np.ix_(q, k | cur_obs)] = True

    if not allow.any(axis=1).all():
        raise ContractError("mask has a query row with zero visible keys")
    return VisibilityMask(allow, list(layout))


def stream_qkv(h: Tensor, stream: str, layer: int, params: ModelParams):
    """Per-stream Q/K/V projections into the common attention width."""
    br = STREAM_BRANCH.get(stream)
    if br is None:
        raise ContractError(f"unknown stream {stream!r}")
    width = params.cfg.d_act if br == "action" else params.cfg.d_model
    if h.shape[-1] != width:
        raise nc.ShapeError(f"{stream} hidden width {h.shape[-1]} != {width}")
    pre = f"{br}.l{layer}."
    return (nc.matmul(h, params[pre + "wq"]),
            nc.matmul(h, params[pre + "wk"]),
            nc.matmul(h, params[pre + "wv"]))


def attention_core(q: Tensor, k: Tensor, v: Tensor, allow: np.ndarray) -> Tensor:
    logits = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return nc.matmul(nc.softmax_masked(logits, allow), v)


def attention_weights(q: Tensor, k: Tensor, allow: np.ndarray) -> Tensor:
    logits = nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return nc.softmax_masked(logits, allow)


def _ffn(h: Tensor, pre: str, params: ModelParams) -> Tensor:
    a = nc.layer_norm(h, params[pre + "ln2_g"], params[pre + "ln2_b"])
    a = nc.tanh(nc.add(nc.matmul(a, params[pre + "ffn_w1"]), params[pre + "ffn_b1"]))
    return nc.add(h, nc.add(nc.matmul(a, params[pre + "ffn_w2"]), params[pre + "ffn_b2"]))


def shared_masked_attention(blocks: list[tuple[str, Tensor]], mask: VisibilityMask,
                            layer: int, params: ModelParams) -> list[tuple[str, Tensor]]:
    """One attention over the concatenation of all blocks, then per-stream
    output projection, residual, and branch-specific FFN with residual.

    blocks are (stream tag, hidden) in sequence order matching mask.layout.
    """
    n_total = sum(b[1].shape[0] for b in blocks)
    if mask.allow.shape != (n_total, n_total):
        raise ContractError("mask does not match concatenated sequence length")

    normed = []
    for stream, h in blocks:
        pre = f"{STREAM_BRANCH[stream]}.l{layer}."
        normed.append(nc.layer_norm(h, params[pre + "ln1_g"], params[pre + "ln1_b"]))
    qs, ks, vs = [], [], []
    for (stream, _), a in zip(blocks, normed):
        q, k, v = stream_qkv(a, stream, layer, params)
        qs.append(q), ks.append(k), vs.append(v)
    attended = attention_core(nc.concat_rows(qs), nc.concat_rows(ks),
                              nc.concat_rows(vs), mask.allow)
    out = []
    off = 0
    for stream, h in blocks:
        n = h.shape[0]
        pre = f"{STREAM_BRANCH[stream]}.l{layer}."
        part = nc.slice_rows(attended, off, off + n)
        h = nc.add(h, nc.matmul(part, params[pre + "wo"]))
        out.append((stream, _ffn(h, pre, params)))
        off += n
    return out


def cross_attend_language(h_x: Tensor, z_lang: Tensor, layer: int,
                          params: ModelParams, stream: str = FUT_X) -> Tensor:
    """Residual cross-attention from video hiddens into instruction tokens."""
    if STREAM_BRANCH.get(stream) != "video":
        raise ContractError("cross-attention is video-branch only")
    pre = f"video.l{layer}."
    a = nc.layer_norm(h_x, params[pre + "ln_ca_g"], params[pre + "ln_ca_b"])
    q = nc.matmul(a, params[pre + "ca_wq"])
    k = nc.matmul(z_lang, params[pre + "ca_wk"])
    v = nc.matmul(z_lang, params[pre + "ca_wv"])
    allow = np.ones((q.shape[0], k.shape[0]), dtype=bool)
    att = attention_core(q, k, v, allow)
    return nc.add(h_x, nc.add(nc.matmul(att, params[pre + "ca_wo"]),
                              params[pre + "ca_bo"]))


class PrefixContext:
    """Static per-layer keys/values for the committed prefix tokens."""

    def __init__(self, params: ModelParams, seq: TokenSequence,
                 ref_frame: np.ndarray | None = None):
        self.layout = list(seq.layout)
        self.ref_frame = None if ref_frame is None else np.asarray(ref_frame)
        self._kv = []
        for i in range(params.cfg.layers):
            pre = f"video.l{i}."
            a = nc.layer_norm(seq.emb, params[pre + "ln1_g"], params[pre + "ln1_b"])
            self._kv.append((nc.matmul(a, params[pre + "wk"]),
                             nc.matmul(a, params[pre + "wv"])))
        lang_rows = [j for j, t in enumerate(self.layout) if t.tag == LANG]
        if lang_rows:
            self.lang = nc.slice_rows(seq.emb, min(lang_rows), max(lang_rows) + 1)
        else:
            self.lang = Tensor(np.zeros((0, params.cfg.d_model)))

    def kv(self, layer: int):
        return self._kv[layer]


@dataclass
class ForwardOut:
    """Clean-sample predictions for every future stream.

    All three denoisers regress the clean endpoint of the straight flow
    path; the sampler converts them to velocities via (pred - z) / (1 - t).
    """
    vx_tok: Tensor     # (h * n_patch, patch*patch*3) predicted clean RGB
    vm_tok: Tensor     # same, predicted clean value map
    a_hat: Tensor      # (h, d_action) predicted clean action chunk
    cfg: ModelConfig

    def pred_x(self) -> np.ndarray:
        return _tok_to_frames(self.vx_tok.data, self.cfg)

    def pred_m(self) -> np.ndarray:
        return _tok_to_frames(self.vm_tok.data, self.cfg)


def _tok_to_frames(data: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    h = data.shape[0] // cfg.n_patch
    return np.stack([tok.unpatchify(data[i * cfg.n_patch:(i + 1) * cfg.n_patch], cfg)
                     for i in range(h)])


def _frame_stream_emb(frames: np.ndarray, tag: str, times, t_emb: np.ndarray,
                      params: ModelParams, in_gain: float = 1.0) -> Tensor:
    cfg = params.cfg
    patches = np.concatenate([tok.patchify(f, cfg.patch) for f in frames], axis=0)
    content = nc.add(nc.scale(nc.matmul(Tensor(patches), params["enc.patch_w"]),
                              in_gain),
                     params["enc.patch_b"])
    idx = tok.STREAM_INDEX[tag]
    content = nc.add(content, nc.slice_rows(params["enc.stream_embed"], idx, idx + 1))
    extra = np.empty((patches.shape[0], cfg.d_model))
    for i, t in enumerate(times):
        extra[i * cfg.n_patch:(i + 1) * cfg.n_patch] = tok.sinusoid(t, cfg.d_model) + t_emb
    content = nc.add(content, Tensor(extra))
    return nc.add(content, _tile_pos(params, len(times)))


def _view_summary(ref: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-patch pooled content of the patch's camera view.

    Every patch token receives the mean patch vector of the view slot it
    belongs to (zeros for off-view canvas corners), so "what is visible in
    my camera" is available without multi-hop attention.
    """
    patches = tok.patchify(ref, cfg.patch)
    vid = np.full((cfg.canvas_h, cfg.canvas_w), -1)
    for i, slot in enumerate(tok._view_slots(cfg)):
        vid[slot] = i
    per_patch = vid[::cfg.patch, ::cfg.patch].reshape(-1)
    out = np.zeros_like(patches)
    for i in range(3):
        sel = per_patch == i
        if sel.any():
            out[sel] = patches[sel].mean(axis=0)
    return out


def _patch_view_layout(cfg: ModelConfig):
    """Map each canvas patch-grid index to (view index, slot in the view's
    patch block) or None for the empty canvas corners."""
    gh, gw = cfg.canvas_h // cfg.patch, cfg.canvas_w // cfg.patch
    vp = cfg.view // cfg.patch
    slots = tok._view_slots(cfg)
    out = []
    for pr in range(gh):
        for pc in range(gw):
            hit = None
            for vi, (rs, cs) in enumerate(slots):
                pr0, pc0 = rs.start // cfg.patch, cs.start // cfg.patch
                if pr0 <= pr < pr0 + vp and pc0 <= pc < pc0 + vp:
                    hit = (vi, (pr - pr0) * vp + (pc - pc0))
                    break
            out.append(hit)
    return out


def _view_skip(params: ModelParams, ref: np.ndarray, hzn: int):
    """Per-future-step linear refinements of frame and map tokens computed
    from the reference frame's view pixels (see init_params)."""
    cfg = params.cfg
    pdim = cfg.patch * cfg.patch * 3
    n_vp = (cfg.view // cfg.patch) ** 2
    layout = _patch_view_layout(cfg)
    vrows = [Tensor(ref[sl].reshape(1, -1)) for sl in tok._view_slots(cfg)]
    zero_x = Tensor(np.zeros((1, pdim)))
    zero_m = Tensor(np.zeros((1, pdim // 3)))
    rows_x, rows_m = [], []
    for j in range(hzn):
        jj = min(j, cfg.h - 1)
        vx = [nc.reshape(nc.matmul(vrows[vi], params[f"video.vskip{jj}.{vi}_w"]),
                         (n_vp, pdim)) for vi in range(3)]
        vm = [nc.reshape(nc.matmul(vrows[vi], params[f"value.vskip{jj}.{vi}_w"]),
                         (n_vp, pdim // 3)) for vi in range(3)]
        for ent in layout:
            if ent is None:
                rows_x.append(zero_x)
                rows_m.append(zero_m)
            else:
                vi, pi = ent
                rows_x.append(nc.slice_rows(vx[vi], pi, pi + 1))
                rows_m.append(nc.slice_rows(vm[vi], pi, pi + 1))
    return nc.concat_rows(rows_x), nc.concat_rows(rows_m)


def _tile_pos(params: ModelParams, reps: int) -> Tensor:
    pos = params["enc.patch_pos"]
    return nc.concat_rows([pos] * reps)


def model_forward(params: ModelParams, prefix: "PrefixContext | object",
                  noisy_x: np.ndarray, noisy_m: np.ndarray, noisy_a,
                  t_fm: float, future_times,
                  freeze_value_hidden: np.ndarray | None = None,
                  detach_value_for_action: bool = False,
                  action_only_grad: bool = False) -> ForwardOut:
    """Joint denoising forward pass.

    prefix supplies static per-layer K/V (a PrefixContext or a KV cache with
    the same interface).  noisy_* are the current flow states: frames
    (h, canvas, 3), maps likewise, actions (h, d_action; array or Tensor).
    t_fm enters via a sinusoidal embedding added to every future token.

    With action_only_grad, video/value computations run off the tape so a
    backward pass from the action outputs reaches action-branch parameters
    only; the arithmetic is unchanged.
    """
    cfg = params.cfg
    if not (0.0 <= t_fm <= 1.0):
        raise ContractError("t_fm must lie in [0, 1]")
    hzn = len(future_times)
    if noisy_x.shape[0] != hzn or noisy_m.shape[0] != hzn or noisy_a.shape[0] != hzn:
        raise ContractError("future streams must share the horizon")
    guard = nc.no_grad if action_only_grad else contextlib.nullcontext

    temb = tok.sinusoid(t_fm, cfg.d_model)
    temb_a = tok.sinusoid(t_fm, cfg.d_act)

    with guard():
        h_x = _frame_stream_emb(noisy_x, FUT_X, future_times, temb, params)
        h_m = _frame_stream_emb(noisy_m, FUT_M, future_times, temb, params)
        # condition every future frame/map token on the spatially aligned
        # patch of the last committed observation, when the prefix has one
        ref = getattr(prefix, "ref_frame", None)
        ref_tok = None if ref is None \
            else np.tile(tok.patchify(ref, cfg.patch), (hzn, 1))
        if ref_tok is not None:
            vsum = np.tile(_view_summary(ref, cfg), (hzn, 1))
            h_x = nc.add(h_x, nc.matmul(Tensor(ref_tok), params["video.ref_w"]))
            h_x = nc.add(h_x, nc.matmul(Tensor(vsum), params["video.view_w"]))
            h_m = nc.add(h_m, nc.matmul(Tensor(ref_tok), params["value.ref_w"]))
            h_m = nc.add(h_m, nc.matmul(Tensor(vsum), params["value.view_w"]))
        h_nm = nc.add(params["value.noise_token"], Tensor(temb[None, :]))
        h_m = nc.concat_rows([h_m, h_nm])
    a_nd = noisy_a if isinstance(noisy_a, Tensor) \
        else Tensor(np.asarray(noisy_a, dtype=np.float64))
    a_in = nc.add(nc.matmul(a_nd, params["action.in_w"]), params["action.in_b"])
    extra_a = np.stack([tok.sinusoid(t, cfg.d_act) + temb_a for t in future_times])
    h_a = nc.add(a_in, Tensor(extra_a))

    fut_layout = ([Token(FUT_X, t) for t in future_times for _ in range(cfg.n_patch)]
                  + [Token(FUT_M, t) for t in future_times for _ in range(cfg.n_patch)]
                  + [Token(NOISE_M, future_times[0])]
                  + [Token(FUT_A, t) for t in future_times])
    full_layout = list(prefix.layout) + fut_layout
    mask = build_intent_causal_mask(full_layout).allow
    n_pre = len(prefix.layout)
    nx, nm, na = h_x.shape[0], h_m.shape[0], h_a.shape[0]
    rows = {"x": (n_pre, n_pre + nx),
            "m": (n_pre + nx, n_pre + nx + nm),
            "a": (n_pre + nx + nm, n_pre + nx + nm + na)}

    scale = 1.0 / np.sqrt(cfg.d_model)
    for layer in range(cfg.layers):
        def attend(q, r0, r1, k_all, v_all):
            logits = nc.scale(nc.matmul(q, nc.transpose(k_all)), scale)
            w = nc.softmax_masked(logits, mask[r0:r1])
            return nc.matmul(w, v_all)

        with guard():
            if freeze_value_hidden is not None:
                h_m = Tensor(np.asarray(freeze_value_hidden, dtype=np.float64))
            h_x = cross_attend_language(h_x, prefix.lang, layer, params)
            a_x = nc.layer_norm(h_x, params[f"video.l{layer}.ln1_g"],
                                params[f"video.l{layer}.ln1_b"])
            a_m = nc.layer_norm(h_m, params[f"value.l{layer}.ln1_g"],
                                params[f"value.l{layer}.ln1_b"])
            qx, kx, vx = stream_qkv(a_x, FUT_X, layer, params)
            qm, km, vm = stream_qkv(a_m, FUT_M, layer, params)
        a_a = nc.layer_norm(h_a, params[f"action.l{layer}.ln1_g"],
                            params[f"action.l{layer}.ln1_b"])
        qa, ka, va = stream_qkv(a_a, FUT_A, layer, params)
        kp, vp = prefix.kv(layer)
        keys = nc.concat_rows([kp, kx, km, ka])
        vals = nc.concat_rows([vp, vx, vm, va])

        with guard():
            att_x = attend(qx, *rows["x"], keys, vals)
            att_m = attend(qm, *rows["m"], keys, vals)
        if detach_value_for_action:
            keys_a = nc.concat_rows([kp, kx, Tensor(km.data.copy()), ka])
            vals_a = nc.concat_rows([vp, vx, Tensor(vm.data.copy()), va])
            att_a = attend(qa, *rows["a"], keys_a, vals_a)
        else:
            att_a = attend(qa, *rows["a"], keys, vals)

        with guard():
            h_x = _ffn(nc.add(h_x, nc.matmul(att_x, params[f"video.l{layer}.wo"])),
                       f"video.l{layer}.", params)
            h_m = _ffn(nc.add(h_m, nc.matmul(att_m, params[f"value.l{layer}.wo"])),
                       f"value.l{layer}.", params)
        h_a = _ffn(nc.add(h_a, nc.matmul(att_a, params[f"action.l{layer}.wo"])),
                   f"action.l{layer}.", params)

    with guard():
        h_x = nc.layer_norm(h_x, params["video.lnf_g"], params["video.lnf_b"])
        h_m = nc.layer_norm(h_m, params["value.lnf_g"], params["value.lnf_b"])
        vx_tok = nc.add(nc.matmul(h_x, params["video.dec_x_w"]), params["video.dec_x_b"])
        # frames decode as a residual on the last committed observation, so
        # the static background is exact and only motion has to be learned
        if ref_tok is not None:
            vx_tok = nc.add(vx_tok, Tensor(ref_tok))
        vm_gray = nc.add(nc.matmul(nc.slice_rows(h_m, 0, nm - 1),
                                   params["value.dec_m_w"]),
                         params["value.dec_m_b"])
        if ref_tok is not None:
            vm_gray = nc.add(vm_gray, nc.matmul(Tensor(ref_tok),
                                                params["value.skip_w"]))
        if ref is not None:
            vsx, vsm = _view_skip(params, np.asarray(ref), hzn)
            vx_tok = nc.add(vx_tok, vsx)
            vm_gray = nc.add(vm_gray, vsm)
        # expand grayscale per-pixel values to the 3-channel patch layout
        # (channel is the fastest axis of a patch vector)
        expand = np.repeat(np.eye(cfg.patch * cfg.patch), 3, axis=1)
        vm_tok = nc.matmul(vm_gray, Tensor(expand))
    h_a = nc.layer_norm(h_a, params["action.lnf_g"], params["action.lnf_b"])
    a_hat = nc.add(nc.matmul(h_a, params["action.dec_w"]), params["action.dec_b"])
    return ForwardOut(vx_tok, vm_tok, a_hat, cfg)
