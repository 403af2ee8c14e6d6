import numpy as np
import pytest

import aim.model as mdl
import aim.numcore as nc
import aim.tokenizer as tok
from aim.config import ModelConfig
from aim.model import (ModelParams, PrefixContext, build_intent_causal_mask,
                       init_params, model_forward)
from aim.tokenizer import (ACT, FUT_A, FUT_M, FUT_X, LANG, NOISE_M, OBS,
                           PackedFrame, Token)

PREFIX = {OBS, ACT, LANG}


def mask_oracle(layout):
    """Membership-table reference, written independently of the builder."""
    n = len(layout)
    obs_times = [t.time for t in layout if t.tag == OBS]
    cur = max(obs_times) if obs_times else None
    allow = np.zeros((n, n), dtype=bool)
    for i, q in enumerate(layout):
        for j, k in enumerate(layout):
            if q.tag in PREFIX:
                ok = k.tag in PREFIX
            elif q.tag == FUT_X:
                ok = k.tag in (OBS, ACT, LANG, FUT_X)
            elif q.tag in (FUT_M, NOISE_M):
                ok = k.tag in (OBS, FUT_X, FUT_M, NOISE_M)
            elif q.tag == FUT_A:
                ok = (k.tag in (ACT, FUT_M, NOISE_M, FUT_A)
                      or (k.tag == OBS and k.time == cur))
            else:
                raise AssertionError(q.tag)
            allow[i, j] = ok
    return allow


def random_layout(rng):
    layout = []
    for tag in (OBS, ACT, LANG, FUT_X, FUT_M, NOISE_M, FUT_A):
        lo = 1 if tag == OBS else 0
        for _ in range(rng.integers(lo, 5)):
            layout.append(Token(tag, int(rng.integers(0, 6))))
    rng.shuffle(layout)
    return layout


def small_cfg():
    return ModelConfig(d_model=16, layers=1, patch=8, k=2, h=2, n_lang=2,
                       canvas_h=16, canvas_w=24, view=8)


def make_inputs(cfg, params, rng, instr=0):
    frames = [PackedFrame(rng.random((cfg.canvas_h, cfg.canvas_w, 3)))
              for _ in range(cfg.k)]
    actions = [rng.uniform(-1, 1, cfg.d_action) for _ in range(cfg.k - 1)]
    seq = tok.assemble_prefix(frames, actions, instr, params)
    prefix = PrefixContext(params, seq)
    nx = rng.standard_normal((cfg.h, cfg.canvas_h, cfg.canvas_w, 3))
    nm = rng.standard_normal((cfg.h, cfg.canvas_h, cfg.canvas_w, 3))
    na = rng.standard_normal((cfg.h, cfg.d_action))
    fut = list(range(cfg.k, cfg.k + cfg.h))
    return prefix, nx, nm, na, fut


class TestMask:
    def test_matches_oracle_on_random_layouts(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            layout = random_layout(rng)
            got = build_intent_causal_mask(layout).allow
            assert np.array_equal(got, mask_oracle(layout))

    def test_action_queries_never_see_fut_x_or_lang(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            layout = random_layout(rng)
            allow = build_intent_causal_mask(layout).allow
            qa = [i for i, t in enumerate(layout) if t.tag == FUT_A]
            kx = [j for j, t in enumerate(layout) if t.tag in (FUT_X, LANG)]
            assert not allow[np.ix_(qa, kx)].any()

    def test_action_sees_only_current_obs(self):
        layout = [Token(OBS, 0), Token(OBS, 1), Token(ACT, 0),
                  Token(LANG, 0), Token(FUT_A, 2)]
        allow = build_intent_causal_mask(layout).allow
        assert not allow[4, 0] and allow[4, 1] and allow[4, 2] and not allow[4, 3]

    def test_post_softmax_zeros_for_action_queries(self):
        rng = np.random.default_rng(2)
        layout = random_layout(rng)
        allow = build_intent_causal_mask(layout).allow
        n = len(layout)
        q = nc.Tensor(rng.standard_normal((n, 8)))
        k = nc.Tensor(rng.standard_normal((n, 8)))
        w = mdl.attention_weights(q, k, allow).data
        qa = [i for i, t in enumerate(layout) if t.tag == FUT_A]
        kx = [j for j, t in enumerate(layout) if t.tag in (FUT_X, LANG)]
        assert np.all(w[np.ix_(qa, kx)] == 0.0)

    def test_unknown_tag_rejected(self):
        with pytest.raises(nc.ContractError):
            build_intent_causal_mask([Token("mystery", 0)])


class TestParams:
    def test_branch_partition(self):
        params = init_params(small_cfg(), np.random.default_rng(0))
        for name in params:
            assert ModelParams.branch_of(name) in mdl.BRANCHES
        assert params.branch_names("action")
        with pytest.raises(nc.ContractError):
            ModelParams(small_cfg(), {"rogue.w": nc.Tensor(np.zeros(1))})

    def test_copy_is_deep(self):
        params = init_params(small_cfg(), np.random.default_rng(0))
        dup = params.copy()
        dup["video.dec_x_b"].data += 1.0
        assert not np.array_equal(dup["video.dec_x_b"].data,
                                  params["video.dec_x_b"].data)

    def test_log_sigma_init(self):
        params = init_params(small_cfg(), np.random.default_rng(0))
        assert np.all(params["action.log_sigma"].data == -1.6)


class TestForward:
    def test_output_shapes(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        prefix, nx, nm, na, fut = make_inputs(cfg, params, rng)
        out = model_forward(params, prefix, nx, nm, na, 0.5, fut)
        pdim = cfg.patch * cfg.patch * 3
        assert out.vx_tok.shape == (cfg.h * cfg.n_patch, pdim)
        assert out.vm_tok.shape == (cfg.h * cfg.n_patch, pdim)
        assert out.a_hat.shape == (cfg.h, cfg.d_action)
        assert out.pred_x().shape == (cfg.h, cfg.canvas_h, cfg.canvas_w, 3)

    def test_t_fm_range_enforced(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        prefix, nx, nm, na, fut = make_inputs(cfg, params, rng)
        with pytest.raises(nc.ContractError):
            model_forward(params, prefix, nx, nm, na, 1.5, fut)

    def test_action_invariant_to_lang_and_fut_x(self):
        """With value hiddens teacher-forced, action outputs ignore both the
        instruction and arbitrary RGB-stream perturbations."""
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(2)
        frames = [PackedFrame(rng.random((cfg.canvas_h, cfg.canvas_w, 3)))
                  for _ in range(cfg.k)]
        actions = [rng.uniform(-1, 1, cfg.d_action) for _ in range(cfg.k - 1)]
        nx = rng.standard_normal((cfg.h, cfg.canvas_h, cfg.canvas_w, 3))
        nm = rng.standard_normal((cfg.h, cfg.canvas_h, cfg.canvas_w, 3))
        na = rng.standard_normal((cfg.h, cfg.d_action))
        fut = list(range(cfg.k, cfg.k + cfg.h))
        frozen = rng.standard_normal((cfg.h * cfg.n_patch + 1, cfg.d_model))

        def run(instr, x):
            seq = tok.assemble_prefix(frames, actions, instr, params)
            out = model_forward(params, PrefixContext(params, seq), x, nm, na,
                                0.3, fut, freeze_value_hidden=frozen)
            return out.a_hat.data

        base = run(0, nx)
        for instr, scale in ((1, 1.0), (2, -3.0), (0, 10.0)):
            assert np.max(np.abs(run(instr, nx * scale) - base)) < 1e-12

    def test_gradients_match_finite_differences(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(3)
        prefix_args = make_inputs(cfg, params, rng)
        clean_a = rng.uniform(-1, 1, (cfg.h, cfg.d_action))

        def f():
            prefix, nx, nm, na, fut = prefix_args
            # prefix must be rebuilt so encoder params stay on the tape
            frames_seq = tok.assemble_prefix(
                [PackedFrame(np.abs(nx[0]) / (np.abs(nx[0]).max() + 1)),
                 PackedFrame(np.abs(nm[0]) / (np.abs(nm[0]).max() + 1))],
                [np.zeros(cfg.d_action)], 0, params)
            out = model_forward(params, PrefixContext(params, frames_seq),
                                nx, nm, na, 0.4, fut)
            loss = nc.add(nc.mean_all(nc.mul(out.vx_tok, out.vx_tok)),
                          nc.add(nc.mean_all(nc.mul(out.vm_tok, out.vm_tok)),
                                 nc.mean_all(nc.mul(nc.sub(out.a_hat, clean_a),
                                                    nc.sub(out.a_hat, clean_a)))))
            return loss

        sampled = dict(list(params.items())[::7])  # subset keeps this test fast
        report = nc.grad_check(f, sampled, n_samples=2, rng=rng)
        assert max(report.values()) < 1e-3, report

    def test_action_only_grad_restricts_tape(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(4)
        prefix, nx, nm, na, fut = make_inputs(cfg, params, rng)
        snap = type("S", (), {"layout": prefix.layout,
                              "kv": lambda self, i, _p=prefix: tuple(
                                  nc.Tensor(t.data) for t in _p.kv(i)),
                              "lang": nc.Tensor(prefix.lang.data)})()
        out = model_forward(params, snap, nx, nm, na, 0.2, fut,
                            action_only_grad=True)
        grads = nc.backward(nc.mean_all(nc.mul(out.a_hat, out.a_hat)),
                            dict(params.items()))
        for n in params:
            if ModelParams.branch_of(n) != "action":
                assert np.all(grads[n].data == 0.0), n
        assert np.any(grads["action.dec_w"].data != 0.0)

    def test_arithmetic_identical_with_action_only_grad(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(5)
        prefix, nx, nm, na, fut = make_inputs(cfg, params, rng)
        a = model_forward(params, prefix, nx, nm, na, 0.2, fut)
        b = model_forward(params, prefix, nx, nm, na, 0.2, fut,
                          action_only_grad=True)
        assert np.array_equal(a.a_hat.data, b.a_hat.data)
        assert np.array_equal(a.vx_tok.data, b.vx_tok.data)

    def test_cross_attention_video_only(self):
        cfg = small_cfg()
        params = init_params(cfg, np.random.default_rng(0))
        z = nc.Tensor(np.zeros((2, cfg.d_model)))
        with pytest.raises(nc.ContractError):
            mdl.cross_attend_language(z, z, 0, params, stream=FUT_M)
