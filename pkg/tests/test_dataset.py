import hashlib
import os

import numpy as np
import pytest

import aim.dataset as ds
from aim.config import EnvConfig, ModelConfig, TASK_NAMES


@pytest.fixture(scope="module")
def cfgs():
    return EnvConfig(), ModelConfig()


@pytest.fixture(scope="module")
def pick_traj(cfgs):
    env_cfg, model_cfg = cfgs
    return ds.record_episode("pick", 3, env_cfg, model_cfg)


class TestRecordEpisode:
    def test_expert_episode_succeeds(self, pick_traj):
        assert pick_traj.success[-1] == 1
        assert pick_traj.frames.shape[1:] == (32, 48, 3)
        assert pick_traj.actions.shape[1] == 4

    def test_tail_steps_after_success(self, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        first_success = int(np.argmax(pick_traj.success))
        # enough tail that the success frame can appear in a future chunk
        assert len(pick_traj) == first_success + model_cfg.h
        assert np.all(pick_traj.actions[first_success + 1:] == 0.0)

    def test_label_dilation_window(self, cfgs):
        """Maps are labeled on the event step and the 4 steps before it."""
        env_cfg, model_cfg = cfgs
        tr = ds.record_episode("pick", 3, env_cfg, model_cfg)
        ev = [e for e in tr.contacts if e.kind == "grasp"][0]
        nonzero = set(np.where(tr.maps.reshape(len(tr), -1).max(axis=1) > 0)[0])
        expect = set(range(max(0, ev.step - ds.DILATION_STEPS), ev.step + 1))
        assert nonzero == expect

    def test_place_label_matches_env_event(self, cfgs):
        env_cfg, model_cfg = cfgs
        tr = ds.record_episode("place", 5, env_cfg, model_cfg)
        ev = [e for e in tr.contacts if e.kind == "place"][0]
        nonzero = np.where(tr.maps.reshape(len(tr), -1).max(axis=1) > 0)[0]
        assert nonzero.max() == ev.step

    def test_reach_has_no_labels(self, cfgs):
        env_cfg, model_cfg = cfgs
        tr = ds.record_episode("reach", 0, env_cfg, model_cfg)
        assert np.all(tr.maps == 0.0)


class TestFileFormat:
    def test_roundtrip_values(self, tmp_path, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        path = str(tmp_path / "d.aimd")
        ds.write_dataset(path, [pick_traj], model_cfg)
        back, meta = ds.read_dataset(path)
        assert meta["n_traj"] == 1 and meta["d_a"] == 4
        assert back[0].task == pick_traj.task
        assert np.allclose(back[0].frames, pick_traj.frames, atol=1e-6)
        assert np.array_equal(back[0].success, pick_traj.success)
        cam = back[0].cams[0]
        assert cam.focal == pytest.approx(pick_traj.cams[0].focal)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.aimd"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ds.FormatError):
            ds.read_dataset(str(path))

    def test_trailing_bytes_rejected(self, tmp_path, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        path = str(tmp_path / "t.aimd")
        ds.write_dataset(path, [pick_traj], model_cfg)
        with open(path, "ab") as fh:
            fh.write(b"x")
        with pytest.raises(ds.FormatError):
            ds.read_dataset(path)

    def test_generate_deterministic(self, tmp_path, cfgs):
        env_cfg, model_cfg = cfgs
        a, b = str(tmp_path / "a.aimd"), str(tmp_path / "b.aimd")
        sa = ds.generate_dataset(7, 11, a, env_cfg, model_cfg)
        sb = ds.generate_dataset(7, 11, b, env_cfg, model_cfg)
        ha = hashlib.sha256(open(a, "rb").read()).hexdigest()
        hb = hashlib.sha256(open(b, "rb").read()).hexdigest()
        assert ha == hb and sa == sb

    def test_stats_schema(self, cfgs, pick_traj):
        stats = ds.dataset_stats([pick_traj])
        lines = stats.strip().splitlines()
        assert lines[0] == "task,n_traj,success_rate,mean_length,n_annotated_steps"
        assert lines[1].startswith("pick,1,1.0,")


class TestWindows:
    def test_truncated_history_at_start(self, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        w = ds.window_at(pick_traj, 0, model_cfg.k, model_cfg.h)
        assert w.hist_frames.shape[0] == 1
        assert w.hist_actions.shape[0] == 0
        assert w.hist_times == [0]
        assert w.fut_times == [1, 2, 3, 4]

    def test_full_history_alignment(self, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        t = len(pick_traj) - model_cfg.h - 1
        assert t >= 1
        w = ds.window_at(pick_traj, t, model_cfg.k, model_cfg.h)
        assert w.hist_times == [t - 1, t]
        assert np.array_equal(w.hist_actions[0], pick_traj.actions[t - 1])
        # future actions start at the current step (they produce frame t+1)
        assert np.array_equal(w.fut_actions[0], pick_traj.actions[t])
        assert np.array_equal(w.fut_frames[0], pick_traj.frames[t + 1])

    def test_out_of_range_rejected(self, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        with pytest.raises(ds.FormatError):
            ds.window_at(pick_traj, len(pick_traj), model_cfg.k, model_cfg.h)

    def test_all_windows_cover_every_valid_start(self, cfgs, pick_traj):
        env_cfg, model_cfg = cfgs
        wins = ds.all_windows([pick_traj], model_cfg.k, model_cfg.h)
        assert wins == [(0, t) for t in range(len(pick_traj) - model_cfg.h)]
        for _, t in wins:
            ds.window_at(pick_traj, t, model_cfg.k, model_cfg.h)
