"""Staged training loop: schedules, stage transitions, config I/O, and
determinism, at smoke-test scale."""

import numpy as np
import pytest

from posefield import autodiff as ad
from posefield import matching as mt
from posefield import training as tr
from posefield.geometry import Pose, perturb_pose


def _tiny_cfg(**over):
    base = dict(total_iters=10, stage1_frac=0.5, photometric_batch=12,
                match_batch=16, dcons_batch=6, L_x=3, L_d=2, mlp_depth=3,
                mlp_width=8, n_coarse=6, n_fine=6, single_mlp=True,
                log_every=2, seed=0)
    base.update(over)
    return tr.TrainConfig(**base)


def _tiny_dataset(seed=0, views=3, res=16):
    from posefield.scenes import gen_dataset

    return gen_dataset(seed, views, resolution=res)


def _tiny_matches(ds, n=24):
    m = {}
    for i in range(ds.n_views):
        for j in range(i + 1, ds.n_views):
            m[(i, j)] = mt.synth_matches(
                ds.scene, ds.gt_poses[i], ds.gt_poses[j], ds.intrinsics, n,
                rng=np.random.default_rng(50 + 10 * i + j), view_i=i, view_j=j)
    return m


# -- config --------------------------------------------------------------


def test_config_validation():
    with pytest.raises(tr.TrainError):
        tr.TrainConfig(stage1_frac=1.5)
    with pytest.raises(tr.TrainError):
        tr.TrainConfig(total_iters=0)
    with pytest.raises(tr.TrainError):
        tr.TrainConfig(pe_anneal_start=0.8, pe_anneal_end=0.2)


def test_anneal_window_mode_defaults():
    assert tr.TrainConfig(refine_poses=True).anneal_window() == (0.40, 0.70)
    assert tr.TrainConfig(refine_poses=False).anneal_window() == (0.10, 0.50)
    assert tr.TrainConfig(pe_anneal_start=0.2,
                          pe_anneal_end=0.9).anneal_window() == (0.2, 0.9)


def test_stage_boundary():
    assert tr.TrainConfig(total_iters=1000, stage1_frac=0.3).stage_boundary == 300
    assert tr.TrainConfig(total_iters=1000, refine_poses=False).stage_boundary == 0


def test_config_file_round_trip(tmp_path):
    cfg = _tiny_cfg(lambda_c=0.0025, restart_nerf=True)
    p = tmp_path / "cfg.txt"
    tr.save_config_file(cfg, p)
    back = tr.parse_config_file(p)
    assert back == cfg


def test_config_file_errors(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("warp_drive = 9\n")
    with pytest.raises(tr.TrainError):
        tr.parse_config_file(p)
    p.write_text("total_iters = soon\n")
    with pytest.raises(tr.TrainError):
        tr.parse_config_file(p)
    p.write_text("total_iters 500\n")
    with pytest.raises(tr.TrainError):
        tr.parse_config_file(p)
    # comments and blank lines are fine
    p.write_text("# comment\n\ntotal_iters = 500  # trailing\n")
    assert tr.parse_config_file(p).total_iters == 500


# -- schedules -----------------------------------------------------------


def test_alpha_schedule_piecewise_linear():
    cfg = tr.TrainConfig(total_iters=1000, L_x=10)  # window 0.40-0.70
    assert tr.schedule_alpha(0, cfg) == 0.0
    assert tr.schedule_alpha(400, cfg) == 0.0
    assert tr.schedule_alpha(550, cfg) == pytest.approx(5.0)
    assert tr.schedule_alpha(700, cfg) == 10.0
    assert tr.schedule_alpha(999, cfg) == 10.0


def test_lambda_c_schedule_halves_after_freeze():
    cfg = tr.TrainConfig(total_iters=1000, stage1_frac=0.3, lambda_c=8e-3,
                         lambda_halving_period=100)
    assert tr.schedule_lambda_c(0, cfg) == 8e-3
    assert tr.schedule_lambda_c(299, cfg) == 8e-3
    assert tr.schedule_lambda_c(300, cfg) == 8e-3      # floor((0)/100) = 0
    assert tr.schedule_lambda_c(400, cfg) == 4e-3
    assert tr.schedule_lambda_c(500, cfg) == 2e-3      # two periods -> /4


def test_nearest_view_and_ties():
    mk = lambda c: Pose(np.eye(3), np.asarray(c, dtype=float))
    poses = [mk([0, 0, 0]), mk([1, 0, 0]), mk([3, 0, 0])]
    assert tr.nearest_view(poses, 0) == 1
    assert tr.nearest_view(poses, 2) == 1
    # exact tie goes to the smaller index
    poses = [mk([0, 0, 0]), mk([-1, 0, 0]), mk([1, 0, 0])]
    assert tr.nearest_view(poses, 0) == 1
    with pytest.raises(tr.TrainError):
        tr.nearest_view(poses[:1], 0)


# -- loop behavior -------------------------------------------------------


def test_train_runs_and_logs():
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    field, poses, log, state = tr.train(ds, matches, None, _tiny_cfg())
    assert not state.aborted
    assert len(poses) == 3
    assert state.iter == 10
    assert log[0]["stage"] == 1 and log[-1]["stage"] == 2
    for col in tr.LOG_COLUMNS:
        assert col in log[0]
    assert np.isfinite(log[-1]["total"])


def test_poses_frozen_bitwise_in_stage_two():
    ds = _tiny_dataset()
    rng = np.random.default_rng(0)
    noisy = [perturb_pose(p, 0.05, ds.scene.radius, rng)[0] for p in ds.gt_poses]
    cfg = _tiny_cfg(total_iters=8, stage1_frac=0.5)
    state = tr.init_state(ds, cfg, noisy)
    matches = _tiny_matches(ds)
    for _ in range(4):
        tr.step(state, ds, matches, cfg)
    at_freeze = [(p.r6.value.copy(), p.t3.value.copy()) for p in state.pose_params]
    for _ in range(4):
        tr.step(state, ds, matches, cfg)
    assert state.stage == 2
    for (r6, t3), pp in zip(at_freeze, state.pose_params):
        assert np.array_equal(r6, pp.r6.value)
        assert np.array_equal(t3, pp.t3.value)


def test_stage_one_moves_poses():
    ds = _tiny_dataset()
    rng = np.random.default_rng(1)
    noisy = [perturb_pose(p, 0.05, ds.scene.radius, rng)[0] for p in ds.gt_poses]
    cfg = _tiny_cfg(total_iters=8, stage1_frac=0.5, lr_pose_init=1e-3)
    state = tr.init_state(ds, cfg, noisy)
    before = [p.t3.value.copy() for p in state.pose_params]
    tr.step(state, ds, _tiny_matches(ds), cfg)
    assert any(not np.array_equal(b, p.t3.value)
               for b, p in zip(before, state.pose_params))


def test_refine_poses_off_never_trains_poses():
    ds = _tiny_dataset()
    cfg = _tiny_cfg(refine_poses=False, use_mvcorr=False, use_dcons=False,
                    total_iters=4)
    field, poses, log, state = tr.train(ds, None, None, cfg)
    for p, g in zip(poses, ds.gt_poses):
        assert np.allclose(p.rotation, g.rotation, atol=1e-12)
        assert np.allclose(p.translation, g.translation, atol=1e-12)
    assert all(r["stage"] == 2 for r in log)


def test_disabled_losses_log_zero():
    ds = _tiny_dataset()
    cfg = _tiny_cfg(use_mvcorr=False, use_dcons=False, total_iters=4)
    _, _, log, state = tr.train(ds, None, None, cfg)
    assert all(r["mvcorr"] == 0.0 for r in log)
    assert all(r["dcons"] == 0.0 for r in log)


def test_mvcorr_requires_matches():
    ds = _tiny_dataset()
    with pytest.raises(tr.TrainError):
        tr.train(ds, None, None, _tiny_cfg())


def test_low_confidence_matches_filtered_out():
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    low = {k: mt.CorrespondenceSet(
        v.view_i, v.view_j,
        [mt.Correspondence(m.p, m.q, 0.5) for m in v.matches])
        for k, v in matches.items()}
    # every match below kappa: the loop runs with an empty match dict and
    # must log a zero correspondence loss rather than crash
    _, _, log, state = tr.train(ds, low, None, _tiny_cfg(total_iters=4))
    assert all(r["mvcorr"] == 0.0 for r in log)


def test_restart_nerf_reinitializes_field():
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    cfg = _tiny_cfg(total_iters=6, stage1_frac=0.5, restart_nerf=True)
    state = tr.init_state(ds, cfg)
    for _ in range(3):
        tr.step(state, ds, matches, cfg)
    before = {p.name: p.value.copy() for p in state.field.params}
    tr.step(state, ds, matches, cfg)  # crosses the boundary
    assert state.stage == 2
    # parameters were re-drawn, not just stepped: a fresh-init field from
    # seed+1 matches the post-restart values better than continuity would
    fresh = tr.init_state(ds, _tiny_cfg(seed=cfg.seed + 1)).field
    # at least one parameter block changed by a large margin
    deltas = [np.abs(before[p.name] - p.value).max() for p in state.field.params]
    assert max(deltas) > 1e-3


def test_gt_loss_flags_run():
    ds = _tiny_dataset()
    for flag in ("use_gt_depth_loss", "use_gt_3d_loss"):
        cfg = _tiny_cfg(total_iters=3, use_mvcorr=False, use_dcons=False,
                        **{flag: True})
        _, _, log, state = tr.train(ds, None, None, cfg)
        assert not state.aborted
        assert np.isfinite(log[-1]["total"])


def test_training_deterministic():
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    runs = []
    for _ in range(2):
        field, poses, log, _ = tr.train(ds, matches, None, _tiny_cfg())
        runs.append((field.state_dict(),
                     [(p.rotation.copy(), p.translation.copy()) for p in poses],
                     [r["total"] for r in log]))
    (fa, pa, la), (fb, pb, lb) = runs
    assert la == lb
    for k in fa:
        assert np.array_equal(fa[k], fb[k])
    for (Ra, ta), (Rb, tb) in zip(pa, pb):
        assert np.array_equal(Ra, Rb) and np.array_equal(ta, tb)


def test_divergence_guard_aborts_and_restores():
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    cfg = _tiny_cfg(total_iters=6, lr_field_init=1e9, lr_field_final=1e9,
                    lr_pose_init=1e9)
    field, poses, log, state = tr.train(ds, matches, None, cfg)
    if state.aborted:
        # restored poses are finite and decodable
        for p in poses:
            assert np.all(np.isfinite(p.rotation))
    else:
        # even absurd rates may survive six steps; values must stay finite
        assert np.isfinite(log[-1]["total"])


def test_train_writes_outputs(tmp_path):
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    out = tmp_path / "run"
    out.mkdir()
    tr.train(ds, matches, None, _tiny_cfg(total_iters=4), out_dir=str(out))
    assert (out / "field_final.ckpt").exists()
    assert (out / "poses_final.txt").exists()
    lines = (out / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.LOG_COLUMNS)
    assert len(lines) >= 2


def test_log_csv_round_trip_bitwise(tmp_path):
    ds = _tiny_dataset()
    matches = _tiny_matches(ds)
    _, _, log, _ = tr.train(ds, matches, None, _tiny_cfg(total_iters=4))
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    tr.save_log(log, p1)
    tr.save_log(log, p2)
    assert p1.read_bytes() == p2.read_bytes()
