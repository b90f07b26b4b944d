"""Staged joint pose-field optimization.

Stage 1 trains the coarse head jointly with the camera poses; at the
stage boundary the poses are frozen and stage 2 trains coarse + fine
heads. Schedules: linear positional-encoding anneal, exponential
learning-rate decay, and halving of the correspondence weight after the
pose freeze.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .field import EncodingConfig, MlpConfig, RadianceField
from .geometry import Pose, PoseParam, interpolate_pose
from .losses import (LossWeights, combine, depth_consistency_loss,
                     gt_3dpoint_loss, gt_depth_loss, mvcorr_loss,
                     photometric_loss)
from .matching import filter_confidence

CONFIDENCE_KAPPA = 0.95
LOG_COLUMNS = ("iter", "stage", "photo", "mvcorr", "dcons", "total",
               "lambda_c", "alpha_pe", "rot_err", "trans_err")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    total_iters: int = 20000
    stage1_frac: float = 0.30
    # PE anneal window as fractions of total_iters; negative means
    # "pick by mode": 0.40-0.70 when refining poses, 0.10-0.50 when not.
    pe_anneal_start: float = -1.0
    pe_anneal_end: float = -1.0
    photometric_batch: int = 1024
    match_batch: int = 1024
    dcons_batch: int = 1024
    lambda_c: float = 1e-3
    lambda_c_start: float = -1.0  # <= 0 disables the stage-1 ramp
    lambda_d: float = 1e-3
    lambda_halving_period: int = 10000
    lr_field_init: float = 5e-4
    lr_field_final: float = 1e-4
    lr_pose_init: float = 1e-3
    lr_pose_final: float = 1e-4
    depth_margin: float = 0.3
    refine_poses: bool = True
    use_mvcorr: bool = True
    use_dcons: bool = True
    use_gt_depth_loss: bool = False
    use_gt_3d_loss: bool = False
    restart_nerf: bool = False
    single_mlp: bool = False
    seed: int = 0
    # architecture / sampling knobs for the synthetic harness
    L_x: int = 10
    L_d: int = 4
    mlp_depth: int = 4
    mlp_width: int = 128
    n_coarse: int = 64
    n_fine: int = 64
    sample_mode: str = "linear"
    log_every: int = 100
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        for name in ("stage1_frac",):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise TrainError(f"{name} must be in [0,1], got {v}")
        for name in ("photometric_batch", "match_batch", "dcons_batch",
                     "total_iters"):
            if getattr(self, name) <= 0:
                raise TrainError(f"{name} must be positive")
        s, e = self.anneal_window()
        if not (0.0 <= s < e <= 1.0):
            raise TrainError(f"bad PE anneal window [{s}, {e}]")

    def anneal_window(self) -> tuple[float, float]:
        s, e = self.pe_anneal_start, self.pe_anneal_end
        if s < 0:
            s = 0.40 if self.refine_poses else 0.10
        if e < 0:
            e = 0.70 if self.refine_poses else 0.50
        return s, e

    @property
    def stage_boundary(self) -> int:
        return int(round(self.stage1_frac * self.total_iters)) if self.refine_poses else 0

    @property
    def pose_freeze_iter(self) -> int:
        return self.stage_boundary


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def parse_config_file(path) -> TrainConfig:
    """Flat `key = value` config; keys must be TrainConfig field names."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise TrainError(f"{path}:{lineno}: unknown config key {key!r}")
            ftype = fields[key].type
            try:
                if ftype == "bool":
                    kwargs[key] = _BOOL_WORDS[val.lower()]
                elif ftype == "int":
                    kwargs[key] = int(val)
                elif ftype == "float":
                    kwargs[key] = float(val)
                else:
                    kwargs[key] = val
            except (KeyError, ValueError):
                raise TrainError(
                    f"{path}:{lineno}: bad value {val!r} for {key}"
                ) from None
    return TrainConfig(**kwargs)


def save_config_file(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(TrainConfig):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")


def schedule_alpha(it: int, cfg: TrainConfig) -> float:
    """PE anneal value: 0 before the window, L_x after, linear inside."""
    s, e = cfg.anneal_window()
    frac = it / cfg.total_iters
    return cfg.L_x * float(np.clip((frac - s) / (e - s), 0.0, 1.0))


def schedule_lambda_c(it: int, cfg: TrainConfig) -> float:
    """Correspondence weight: optional geometric ramp from lambda_c_start
    down to lambda_c across stage 1 (the match signal should dominate
    while the field is still too poor to trust photometrically), constant
    lambda_c when no ramp is set, then halved every halving period after
    the pose freeze."""
    freeze = cfg.pose_freeze_iter
    if it < freeze:
        if cfg.lambda_c_start > 0:
            f = it / max(freeze, 1)
            return cfg.lambda_c_start * (cfg.lambda_c / cfg.lambda_c_start) ** f
        return cfg.lambda_c
    return cfg.lambda_c * 0.5 ** ((it - freeze) // cfg.lambda_halving_period)


def nearest_view(poses, i: int) -> int:
    """Index of the other camera with the closest center (tie: smaller)."""
    if len(poses) < 2:
        raise TrainError("nearest_view needs >= 2 poses")
    ci = poses[i].center
    best, best_d = -1, np.inf
    for j, p in enumerate(poses):
        if j == i:
            continue
        d = np.linalg.norm(p.center - ci)
        if d < best_d - 1e-15:
            best, best_d = j, d
    return best


@dataclass
class TrainState:
    field: RadianceField
    pose_params: list
    adam_field: ad.AdamState
    adam_pose: ad.AdamState
    rng: np.random.Generator
    iter: int = 0
    stage: int = 1
    alpha: float = 0.0
    lambda_c_current: float = 0.0
    log: list = dc_field(default_factory=list)
    # divergence guard
    initial_total: float | None = None
    bad_streak: int = 0
    aborted: bool = False
    snapshot: dict | None = None

    @property
    def field_params(self) -> list:
        return self.field.params

    def current_poses(self) -> list:
        return [pp.decode() for pp in self.pose_params]

    def take_snapshot(self) -> None:
        self.snapshot = {
            "iter": self.iter,
            "field": self.field.state_dict(),
            "poses": [(p.r6.value.copy(), p.t3.value.copy())
                      for p in self.pose_params],
        }

    def restore_snapshot(self) -> None:
        if self.snapshot is None:
            return
        self.field.load_state_dict(self.snapshot["field"])
        for pp, (r6, t3) in zip(self.pose_params, self.snapshot["poses"]):
            pp.r6.value = r6.copy()
            pp.t3.value = t3.copy()


def init_state(dataset, cfg: TrainConfig, init_poses=None) -> TrainState:
    if dataset.n_views < 2:
        raise TrainError("training needs >= 2 views")
    if init_poses is None:
        init_poses = dataset.init_poses or dataset.gt_poses
    field = RadianceField(
        EncodingConfig(L_x=cfg.L_x, L_d=cfg.L_d),
        MlpConfig(depth=cfg.mlp_depth, width=cfg.mlp_width,
                  skip_layers=(cfg.mlp_depth // 2,)),
        single_mlp=cfg.single_mlp,
        seed=cfg.seed,
    )
    pose_params = [PoseParam(p, f"pose{k}") for k, p in enumerate(init_poses)]
    state = TrainState(
        field=field,
        pose_params=pose_params,
        adam_field=ad.AdamState(cfg.lr_field_init, cfg.lr_field_final,
                                cfg.total_iters),
        # poses only train during stage 1, so their lr decays over that window
        adam_pose=ad.AdamState(cfg.lr_pose_init, cfg.lr_pose_final,
                               max(cfg.stage_boundary, 1)),
        rng=np.random.default_rng(cfg.seed),
    )
    state.lambda_c_current = schedule_lambda_c(0, cfg)
    state.take_snapshot()
    return state


def _sample_pixel_batch(rng, n_views: int, w: int, h: int, batch: int):
    """Random pixels spread over views, grouped per view for the loss."""
    views = rng.integers(0, n_views, batch)
    xs = rng.integers(0, w, batch)
    ys = rng.integers(0, h, batch)
    groups = []
    for v in range(n_views):
        sel = views == v
        if sel.any():
            groups.append((v, np.stack([xs[sel], ys[sel]], axis=-1).astype(np.float64)))
    return groups


def step(state: TrainState, dataset, matches, cfg: TrainConfig,
         render_cfg=None) -> TrainState:
    """One optimization iteration; mutates and returns the state."""
    it = state.iter
    boundary = cfg.stage_boundary
    entering_stage2 = state.stage == 1 and it >= boundary
    if entering_stage2:
        state.stage = 2
        if cfg.restart_nerf:
            state.field.reinitialize(cfg.seed + 1)
            state.adam_field.reset_moments()
    elif state.stage == 1 and not cfg.refine_poses:
        state.stage = 2
    state.alpha = schedule_alpha(it, cfg)
    state.lambda_c_current = schedule_lambda_c(it, cfg)
    if render_cfg is None:
        render_cfg = dataset.render_config(
            cfg.n_coarse, cfg.n_fine,
            cfg.depth_margin if cfg.refine_poses else 0.0, cfg.sample_mode)

    poses_trainable = state.stage == 1 and cfg.refine_poses
    pose_arg = (state.pose_params if poses_trainable
                else state.current_poses())
    heads = "coarse" if state.stage == 1 else "both"
    K = dataset.intrinsics
    rng = state.rng

    pix = _sample_pixel_batch(rng, dataset.n_views, K.width, K.height,
                              cfg.photometric_batch)
    photo, _ = photometric_loss(
        state.field, dict(enumerate(pose_arg)), dataset.images, K, pix,
        render_cfg, state.alpha, rng, heads)

    mvc = ad.constant(np.float64(0.0))
    if cfg.use_mvcorr and matches:
        keys = sorted(matches.keys())
        i, j = keys[rng.integers(0, len(keys))]
        P, Q, W = matches[(i, j)].arrays()
        if len(P) > cfg.match_batch:
            sel = rng.choice(len(P), cfg.match_batch, replace=False)
            P, Q, W = P[sel], Q[sel], W[sel]
        mvc, _ = mvcorr_loss(state.field, pose_arg[i], pose_arg[j], K,
                             P, Q, W, render_cfg, state.alpha, rng, heads)

    dcons = ad.constant(np.float64(0.0))
    if cfg.use_dcons:
        cur = state.current_poses()
        i = int(rng.integers(0, dataset.n_views))
        j = nearest_view(cur, i)
        t = float(rng.uniform(0.2, 0.8))
        p_un = interpolate_pose(cur[i], cur[j], t)
        pix_d = np.stack([rng.integers(0, K.width, cfg.dcons_batch),
                          rng.integers(0, K.height, cfg.dcons_batch)],
                         axis=-1).astype(np.float64)
        dcons, _ = depth_consistency_loss(
            state.field, pose_arg[i], p_un, K, pix_d, render_cfg,
            state.alpha, rng, heads)

    total, report = combine(
        photo, mvc, dcons,
        LossWeights(state.lambda_c_current, cfg.lambda_d))

    if cfg.use_gt_depth_loss or cfg.use_gt_3d_loss:
        i = int(rng.integers(0, dataset.n_views))
        pix_g = np.stack([rng.integers(0, K.width, cfg.dcons_batch),
                          rng.integers(0, K.height, cfg.dcons_batch)],
                         axis=-1).astype(np.float64)
        if cfg.use_gt_depth_loss:
            extra, _ = gt_depth_loss(state.field, pose_arg[i],
                                     dataset.gt_depths[i], K, pix_g,
                                     render_cfg, state.alpha, rng, heads)
        else:
            extra, _ = gt_3dpoint_loss(state.field, pose_arg[i],
                                       dataset.gt_depths[i],
                                       dataset.gt_poses[i], K, pix_g,
                                       render_cfg, state.alpha, rng, heads)
        total = total + extra
        report.total = float(total.value)

    total_val = float(total.value)
    if not np.isfinite(total_val):
        state.aborted = True
        state.restore_snapshot()
        return state
    if state.initial_total is None:
        state.initial_total = max(total_val, 1e-30)
    if total_val > 1e3 * state.initial_total:
        state.bad_streak += 1
        if state.bad_streak >= 500:
            state.aborted = True
            state.restore_snapshot()
            return state
    else:
        state.bad_streak = 0

    params = list(state.field_params)
    if poses_trainable:
        params += [q for pp in state.pose_params for q in pp.params]
    grads = ad.backward(total, params)
    ad.adam_step(state.field_params, grads, state.adam_field)
    if poses_trainable:
        ad.adam_step([q for pp in state.pose_params for q in pp.params],
                     grads, state.adam_pose)

    state.iter += 1
    state._last_report = report
    return state


def _log_row(state: TrainState, cfg: TrainConfig, dataset, report) -> dict:
    rot_err = trans_err = float("nan")
    if dataset.gt_poses:
        from .evaluation import ransac_pair_align
        try:
            ares = ransac_pair_align(state.current_poses(), dataset.gt_poses)
            rot_err, trans_err = ares.mean_rot_deg, ares.mean_trans
        except Exception:
            pass
    return {
        "iter": state.iter,
        "stage": state.stage,
        "photo": report.photometric,
        "mvcorr": report.mvcorr,
        "dcons": report.dcons,
        "total": report.total,
        "lambda_c": state.lambda_c_current,
        "alpha_pe": state.alpha,
        "rot_err": rot_err,
        "trans_err": trans_err,
    }


def save_log(log: list, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in LOG_COLUMNS) + "\n")


def train(dataset, matches, init_poses, cfg: TrainConfig,
          out_dir=None, progress=None):
    """Full staged optimization.

    matches: dict mapping (view_i, view_j) to a CorrespondenceSet, or
    None when use_mvcorr is off. Returns (field, poses, log, state).
    """
    if cfg.use_mvcorr and not matches:
        raise TrainError("use_mvcorr requires a correspondence dictionary")
    if matches:
        matches = {k: filter_confidence(v, CONFIDENCE_KAPPA)
                   for k, v in matches.items()}
        matches = {k: v for k, v in matches.items() if len(v)}
    state = init_state(dataset, cfg, init_poses)
    render_cfg = dataset.render_config(
        cfg.n_coarse, cfg.n_fine,
        cfg.depth_margin if cfg.refine_poses else 0.0, cfg.sample_mode)
    for it in range(cfg.total_iters):
        step(state, dataset, matches, cfg, render_cfg)
        if state.aborted:
            break
        report = state._last_report
        if it % cfg.log_every == 0 or it == cfg.total_iters - 1:
            state.log.append(_log_row(state, cfg, dataset, report))
            state.take_snapshot()
            if progress is not None:
                progress(state)
        if (out_dir is not None and cfg.checkpoint_every
                and it and it % cfg.checkpoint_every == 0):
            _save_ckpt(state, out_dir, it)
    if out_dir is not None:
        _save_ckpt(state, out_dir, "final")
        save_log(state.log, f"{out_dir}/log.csv")
    return state.field, state.current_poses(), state.log, state


def _save_ckpt(state: TrainState, out_dir, tag) -> None:
    from .geometry import save_poses
    params = state.field.state_dict()
    ad.save_checkpoint(params, f"{out_dir}/field_{tag}.ckpt")
    save_poses(state.current_poses(), f"{out_dir}/poses_{tag}.txt")
