"""Training objectives: photometric, multi-view correspondence, depth
consistency, and the two ground-truth diagnostic losses.

All losses return (Var loss, stats dict). Gradients flow into the field
parameters and, where the contract says so, into the trainable poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose, PoseParam
from .renderer import RenderConfig, rays_for_pixels, render_rays


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1e-3
    lambda_d: float = 1e-3

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_d < 0:
            raise LossError("loss weights must be >= 0")


@dataclass
class LossReport:
    photometric: float = 0.0
    mvcorr: float = 0.0
    dcons: float = 0.0
    total: float = 0.0
    n_pixels: int = 0
    n_matches: int = 0
    mask_acceptance: float = 1.0


def _pose_mats(pose, freeze: bool = False):
    """World-to-camera (R, t) Vars for a PoseParam or a plain Pose."""
    if isinstance(pose, PoseParam):
        R, t = pose.decode_vars()
        if freeze:
            R, t = ad.stop_gradient(R), ad.stop_gradient(t)
        return R, t
    R, t = pose.w2c()
    return ad.constant(R), ad.constant(t)


def _cam_dirs(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    p = np.atleast_2d(pixels)
    return np.stack(
        [(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy, np.ones(len(p))], axis=-1
    )


def _project_var(K: Intrinsics, x_cam: ad.Var, z_safe: ad.Var) -> ad.Var:
    x = x_cam[(slice(None), 0)]
    y = x_cam[(slice(None), 1)]
    return ad.stack([x / z_safe * K.fx + K.cx, y / z_safe * K.fy + K.cy], axis=1)


def _safe_z(z: ad.Var, eps: float = 1e-6):
    """(z_safe, valid mask): clamp non-positive depths out of the division."""
    valid = z.value > eps
    patch = np.where(valid, 0.0, 1.0)
    return z * valid.astype(float) + patch, valid


def _render_heads(field, pose, K, pixels, cfg, alpha, rng, heads):
    origins, dirs = rays_for_pixels(pose, K, pixels)
    coarse, fine = render_rays(field, origins, dirs, cfg, alpha, rng,
                               "coarse" if heads == "coarse" else "both")
    if heads == "coarse" or coarse is fine:
        return [coarse]
    return [coarse, fine]


# -- photometric (Eq.-7-style mean squared color error) -----------------


def photometric_loss(field, poses, images, K: Intrinsics, pixel_batch,
                     cfg: RenderConfig, alpha: float, rng=None,
                     heads: str = "both", rendered_rgb=None):
    """Mean over sampled pixels of the squared RGB error (3 channels
    summed), applied to the coarse and fine renders and summed.

    pixel_batch: list of (view_index, (B,2) integer pixel array) groups.
    rendered_rgb: optional per-head list of (total, 3) rgb Vars already
    rendered for the concatenated pixel groups (fused training path);
    when given no render happens here.
    """
    total_pixels = sum(len(pix) for _, pix in pixel_batch)
    if total_pixels == 0:
        raise LossError("photometric loss needs a non-empty pixel batch")
    groups = [(view, pix) for view, pix in pixel_batch if len(pix)]
    target = np.concatenate(
        [images[view][pix[:, 1].astype(int), pix[:, 0].astype(int)]
         for view, pix in groups])
    if rendered_rgb is None:
        # one render call for the whole batch: rays from all views share
        # the field query, which is much cheaper than a render per view
        rays = [rays_for_pixels(poses[view], K, pix) for view, pix in groups]
        origins = rays[0][0] if len(rays) == 1 else ad.concat(
            [o for o, _ in rays], axis=0)
        dirs = rays[0][1] if len(rays) == 1 else ad.concat(
            [d for _, d in rays], axis=0)
        coarse, fine = render_rays(field, origins, dirs, cfg, alpha, rng,
                                   "coarse" if heads == "coarse" else "both")
        rendered_rgb = [coarse.rgb] if (heads == "coarse" or coarse is fine) \
            else [coarse.rgb, fine.rgb]
    terms = [ad.vsum(ad.square(rgb - target)) for rgb in rendered_rgb]
    loss = ad.vsum(ad.stack(terms)) * (1.0 / total_pixels)
    return loss, {"n_pixels": total_pixels}


# -- multi-view correspondence ------------------------------------------


def mvcorr_loss(field, pose_i, pose_j, K: Intrinsics, P, Q, W,
                cfg: RenderConfig, alpha: float, rng=None, heads: str = "both",
                huber_delta: float = 1.0, grad_pose_i: bool = True,
                grad_pose_j: bool = True, rendered_depth=None):
    """Reprojection error of matches under the rendered depth.

    For each confident match (p, q): render depth at p in view i,
    backproject to world, map into view j, project, and accumulate the
    confidence-weighted Huber penalty of the pixel residual. Summed (not
    averaged) over the match batch. Matches landing behind camera j
    contribute zero and are counted. rendered_depth: optional per-head
    list of depth Vars for the P rays (fused training path).
    """
    P = np.atleast_2d(P)
    Q = np.atleast_2d(Q)
    W = np.atleast_1d(W)
    if len(P) == 0:
        return ad.constant(0.0), {"n_matches": 0, "behind": 0}
    Ri, ti = _pose_mats(pose_i, freeze=not grad_pose_i)
    Rj, tj = _pose_mats(pose_j, freeze=not grad_pose_j)
    dirs_cam = _cam_dirs(K, P)
    behind = 0
    terms = []
    if rendered_depth is None:
        rendered_depth = [
            out.depth
            for out in _render_heads(field, pose_i, K, P, cfg, alpha, rng,
                                     heads)]
    for z_head in rendered_depth:
        zh = ad.reshape(z_head, (len(P), 1))
        x_cam_i = zh * dirs_cam
        world = (x_cam_i - ad.reshape(ti, (1, 3))) @ Ri
        x_cam_j = world @ ad.transpose(Rj) + ad.reshape(tj, (1, 3))
        z_safe, valid = _safe_z(x_cam_j[(slice(None), 2)])
        behind += int((~valid).sum())
        proj = _project_var(K, x_cam_j, z_safe)
        resid = ad.huber(proj - Q, huber_delta)
        weighted = ad.vsum(resid, axis=1) * (W * valid.astype(float))
        terms.append(ad.vsum(weighted))
    loss = ad.vsum(ad.stack(terms))
    return loss, {"n_matches": len(P), "behind": behind}


# -- depth consistency with visibility mask -----------------------------


def depth_consistency_loss(field, pose_i, pose_un: Pose, K: Intrinsics,
                           pixels, cfg: RenderConfig, alpha: float, rng=None,
                           heads: str = "both", huber_delta: float = 1.0,
                           rendered_depth=None):
    """Pseudo-depth supervision of a virtual view from a training view.

    The training pose is treated as a constant (no gradient); gradients
    flow through the rendered depth, the projection, the pseudo depth,
    and the virtual-view render. The visibility mask is the virtual
    ray's transmittance at the pseudo depth, zero outside the frame.
    """
    pixels = np.atleast_2d(pixels)
    if len(pixels) == 0:
        raise LossError("depth consistency loss needs pixels")
    pose_i_const = pose_i.decode() if isinstance(pose_i, PoseParam) else pose_i
    dirs_cam = _cam_dirs(K, pixels)
    R_un = pose_un.rotation  # camera-to-world
    t_un = pose_un.translation
    terms = []
    coverage = []
    if rendered_depth is None:
        rendered_depth = [
            out.depth
            for out in _render_heads(field, pose_i_const, K, pixels, cfg,
                                     alpha, rng, heads)]
    for z_head in rendered_depth:
        zh = ad.reshape(z_head, (len(pixels), 1))
        x_cam_i = zh * dirs_cam
        world = x_cam_i @ pose_i_const.rotation.T + pose_i_const.translation
        r_un = (world - t_un) @ R_un
        z_y, valid = _safe_z(r_un[(slice(None), 2)])
        y = _project_var(K, r_un, z_y)
        in_view = valid & K.in_bounds(y.value)
        mask0 = in_view.astype(float)
        # virtual-view render at the (differentiable) projected pixels
        d_cam_un = ad.stack(
            [
                (y[(slice(None), 0)] - K.cx) * (1.0 / K.fx),
                (y[(slice(None), 1)] - K.cy) * (1.0 / K.fy),
                ad.constant(np.ones(len(pixels))),
            ],
            axis=1,
        )
        dirs_un = d_cam_un @ R_un.T
        origins_un = ad.constant(np.broadcast_to(t_un, (len(pixels), 3)).copy())
        coarse, fine = render_rays(field, origins_un, dirs_un, cfg, alpha, rng,
                                   "coarse" if heads == "coarse" else "both")
        out_un = coarse if (heads == "coarse" or coarse is fine) else fine
        if getattr(field, "is_exact_oracle", False):
            gamma = ad.constant(
                np.array(
                    [
                        field.analytic_transmittance(pose_un, K, y.value[k], z_y.value[k])
                        if in_view[k]
                        else 0.0
                        for k in range(len(pixels))
                    ]
                )
            )
        else:
            # transmittance at the pseudo depth, estimated on the same
            # virtual-view samples: optical depth of samples before z_y
            tmask = (out_un.depths < z_y.value[:, None]).astype(float)
            gamma = ad.exp(-ad.vsum(out_un.sigma_deltas * tmask, axis=1))
        resid = ad.huber(z_y - out_un.depth, huber_delta)
        terms.append(ad.vsum(gamma * mask0 * resid))
        coverage.append(mask0.mean())
    loss = ad.vsum(ad.stack(terms))
    return loss, {"n_pixels": len(pixels), "mask_acceptance": float(np.mean(coverage))}


# -- ground-truth diagnostic losses -------------------------------------


def gt_depth_loss(field, pose, gt_depth_map, K: Intrinsics, pixels,
                  cfg: RenderConfig, alpha: float, rng=None,
                  heads: str = "both"):
    """Mean L1 error between rendered and ground-truth depth at the
    sampled pixels (zero GT depth marks invalid pixels)."""
    pixels = np.atleast_2d(pixels)
    z_gt = gt_depth_map[pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
    valid = z_gt > 0
    if not valid.any():
        raise LossError("no pixels with valid ground-truth depth in batch")
    mask = valid.astype(float)
    terms = []
    for out in _render_heads(field, pose, K, pixels, cfg, alpha, rng, heads):
        terms.append(ad.vsum(ad.absval(out.depth - z_gt) * mask) * (1.0 / valid.sum()))
    return ad.vsum(ad.stack(terms)), {"n_pixels": int(valid.sum())}


def gt_3dpoint_loss(field, pose, gt_depth_map, gt_pose: Pose, K: Intrinsics,
                    pixels, cfg: RenderConfig, alpha: float, rng=None,
                    heads: str = "both"):
    """Mean L1 distance between the learned world points (rendered depth
    backprojected through the estimated pose) and the ground-truth world
    points; gradients reach both the field and the pose."""
    pixels = np.atleast_2d(pixels)
    z_gt = gt_depth_map[pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
    valid = z_gt > 0
    if not valid.any():
        raise LossError("no pixels with valid ground-truth depth in batch")
    mask = valid.astype(float)[:, None]
    dirs_cam = _cam_dirs(K, pixels)
    x_gt_cam = np.where(valid, z_gt, 1.0)[:, None] * dirs_cam
    world_gt = x_gt_cam @ gt_pose.rotation.T + gt_pose.translation
    R, t = _pose_mats(pose)
    terms = []
    for out in _render_heads(field, pose, K, pixels, cfg, alpha, rng, heads):
        zh = ad.reshape(out.depth, (len(pixels), 1))
        x_cam = zh * dirs_cam
        world = (x_cam - ad.reshape(t, (1, 3))) @ R
        l1 = ad.vsum(ad.absval(world - world_gt) * mask)
        terms.append(l1 * (1.0 / valid.sum()))
    return ad.vsum(ad.stack(terms)), {"n_pixels": int(valid.sum())}


def combine(photo, mvcorr, dcons, weights: LossWeights):
    """Total loss plus a report satisfying the additivity invariant."""
    total = photo + weights.lambda_c * mvcorr + weights.lambda_d * dcons
    report = LossReport(
        photometric=float(ad.as_var(photo).value),
        mvcorr=float(ad.as_var(mvcorr).value),
        dcons=float(ad.as_var(dcons).value),
        total=float(ad.as_var(total).value),
    )
    return total, report
