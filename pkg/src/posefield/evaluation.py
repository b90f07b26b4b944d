"""Trajectory alignment, pose error metrics, image metrics, and
test-time photometric pose refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from . import autodiff as ad
from .geometry import Pose, PoseParam, Sim3, apply_sim3
from .losses import photometric_loss
from .renderer import RenderConfig


class EvalError(ValueError):
    pass


@dataclass
class AlignmentResult:
    sim3: Sim3
    rot_errors_deg: np.ndarray
    trans_errors: np.ndarray

    @property
    def mean_rot_deg(self) -> float:
        return float(self.rot_errors_deg.mean())

    @property
    def mean_trans(self) -> float:
        return float(self.trans_errors.mean())


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    depth_error: float
    per_view: list


def rotation_error(R_gt: np.ndarray, R_est: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees.

    atan2 of the skew part against the trace part: unlike the plain
    arccos form this keeps full precision for near-identity differences.
    """
    D = np.asarray(R_gt).T @ np.asarray(R_est)
    s = 0.5 * np.linalg.norm(
        [D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]]
    )
    c = (np.trace(D) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def translation_error(t_gt: np.ndarray, t_est: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_gt) - np.asarray(t_est)))


def umeyama_sim3(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Least-squares similarity transform with dst ~ s R src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(src) != len(dst):
        raise EvalError("umeyama needs >= 3 paired points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    var_s = (sc**2).sum() / len(src)
    cov = dc.T @ sc / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if D[1] < 1e-12 * max(D[0], 1e-30) or var_s < 1e-24:
        raise EvalError("degenerate (collinear or coincident) point configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return Sim3(s, R, t)


def _alignment_errors(sim3: Sim3, opt_poses, gt_poses):
    rot = np.array(
        [
            rotation_error(g.rotation, (sim3.rotation @ o.rotation))
            for o, g in zip(opt_poses, gt_poses)
        ]
    )
    trans = np.array(
        [
            np.linalg.norm(g.center - sim3.apply_points(o.center[None])[0])
            for o, g in zip(opt_poses, gt_poses)
        ]
    )
    return rot, trans


def _project_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    return U @ S @ Vt


def ransac_pair_align(opt_poses, gt_poses) -> AlignmentResult:
    """Global Sim(3) aligning optimized poses to ground truth.

    Several candidate transforms compete and the one with the lowest mean
    camera alignment error wins:
    - every camera pair proposes one (scale from the center-distance
      ratio, rotation from the chordal mean of the pair's relative
      orientations), which is robust to a single bad camera;
    - the chordal mean of all relative orientations with a least-squares
      scale, which averages out per-camera noise;
    - Umeyama on the camera centers, when there are at least three.
    """
    if len(opt_poses) != len(gt_poses) or len(opt_poses) < 2:
        raise EvalError("need >= 2 poses in each trajectory")
    n = len(opt_poses)
    c_opt = np.array([p.center for p in opt_poses])
    c_gt = np.array([p.center for p in gt_poses])
    spread = np.linalg.norm(c_gt - c_gt.mean(axis=0), axis=1).max()
    candidates = []
    for a in range(n):
        for b in range(a + 1, n):
            d_opt = np.linalg.norm(c_opt[a] - c_opt[b])
            d_gt = np.linalg.norm(c_gt[a] - c_gt[b])
            if d_opt < 1e-12 or d_gt < 1e-12:
                continue  # coincident centers give no scale
            s = d_gt / d_opt
            M = sum(
                gt_poses[k].rotation @ opt_poses[k].rotation.T for k in (a, b)
            )
            R = _project_rotation(M)
            t = c_gt[a] - s * R @ c_opt[a]
            candidates.append(Sim3(s, R, t))
    # global candidate: all-camera chordal mean rotation, RMS-spread scale,
    # translation closing the centroids
    M = sum(g.rotation @ o.rotation.T for o, g in zip(opt_poses, gt_poses))
    R = _project_rotation(M)
    so = np.linalg.norm(c_opt - c_opt.mean(axis=0), axis=1)
    sg = np.linalg.norm(c_gt - c_gt.mean(axis=0), axis=1)
    if (so**2).sum() > 1e-24:
        s = float(np.sqrt((sg**2).sum() / (so**2).sum()))
        t = c_gt.mean(axis=0) - s * R @ c_opt.mean(axis=0)
        candidates.append(Sim3(s, R, t))
    if n >= 3:
        try:
            candidates.append(umeyama_sim3(c_opt, c_gt))
        except EvalError:
            pass
    best = None
    for cand in candidates:
        rot, trans = _alignment_errors(cand, opt_poses, gt_poses)
        score = trans.mean() + np.radians(rot.mean()) * max(spread, 1e-12)
        if best is None or score < best[0]:
            best = (score, cand, rot, trans)
    if best is None:
        raise EvalError("all camera pairs are degenerate")
    _, sim3, rot, trans = best
    return AlignmentResult(sim3, rot, trans)


def pose_errors_after_alignment(opt_poses, gt_poses) -> AlignmentResult:
    return ransac_pair_align(list(opt_poses), list(gt_poses))


# -- image metrics ------------------------------------------------------


PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise EvalError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(a: np.ndarray, b: np.ndarray, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, per channel averaged."""
    if a.shape != b.shape:
        raise EvalError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    kern = _gaussian_kernel()
    vals = []
    for ch in range(a.shape[2]):
        x = a[..., ch].astype(np.float64)
        y = b[..., ch].astype(np.float64)
        mx = convolve2d(x, kern, mode="valid")
        my = convolve2d(y, kern, mode="valid")
        mxx = convolve2d(x * x, kern, mode="valid")
        myy = convolve2d(y * y, kern, mode="valid")
        mxy = convolve2d(x * y, kern, mode="valid")
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_error(pred_depth: np.ndarray, gt_depth: np.ndarray, align_scale: float,
                mask: np.ndarray | None = None) -> float:
    """Mean |scale * pred - gt| over valid pixels (gt > 0 by default)."""
    if pred_depth.shape != gt_depth.shape:
        raise EvalError("depth map shapes differ")
    if mask is None:
        mask = gt_depth > 0
    if not mask.any():
        raise EvalError("empty validity mask")
    return float(np.mean(np.abs(align_scale * pred_depth[mask] - gt_depth[mask])))


# -- test-time photometric pose refinement ------------------------------


def test_time_pose_opt(field, K, image: np.ndarray, init_pose: Pose,
                       cfg: RenderConfig, alpha: float, iters: int = 100,
                       lr: float = 1e-3, batch: int = 256, rng=None):
    """Refine one camera against a frozen field by photometric descent.

    Returns (pose, final_loss, diverged). On divergence (final worse than
    initial) the initial pose is returned with the flag set.
    """
    rng = rng or np.random.default_rng(0)
    pp = PoseParam(init_pose, "ttpose")
    state = ad.AdamState(lr_initial=lr, lr_final=lr / 10.0, total_steps=max(iters, 1))
    h, w = image.shape[:2]
    first = None
    loss_val = 0.0
    for _ in range(iters):
        pix = np.stack(
            [rng.integers(0, w, batch), rng.integers(0, h, batch)], axis=-1
        ).astype(np.float64)
        loss, _ = photometric_loss(
            field, {0: pp}, [image], K, [(0, pix)], cfg, alpha, rng
        )
        loss_val = float(loss.value)
        if first is None:
            first = loss_val
        if not np.isfinite(loss_val):
            return init_pose, first, True
        grads = ad.backward(loss, pp.params)
        ad.adam_step(pp.params, grads, state)
    if not np.isfinite(loss_val) or loss_val > first * 1.5:
        return init_pose, loss_val, True
    return pp.decode(), loss_val, False
