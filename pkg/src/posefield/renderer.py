"""Ray sampling, alpha compositing, and transmittance queries.

Rendering is differentiable end to end: rays may be built from trainable
pose parameters, and compositing runs on autodiff Vars so gradients
reach densities, colors, sample depths, and poses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose, PoseParam, pixel_dirs_cam


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: float = 1.0
    far: float = 6.0
    sample_mode: str = "linear"  # or "inverse_depth"

    def __post_init__(self):
        if self.sample_mode not in ("linear", "inverse_depth"):
            raise RenderError(f"unknown sample mode {self.sample_mode!r}")


@dataclass
class RenderOutput:
    rgb: ad.Var          # (N, 3)
    depth: ad.Var        # (N,)
    weights: ad.Var      # (N, M) alpha_m
    transmittance: ad.Var  # (N, M) T_m, exclusive convention
    opacity: ad.Var      # (N,)
    depths: np.ndarray   # (N, M) sample depths actually used
    sigma_deltas: ad.Var = None  # (N, M) per-sample optical depth


def sample_stratified(near, far, n_rays: int, M: int, mode: str = "linear", rng=None) -> np.ndarray:
    """One uniform sample per bin of [near, far]; bin midpoints when rng is None.

    In inverse_depth mode the bins partition disparity [1/far, 1/near]
    and samples are mapped back to depth.
    """
    if M < 2:
        raise RenderError(f"need at least 2 samples per ray, got {M}")
    if rng is None:
        u = np.broadcast_to((np.arange(M) + 0.5) / M, (n_rays, M)).copy()
    else:
        u = (np.arange(M) + rng.random((n_rays, M))) / M
    if mode == "linear":
        return near + (far - near) * u
    disp = (1.0 / near) + ((1.0 / far) - (1.0 / near)) * u
    return np.sort(1.0 / disp, axis=-1)


def sample_importance(coarse_weights: np.ndarray, coarse_depths: np.ndarray, M: int,
                      far, rng=None) -> np.ndarray:
    """Inverse-transform samples from the piecewise-constant pdf over the
    coarse bins, proportional to (alpha + 1e-5); all-zero weights fall
    back to a uniform pdf."""
    w = np.asarray(coarse_weights, dtype=np.float64) + 1e-5
    edges = np.concatenate(
        [coarse_depths, np.broadcast_to(far, (len(coarse_depths), 1))], axis=-1
    )
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(M) + 0.5) / M, (len(w), M))
    else:
        u = rng.random((len(w), M))
    samples = np.empty((len(w), M))
    for i in range(len(w)):  # searchsorted is per-row; N is small at desk scale
        idx = np.clip(np.searchsorted(cdf[i], u[i], side="right") - 1, 0, w.shape[1] - 1)
        lo, hi = cdf[i][idx], cdf[i][idx + 1]
        frac = np.where(hi > lo, (u[i] - lo) / np.maximum(hi - lo, 1e-30), 0.5)
        samples[i] = edges[i][idx] + frac * (edges[i][idx + 1] - edges[i][idx])
    return np.sort(samples, axis=-1)


def composite(colors, densities, depths, far) -> RenderOutput:
    """Alpha-composite per-sample colors and densities along each ray.

    T_m uses the exclusive sum of sigma*delta over earlier samples;
    alpha_m = T_m (1 - exp(-sigma_m delta_m)); rgb and depth are the
    alpha-weighted sums. The last interval extends to the far plane.
    """
    colors = ad.as_var(colors)
    densities = ad.as_var(densities)
    if np.any(densities.value < 0):
        raise RenderError("negative density passed to composite")
    dvar = isinstance(depths, ad.Var)
    depths_val = depths.value if dvar else np.asarray(depths, dtype=np.float64)
    n, m = depths_val.shape
    if dvar:
        lead = depths[(slice(None), slice(0, m - 1))]
        tail = depths[(slice(None), slice(1, m))]
        deltas = ad.concat(
            [tail - lead, ad.reshape(far - depths[(slice(None), slice(m - 1, m))], (n, 1))],
            axis=-1,
        )
        tvals = depths
    else:
        deltas = ad.constant(
            np.concatenate(
                [np.diff(depths_val, axis=-1), np.broadcast_to(far, (n, 1)) - depths_val[:, -1:]],
                axis=-1,
            )
        )
        tvals = ad.constant(depths_val)
    sd = densities * deltas
    tau = ad.cumsum(sd, axis=-1)
    tau_excl = tau - sd
    trans = ad.exp(-tau_excl)
    alpha = trans * (1.0 - ad.exp(-sd))
    rgb = ad.vsum(ad.reshape(alpha, (n, m, 1)) * colors, axis=1)
    depth = ad.vsum(alpha * tvals, axis=1)
    opacity = ad.vsum(alpha, axis=1)
    return RenderOutput(rgb, depth, alpha, trans, opacity, depths_val, sd)


# -- rays from poses ----------------------------------------------------


def rays_for_pixels(pose, K: Intrinsics, pixels: np.ndarray):
    """World-space ray origins/directions for a pixel batch.

    `pose` may be a PoseParam (differentiable, world-to-camera
    parameters) or a plain camera-to-world Pose (constants). Directions
    are unnormalized: depth along a ray is metric z-depth.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dirs_cam = pixel_dirs_cam(K, pixels)
    if isinstance(pose, PoseParam):
        R_w2c, t_w2c = pose.decode_vars()
        dirs = ad.constant(dirs_cam) @ R_w2c
        origin = -(t_w2c @ R_w2c)
        origins = ad.reshape(origin, (1, 3)) * np.ones(
            (len(pixels), 1), dtype=origin.value.dtype)
    else:
        dirs = ad.constant(dirs_cam @ pose.rotation.T)
        origins = ad.constant(np.broadcast_to(pose.translation, (len(pixels), 3)).copy())
    return origins, dirs


def _query_on_samples(field, origins, dirs, depths: np.ndarray, alpha: float, which: str):
    n, m = depths.shape
    o = ad.reshape(origins, (n, 1, 3))
    d = ad.reshape(dirs, (n, 1, 3))
    pts = o + ad.constant(depths[:, :, None]) * d
    d_rep = d * np.ones((1, m, 1), dtype=d.value.dtype)
    color, density = field.query(
        ad.reshape(pts, (n * m, 3)), ad.reshape(d_rep, (n * m, 3)), alpha, which
    )
    return ad.reshape(color, (n, m, 3)), ad.reshape(density, (n, m))


def render_rays(field, origins, dirs, cfg: RenderConfig, alpha: float,
                rng=None, heads: str = "both"):
    """Render a batch of rays: stratified pass through the coarse head,
    importance pass (guided by coarse weights) through the fine head.

    Returns (coarse, fine) RenderOutputs. heads="coarse" skips the fine
    pass (stage-1 training); an exact-depth oracle field short-circuits
    to its analytic outputs.
    """
    if getattr(field, "is_exact_oracle", False):
        out = field.analytic_render(origins, dirs, cfg)
        return out, out
    n = origins.value.shape[0] if isinstance(origins, ad.Var) else len(origins)
    origins, dirs = ad.as_var(origins), ad.as_var(dirs)
    t_c = sample_stratified(cfg.near, cfg.far, n, cfg.n_coarse, cfg.sample_mode, rng)
    c_col, c_den = _query_on_samples(field, origins, dirs, t_c, alpha, "coarse")
    coarse = composite(c_col, c_den, t_c, cfg.far)
    if heads == "coarse":
        return coarse, coarse
    if getattr(field, "single_mlp", False):
        return coarse, coarse
    t_f = sample_importance(coarse.weights.value, t_c, cfg.n_fine, cfg.far, rng)
    t_all = np.sort(np.concatenate([t_c, t_f], axis=-1), axis=-1)
    f_col, f_den = _query_on_samples(field, origins, dirs, t_all, alpha, "fine")
    fine = composite(f_col, f_den, t_all, cfg.far)
    return coarse, fine


def render_pixel(field, pose, K: Intrinsics, pixel, alpha: float,
                 cfg: RenderConfig, rng=None):
    """Render one pixel; errors if it is out of bounds."""
    pixel = np.asarray(pixel, dtype=np.float64)
    if not K.in_bounds(pixel).all():
        raise RenderError(f"pixel {pixel} outside image bounds")
    origins, dirs = rays_for_pixels(pose, K, pixel[None])
    return render_rays(field, origins, dirs, cfg, alpha, rng)


def render_image(field, pose, K: Intrinsics, cfg: RenderConfig, alpha: float,
                 rng=None, chunk: int = 1024):
    """Full-image render; returns (rgb, depth) arrays from the fine head."""
    ys, xs = np.mgrid[0 : K.height, 0 : K.width]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    rgb = np.zeros((len(pixels), 3))
    depth = np.zeros(len(pixels))
    for s in range(0, len(pixels), chunk):
        pix = pixels[s : s + chunk]
        origins, dirs = rays_for_pixels(pose, K, pix)
        _, fine = render_rays(field, origins, dirs, cfg, alpha, rng)
        rgb[s : s + chunk] = fine.rgb.value
        depth[s : s + chunk] = fine.depth.value
    return rgb.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width)


def transmittance_at(field, pose_un: Pose, K: Intrinsics, point_cam, cfg: RenderConfig,
                     alpha: float, n_samples: int = 64, margin: float = 1e-3):
    """Transmittance of the virtual ray at a camera-frame point's depth.

    Projects the point into the virtual view; out-of-bounds projections
    return exactly 0. Otherwise composites densities on stratified
    samples between the near plane and just before the point.
    """
    point_cam = np.asarray(point_cam, dtype=np.float64)
    z = float(point_cam[2])
    if z <= 0:
        raise RenderError(f"point behind virtual camera: {point_cam}")
    pix = np.array([K.fx * point_cam[0] / z + K.cx, K.fy * point_cam[1] / z + K.cy])
    if not K.in_bounds(pix).all():
        return ad.constant(0.0)
    if getattr(field, "is_exact_oracle", False):
        return ad.constant(field.analytic_transmittance(pose_un, K, pix, z))
    z_end = max(z * (1.0 - margin), cfg.near * (1.0 + 1e-6))
    t = sample_stratified(cfg.near, z_end, 1, n_samples, "linear", None)
    origins, dirs = rays_for_pixels(pose_un, K, pix[None])
    _, density = _query_on_samples(field, origins, dirs, t, alpha, "coarse")
    deltas = np.concatenate([np.diff(t, axis=-1), (z_end - t[:, -1:])], axis=-1)
    return ad.exp(-ad.vsum(density * deltas))
