"""Synthetic scenes with analytic color/depth oracles and dataset I/O.

These stand in for real capture data: every rendered quantity has a
closed-form ground truth, which is what makes the geometric losses
verifiable at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose, save_poses, load_poses
from .renderer import RenderConfig, RenderOutput


class SceneError(ValueError):
    pass


# -- albedos ------------------------------------------------------------


@dataclass(frozen=True)
class ConstantAlbedo:
    color: tuple

    def at(self, pts: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.color), (len(pts), 3)).copy()

    def describe(self) -> str:
        return "constant " + " ".join(repr(float(c)) for c in self.color)


@dataclass(frozen=True)
class CheckerAlbedo:
    scale: float
    color_a: tuple
    color_b: tuple

    def at(self, pts: np.ndarray) -> np.ndarray:
        parity = np.floor(pts / self.scale).sum(axis=-1).astype(int) % 2
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        return np.where(parity[:, None] == 0, a, b)

    def describe(self) -> str:
        vals = (self.scale, *self.color_a, *self.color_b)
        return "checker " + " ".join(repr(float(v)) for v in vals)


def _parse_albedo(fields):
    if fields[0] == "constant":
        return ConstantAlbedo(tuple(float(v) for v in fields[1:4]))
    if fields[0] == "checker":
        return CheckerAlbedo(
            float(fields[1]),
            tuple(float(v) for v in fields[2:5]),
            tuple(float(v) for v in fields[5:8]),
        )
    raise SceneError(f"unknown albedo kind {fields[0]!r}")


# -- primitives ---------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: object

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter per ray, inf on miss."""
        oc = o - np.asarray(self.center)
        a = (d * d).sum(-1)
        b = 2.0 * (oc * d).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - 4 * a * c
        t = np.full(len(o), np.inf)
        hit = disc >= 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        tt = np.where(t1 > 1e-9, t1, np.where(t2 > 1e-9, t2, np.inf))
        t[hit] = tt[hit]
        return t

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return ((pts - np.asarray(self.center)) ** 2).sum(-1) <= self.radius**2

    def describe(self) -> str:
        return (
            "sphere "
            + " ".join(repr(float(v)) for v in (*self.center, self.radius))
            + " "
            + self.albedo.describe()
        )


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple  # full extents
    albedo: object

    def _bounds(self):
        c = np.asarray(self.center)
        h = np.asarray(self.size) / 2.0
        return c - h, c + h

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        lo, hi = self._bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
        t = np.where((tmax >= tmin) & (tmax > 1e-9), np.where(tmin > 1e-9, tmin, tmax), np.inf)
        return t

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self._bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def describe(self) -> str:
        return (
            "box "
            + " ".join(repr(float(v)) for v in (*self.center, *self.size))
            + " "
            + self.albedo.describe()
        )


@dataclass(frozen=True)
class Plane:
    """Finite horizontal square at height z0, normal +z."""

    z0: float
    half_extent: float
    albedo: object
    thickness: float = 0.2  # slab depth used by the density oracle

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z0 - o[:, 2]) / d[:, 2]
            p = o + t[:, None] * d
        ok = (
            (t > 1e-9)
            & np.isfinite(t)
            & (np.abs(p[:, 0]) <= self.half_extent)
            & (np.abs(p[:, 1]) <= self.half_extent)
        )
        return np.where(ok, t, np.inf)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (
            (pts[:, 2] <= self.z0)
            & (pts[:, 2] >= self.z0 - self.thickness)
            & (np.abs(pts[:, 0]) <= self.half_extent)
            & (np.abs(pts[:, 1]) <= self.half_extent)
        )

    def describe(self) -> str:
        return (f"plane {float(self.z0)!r} {float(self.half_extent)!r} "
                + self.albedo.describe())


# -- scene --------------------------------------------------------------


@dataclass
class SyntheticScene:
    primitives: list
    near: float
    far: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise SceneError("scene radius must be positive")

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest-hit color and depth per ray; miss gives black, depth 0.

        Returns (colors (N,3), depths (N,), hit mask (N,)).
        """
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        best_t = np.full(len(origins), np.inf)
        best_idx = np.full(len(origins), -1)
        for k, prim in enumerate(self.primitives):
            t = prim.intersect(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_idx[closer] = k
        hit = np.isfinite(best_t)
        colors = np.zeros((len(origins), 3))
        depths = np.where(hit, best_t, 0.0)
        for k, prim in enumerate(self.primitives):
            sel = best_idx == k
            if sel.any():
                pts = origins[sel] + best_t[sel, None] * dirs[sel]
                colors[sel] = prim.albedo.at(pts)
        return colors, depths, hit

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"SCENE v1 {float(self.near)!r} {float(self.far)!r} "
                    f"{float(self.radius)!r}\n")
            for p in self.primitives:
                f.write(p.describe() + "\n")

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        with open(path) as f:
            header = f.readline().split()
            if header[:2] != ["SCENE", "v1"]:
                raise SceneError(f"{path}: bad scene header")
            near, far, radius = map(float, header[2:5])
            prims = []
            for lineno, line in enumerate(f, 2):
                fields = line.split()
                if not fields:
                    continue
                try:
                    if fields[0] == "sphere":
                        prims.append(
                            Sphere(tuple(map(float, fields[1:4])), float(fields[4]),
                                   _parse_albedo(fields[5:]))
                        )
                    elif fields[0] == "box":
                        prims.append(
                            Box(tuple(map(float, fields[1:4])), tuple(map(float, fields[4:7])),
                                _parse_albedo(fields[7:]))
                        )
                    elif fields[0] == "plane":
                        prims.append(
                            Plane(float(fields[1]), float(fields[2]), _parse_albedo(fields[3:]))
                        )
                    else:
                        raise SceneError(f"unknown primitive {fields[0]!r}")
                except (IndexError, ValueError) as e:
                    raise SceneError(f"{path}:{lineno}: {e}") from e
        return cls(prims, near, far, radius)


def default_scene() -> SyntheticScene:
    """Checkered sphere + box + ground plane; enough occlusion structure
    to exercise the visibility mask."""
    return SyntheticScene(
        primitives=[
            Sphere((0.0, 0.0, 0.1), 0.9, CheckerAlbedo(0.45, (0.9, 0.25, 0.2), (0.95, 0.85, 0.3))),
            Box((0.9, -0.7, -0.45), (0.8, 0.8, 0.7), ConstantAlbedo((0.2, 0.45, 0.85))),
            Plane(-0.8, 3.0, CheckerAlbedo(0.8, (0.75, 0.75, 0.75), (0.35, 0.35, 0.4))),
        ],
        near=1.5,
        far=7.0,
        radius=1.8,
    )


# -- oracle fields ------------------------------------------------------


class DensityOracleField:
    """Field with analytic densities: constant inside primitives, zero
    outside. Quacks like a RadianceField for the volume renderer."""

    single_mlp = True

    def __init__(self, scene: SyntheticScene, density: float = 1e4):
        self.scene = scene
        self.density = density

    def query(self, points, dirs, alpha: float, which: str = "coarse"):
        pts = points.value if isinstance(points, ad.Var) else np.asarray(points)
        inside = np.zeros(len(pts), dtype=bool)
        colors = np.full((len(pts), 3), 0.0)
        for prim in self.scene.primitives:
            sel = prim.contains(pts) & ~inside
            if sel.any():
                colors[sel] = prim.albedo.at(pts[sel])
                inside[sel] = True
        dens = getattr(self, "_density_fn", None)
        sigma = np.where(inside, self.density, 0.0) if dens is None else dens(pts)
        return ad.constant(colors), ad.constant(sigma)


class ExactOracleField:
    """Field whose rendered depth and color equal the analytic raycast.

    Used where the spec needs zero-residual substrates: discretization
    error of real volume rendering would swamp the tolerances.
    """

    is_exact_oracle = True
    single_mlp = True

    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def analytic_render(self, origins, dirs, cfg: RenderConfig) -> RenderOutput:
        o = origins.value if isinstance(origins, ad.Var) else np.atleast_2d(origins)
        d = dirs.value if isinstance(dirs, ad.Var) else np.atleast_2d(dirs)
        colors, depths, hit = self.scene.raycast(o, d)
        n = len(o)
        w = hit.astype(float)[:, None]
        return RenderOutput(
            rgb=ad.constant(colors),
            depth=ad.constant(depths),
            weights=ad.constant(w),
            transmittance=ad.constant(np.ones((n, 1))),
            opacity=ad.constant(w[:, 0]),
            depths=depths[:, None],
            sigma_deltas=ad.constant(np.zeros((n, 1))),
        )

    def analytic_transmittance(self, pose_un: Pose, K: Intrinsics, pix: np.ndarray,
                               z: float, rel_tol: float = 1e-4) -> float:
        """Binary visibility: 0 if a surface sits strictly before depth z."""
        from .geometry import pixel_dirs_cam

        d = (pixel_dirs_cam(K, pix[None]) @ pose_un.rotation.T)[0]
        _, depth, hit = self.scene.raycast(pose_un.translation[None], d[None])
        if hit[0] and depth[0] < z * (1.0 - rel_tol):
            return 0.0
        return 1.0


# -- dataset ------------------------------------------------------------


@dataclass
class DatasetBundle:
    images: list
    gt_depths: list
    gt_poses: list
    intrinsics: Intrinsics
    scene: SyntheticScene
    init_poses: list | None = None

    @property
    def n_views(self) -> int:
        return len(self.images)

    def render_config(self, n_coarse: int = 64, n_fine: int = 64,
                      depth_margin: float = 0.0, mode: str = "linear") -> RenderConfig:
        return RenderConfig(
            n_coarse=n_coarse,
            n_fine=n_fine,
            near=self.scene.near * (1.0 - depth_margin),
            far=self.scene.far * (1.0 + depth_margin),
            sample_mode=mode,
        )


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z forward, +x right, +y down in frame."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, -up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def camera_layout(layout: str, n_views: int, distance: float, rng) -> list:
    target = np.zeros(3)
    poses = []
    if layout == "hemisphere":
        for i in range(n_views):
            az = -0.9 + 1.8 * (i / max(n_views - 1, 1)) + rng.uniform(-0.05, 0.05)
            el = 0.45 + 0.25 * rng.uniform(-1, 1)
            eye = distance * np.array(
                [np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)]
            )
            poses.append(look_at(eye, target))
    elif layout == "forward_facing":
        for i in range(n_views):
            off = np.array(
                [(i / max(n_views - 1, 1) - 0.5) * 1.6, rng.uniform(-0.3, 0.3), 0.0]
            )
            eye = np.array([0.0, -distance, 0.6]) + off
            poses.append(look_at(eye, target))
    else:
        raise SceneError(f"unknown layout {layout!r}")
    return poses


def gen_dataset(seed: int, n_views: int, layout: str = "hemisphere",
                resolution: int = 64, scene: SyntheticScene | None = None,
                min_coverage: float = 0.3) -> DatasetBundle:
    """Cameras on the requested layout looking at the origin; GT images and
    depths rendered by raycasting."""
    if n_views < 2:
        raise SceneError(f"need at least 2 views, got {n_views}")
    if resolution <= 0:
        raise SceneError("resolution must be positive")
    scene = scene or default_scene()
    rng = np.random.default_rng(seed)
    distance = (scene.near + scene.far) / 2.0
    poses = camera_layout(layout, n_views, distance, rng)
    K = Intrinsics(
        fx=float(resolution), fy=float(resolution),
        cx=(resolution - 1) / 2.0, cy=(resolution - 1) / 2.0,
        width=resolution, height=resolution,
    )
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(np.float64)
    from .geometry import pixel_dirs_cam

    dirs_cam = pixel_dirs_cam(K, pixels)
    images, depths = [], []
    for pose in poses:
        dirs = dirs_cam @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        colors, depth, hit = scene.raycast(origins, dirs)
        cov = hit.mean()
        if cov < min_coverage:
            raise SceneError(
                f"camera sees only {cov:.0%} foreground (< {min_coverage:.0%})"
            )
        images.append(colors.reshape(resolution, resolution, 3))
        depths.append(depth.reshape(resolution, resolution))
    return DatasetBundle(images, depths, poses, K, scene)


# -- image / depth / dataset I/O ----------------------------------------


def save_ppm(image: np.ndarray, path) -> None:
    """8-bit binary PPM (P6), naive quantization of [0,1]."""
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise SceneError(f"{path}: not a P6 PPM")
    w, h = map(int, parts[1].split())
    body = parts[3]
    need = w * h * 3
    if len(body) < need:
        raise SceneError(
            f"{path}: truncated PPM, needed {need} pixel bytes, "
            f"got {len(body)} (offset {len(raw) - len(body)})"
        )
    arr = np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def save_depth(depth: np.ndarray, path) -> None:
    h, w = depth.shape
    with open(path, "w") as f:
        f.write(f"DEPTH {w} {h}\n")
        for row in depth:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_depth(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "DEPTH":
            raise SceneError(f"{path}: bad depth header")
        w, h = int(header[1]), int(header[2])
        vals = np.array(f.read().split(), dtype=np.float64)
    if vals.size != w * h:
        raise SceneError(f"{path}: expected {w*h} depth values, got {vals.size}")
    return vals.reshape(h, w)


def save_dataset(bundle: DatasetBundle, path) -> None:
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "depth"), exist_ok=True)
    bundle.intrinsics.save(os.path.join(path, "intrinsics.txt"))
    save_poses(bundle.gt_poses, os.path.join(path, "poses_gt.txt"))
    if bundle.init_poses is not None:
        save_poses(bundle.init_poses, os.path.join(path, "poses_init.txt"))
    bundle.scene.save(os.path.join(path, "scene.txt"))
    for i, (img, dep) in enumerate(zip(bundle.images, bundle.gt_depths)):
        save_ppm(img, os.path.join(path, "images", f"{i:03d}.ppm"))
        save_depth(dep, os.path.join(path, "depth", f"{i:03d}.dep"))


def load_dataset(path) -> DatasetBundle:
    for req in ("intrinsics.txt", "poses_gt.txt", "scene.txt"):
        if not os.path.exists(os.path.join(path, req)):
            raise SceneError(f"dataset is missing {req}")
    K = Intrinsics.load(os.path.join(path, "intrinsics.txt"))
    poses = load_poses(os.path.join(path, "poses_gt.txt"))
    scene = SyntheticScene.load(os.path.join(path, "scene.txt"))
    init_path = os.path.join(path, "poses_init.txt")
    init_poses = load_poses(init_path) if os.path.exists(init_path) else None
    images, depths = [], []
    for i in range(len(poses)):
        images.append(load_ppm(os.path.join(path, "images", f"{i:03d}.ppm")))
        depths.append(load_depth(os.path.join(path, "depth", f"{i:03d}.dep")))
    return DatasetBundle(images, depths, poses, K, scene, init_poses)
