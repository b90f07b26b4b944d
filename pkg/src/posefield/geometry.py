"""Camera models, rigid and similarity transforms, rays, and pose noise.

Poses are stored camera-to-world (the public convention). The trainable
parametrization (:class:`PoseParam`) is world-to-camera with a 6-vector
rotation embedding; the conversion between the two happens only here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inv_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def in_bounds(self, p) -> np.ndarray:
        p = np.atleast_2d(p)
        return (
            (p[:, 0] >= 0) & (p[:, 0] <= self.width - 1)
            & (p[:, 1] >= 0) & (p[:, 1] <= self.height - 1)
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"{float(self.fx)!r} {float(self.fy)!r} {float(self.cx)!r} "
                    f"{float(self.cy)!r} {self.width} {self.height}\n")

    @classmethod
    def load(cls, path) -> "Intrinsics":
        fields = open(path).read().split()
        if len(fields) != 6:
            raise GeometryError(f"{path}: expected 6 intrinsics fields, got {len(fields)}")
        fx, fy, cx, cy = map(float, fields[:4])
        w, h = int(fields[4]), int(fields[5])
        return cls(fx, fy, cx, cy, w, h)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {R.shape}")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise GeometryError("matrix is not a proper rotation")


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        _check_rotation(self.rotation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def w2c(self) -> tuple[np.ndarray, np.ndarray]:
        """World-to-camera (R, t) of this pose."""
        return self.rotation.T, -self.rotation.T @ self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world frame (row-vector batch)."""
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: Pose) -> Pose:
    return Pose(p.rotation.T, -p.rotation.T @ p.translation)


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise GeometryError(f"Sim3 scale must be positive, got {self.scale}")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        _check_rotation(self.rotation)

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "Sim3":
        Rinv = self.rotation.T
        return Sim3(1.0 / self.scale, Rinv, -Rinv @ self.translation / self.scale)


def apply_sim3(s: Sim3, pose: Pose) -> Pose:
    return Pose(
        s.rotation @ pose.rotation,
        s.scale * s.rotation @ pose.translation + s.translation,
    )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise GeometryError(f"require 0 < near < far, got {self.near}, {self.far}")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))

    def at(self, t) -> np.ndarray:
        t = np.asarray(t)
        return self.origin + t[..., None] * self.direction


# -- projection ---------------------------------------------------------


def project(K: Intrinsics, x_cam) -> np.ndarray:
    """Pinhole projection of camera-frame points (batched over rows)."""
    x = np.atleast_2d(np.asarray(x_cam, dtype=np.float64))
    z = x[:, 2]
    if np.any(z <= 0):
        bad = x[np.argmax(z <= 0)]
        raise GeometryError(f"cannot project point with non-positive depth: {bad}")
    p = np.stack([K.fx * x[:, 0] / z + K.cx, K.fy * x[:, 1] / z + K.cy], axis=-1)
    return p[0] if np.ndim(x_cam) == 1 else p


def backproject(K: Intrinsics, p, z) -> np.ndarray:
    """Pixel + depth to camera-frame point: z * K^-1 * [p, 1]."""
    p2 = np.atleast_2d(np.asarray(p, dtype=np.float64))
    z2 = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if np.any(z2 <= 0):
        raise GeometryError(f"backproject requires positive depth, got {z2.min()}")
    x = np.stack(
        [(p2[:, 0] - K.cx) / K.fx * z2, (p2[:, 1] - K.cy) / K.fy * z2, z2], axis=-1
    )
    return x[0] if np.ndim(p) == 1 else x


def pixel_dirs_cam(K: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """K^-1 applied to homogeneous pixels; z component is 1."""
    p = np.atleast_2d(pixels)
    return np.stack(
        [(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy, np.ones(len(p))], axis=-1
    )


def ray_for_pixel(pose: Pose, K: Intrinsics, p, near: float, far: float) -> Ray:
    p = np.asarray(p, dtype=np.float64)
    if not K.in_bounds(p).all():
        raise GeometryError(f"pixel {p} outside {K.width}x{K.height} image")
    d = pose.rotation @ pixel_dirs_cam(K, p)[0]
    return Ray(pose.translation, d, near, far)


# -- 6-vector rotation --------------------------------------------------


def rotation_from_6d(r6: np.ndarray) -> np.ndarray:
    """Recover a rotation from its first two columns by Gram-Schmidt."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[:3], r6[3:6]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise GeometryError("rotation_from_6d: first column is zero")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 < 1e-12:
        raise GeometryError("rotation_from_6d: columns are parallel or second is zero")
    b2 = u2 / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=-1)


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    _check_rotation(R)
    return np.concatenate([R[:, 0], R[:, 1]])


def rotation_from_6d_var(r6: ad.Var) -> ad.Var:
    """Differentiable 6-vector to rotation map (columns stacked on axis 1)."""
    a1, a2 = r6[slice(0, 3)], r6[slice(3, 6)]
    b1 = a1 / ad.norm(a1)
    u2 = a2 - ad.dot(b1, a2) * b1
    b2 = u2 / ad.norm(u2)
    b3 = ad.cross3(b1, b2)
    return ad.stack([b1, b2, b3], axis=1)


class PoseParam:
    """Trainable world-to-camera pose: 6-vector rotation + translation.

    Holds frozen initial values; the optimizer owns the Params. decode()
    returns the camera-to-world Pose, decode_vars() the differentiable
    world-to-camera (R, t) pair used to build rays and transforms.
    """

    def __init__(self, init: Pose, name: str):
        R_w2c, t_w2c = init.w2c()
        self.r6_init = rotation_to_6d(R_w2c)
        self.t3_init = t_w2c.copy()
        self.r6 = ad.Param(self.r6_init.copy(), f"{name}.r6")
        self.t3 = ad.Param(self.t3_init.copy(), f"{name}.t3")
        self.name = name

    @property
    def params(self) -> list:
        return [self.r6, self.t3]

    def decode_vars(self) -> tuple[ad.Var, ad.Var]:
        return rotation_from_6d_var(self.r6), self.t3

    def decode(self) -> Pose:
        R_w2c = rotation_from_6d(self.r6.value)
        t_w2c = np.asarray(self.t3.value, dtype=np.float64)
        return Pose(R_w2c.T, -R_w2c.T @ t_w2c)

    def reset(self) -> None:
        self.r6.value = np.array(self.r6_init, dtype=ad.default_dtype())
        self.t3.value = np.array(self.t3_init, dtype=ad.default_dtype())


# -- interpolation and perturbation -------------------------------------


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def _log_so3(R: np.ndarray) -> np.ndarray:
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    """Slerp the rotation, lerp the translation."""
    if not 0.0 <= t <= 1.0:
        raise GeometryError(f"interpolation factor must be in [0,1], got {t}")
    w = _log_so3(a.rotation.T @ b.rotation)
    return Pose(
        a.rotation @ _rodrigues(t * w),
        (1.0 - t) * a.translation + t * b.translation,
    )


def perturb_pose(pose: Pose, level: float, scene_radius: float, rng) -> tuple[Pose, float, float]:
    """Left-multiply the world-to-camera form by Gaussian tangent noise.

    Rotation axis-angle components ~ N(0, level^2) radians; translation
    components ~ N(0, (level*scene_radius)^2). Returns the perturbed pose
    plus the realized rotation offset (radians) and center offset.
    """
    if level < 0:
        raise GeometryError(f"noise level must be >= 0, got {level}")
    w = rng.normal(0.0, level, 3) if level > 0 else np.zeros(3)
    v = rng.normal(0.0, level * scene_radius, 3) if level > 0 else np.zeros(3)
    R_w2c, t_w2c = pose.w2c()
    Rn = _rodrigues(w)
    R_new = Rn @ R_w2c
    t_new = Rn @ t_w2c + v
    out = Pose(R_new.T, -R_new.T @ t_new)
    return out, float(np.linalg.norm(w)), float(np.linalg.norm(v))


# -- pose text format ---------------------------------------------------


def save_poses(poses, path) -> None:
    """One camera per line: id, camera-to-world rotation row-major, translation."""
    with open(path, "w") as f:
        for i, p in enumerate(poses):
            vals = " ".join(repr(float(v)) for v in np.concatenate([p.rotation.ravel(), p.translation]))
            f.write(f"{i} {vals}\n")


def load_poses(path) -> list:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 13:
                raise GeometryError(f"{path}:{lineno}: expected 13 fields, got {len(fields)}")
            vals = np.array([float(v) for v in fields[1:]])
            R = vals[:9].reshape(3, 3)
            # re-orthonormalize against text round-off
            u, _, vt = np.linalg.svd(R)
            R = u @ vt
            if np.linalg.det(R) < 0:
                u[:, -1] *= -1
                R = u @ vt
            poses.append(Pose(R, vals[9:12]))
    return poses
