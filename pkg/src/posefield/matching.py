"""Pixel correspondences: data model, filtering, synthesis, and file I/O.

Real matcher output is ingested through the text format below; the
synthetic generator produces ground-truth-derived matches with
controllable Gaussian noise and outlier contamination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, pixel_dirs_cam, project


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class Correspondence:
    p: tuple  # pixel in view i
    q: tuple  # pixel in view j
    w: float  # confidence in [0, 1]


@dataclass
class CorrespondenceSet:
    view_i: int
    view_j: int
    matches: list

    def __post_init__(self):
        if self.view_i == self.view_j:
            raise MatchError("correspondence set needs two distinct views")

    def __len__(self):
        return len(self.matches)

    def arrays(self):
        """(P, Q, W) as numpy arrays; empty sets give (0,2)/(0,) shapes."""
        if not self.matches:
            return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
        P = np.array([m.p for m in self.matches], dtype=np.float64)
        Q = np.array([m.q for m in self.matches], dtype=np.float64)
        W = np.array([m.w for m in self.matches], dtype=np.float64)
        return P, Q, W


def filter_confidence(cset: CorrespondenceSet, kappa: float) -> CorrespondenceSet:
    if not 0.0 <= kappa <= 1.0:
        raise MatchError(f"kappa must be in [0,1], got {kappa}")
    return CorrespondenceSet(
        cset.view_i, cset.view_j, [m for m in cset.matches if m.w >= kappa]
    )


def filter_cyclic(fwd: CorrespondenceSet, bwd: CorrespondenceSet,
                  eps: float) -> CorrespondenceSet:
    """Keep (p, q) iff the backward match at round(q) lands within eps of p.

    Pixels of q missing from the backward set are dropped, not errors.
    """
    if fwd.view_i != bwd.view_j or fwd.view_j != bwd.view_i:
        raise MatchError("cyclic filter needs opposite-direction sets")
    back = {(round(m.p[0]), round(m.p[1])): m.q for m in bwd.matches}
    kept = []
    for m in fwd.matches:
        key = (round(m.q[0]), round(m.q[1]))
        pq = back.get(key)
        if pq is None:
            continue
        if np.hypot(pq[0] - m.p[0], pq[1] - m.p[1]) <= eps:
            kept.append(m)
    return CorrespondenceSet(fwd.view_i, fwd.view_j, kept)


def synth_matches(scene, pose_i: Pose, pose_j: Pose, K: Intrinsics, n: int,
                  noise_std: float = 0.0, outlier_frac: float = 0.0, rng=None,
                  view_i: int = 0, view_j: int = 1,
                  max_rounds: int = 60) -> CorrespondenceSet:
    """Ground-truth matches between two views of an analytic scene.

    Samples integer pixels in view i with a surface hit, projects the hit
    point into view j, discards occluded or out-of-view projections, then
    applies pixel noise to q and replaces a fraction with uniform outliers.
    """
    rng = rng or np.random.default_rng(0)
    collected_p, collected_q = [], []
    attempts = 0
    while len(collected_p) < n and attempts < max_rounds:
        attempts += 1
        px = rng.integers(0, K.width, size=2 * n)
        py = rng.integers(0, K.height, size=2 * n)
        pix = np.stack([px, py], axis=-1).astype(np.float64)
        dirs = pixel_dirs_cam(K, pix) @ pose_i.rotation.T
        origins = np.broadcast_to(pose_i.translation, dirs.shape)
        _, depth, hit = scene.raycast(origins, dirs)
        world = origins + depth[:, None] * dirs
        x_j = pose_j.inverse_transform(world)
        ok = hit & (x_j[:, 2] > 1e-6)
        if not ok.any():
            continue
        q = np.full((len(pix), 2), np.nan)
        q[ok] = project(K, x_j[ok])
        inb = np.zeros(len(pix), dtype=bool)
        inb[ok] = K.in_bounds(q[ok])
        ok &= inb
        # occlusion check in view j: the hit point must be the first surface
        if ok.any():
            dirs_j = pixel_dirs_cam(K, q[ok]) @ pose_j.rotation.T
            org_j = np.broadcast_to(pose_j.translation, dirs_j.shape)
            _, depth_j, hit_j = scene.raycast(org_j, dirs_j)
            vis = hit_j & (np.abs(depth_j - x_j[ok][:, 2]) <= 1e-6 * (1 + depth_j))
            idx = np.flatnonzero(ok)
            ok[idx[~vis]] = False
        collected_p.extend(map(tuple, pix[ok]))
        collected_q.extend(map(tuple, q[ok]))
    if len(collected_p) < n:
        raise MatchError(
            f"found only {len(collected_p)}/{n} covisible pixels after "
            f"{attempts} rounds"
        )
    P = np.array(collected_p[:n])
    Q = np.array(collected_q[:n])
    if noise_std > 0:
        Q = Q + rng.normal(0.0, noise_std, Q.shape)
    if outlier_frac > 0:
        out = rng.random(n) < outlier_frac
        Q[out, 0] = rng.uniform(0, K.width - 1, out.sum())
        Q[out, 1] = rng.uniform(0, K.height - 1, out.sum())
    matches = [Correspondence(tuple(p), tuple(q), 1.0) for p, q in zip(P, Q)]
    return CorrespondenceSet(view_i, view_j, matches)


def save_matches(cset: CorrespondenceSet, path) -> None:
    with open(path, "w") as f:
        f.write(f"MATCHES v1 {cset.view_i} {cset.view_j} {len(cset.matches)}\n")
        for m in cset.matches:
            f.write(f"{float(m.p[0])!r} {float(m.p[1])!r} {float(m.q[0])!r} "
                    f"{float(m.q[1])!r} {float(m.w)!r}\n")


def load_matches(path) -> CorrespondenceSet:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 5 or header[:2] != ["MATCHES", "v1"]:
            raise MatchError(f"{path}:1: bad match file header")
        vi, vj, count = int(header[2]), int(header[3]), int(header[4])
        matches = []
        for lineno, line in enumerate(f, 2):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 5:
                raise MatchError(
                    f"{path}:{lineno}: expected 5 fields, got {len(fields)}"
                )
            vals = [float(v) for v in fields]
            matches.append(Correspondence((vals[0], vals[1]), (vals[2], vals[3]), vals[4]))
    if len(matches) != count:
        raise MatchError(f"{path}: header says {count} matches, file has {len(matches)}")
    return CorrespondenceSet(vi, vj, matches)
