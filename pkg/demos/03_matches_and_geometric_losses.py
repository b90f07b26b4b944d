"""Correspondences and the two geometric losses, on analytic ground truth.

Shows why the losses are trustworthy before any network enters the
picture: with exact depths and exact poses the multi-view correspondence
loss is numerically zero, and the depth-consistency loss masks out
everything a virtual camera cannot actually see. Then both losses are
shown reacting to a deliberately corrupted pose.
"""

import numpy as np

from posefield import losses, matching
from posefield.geometry import interpolate_pose
from posefield.scenes import ExactOracleField, gen_dataset


def main():
    ds = gen_dataset(seed=3, n_views=3, layout="hemisphere", resolution=64)
    field = ExactOracleField(ds.scene)
    cfg = ds.render_config(n_coarse=32, n_fine=0)
    K = ds.intrinsics

    print("== correspondences ==")
    cs = matching.synth_matches(ds.scene, ds.gt_poses[0], ds.gt_poses[1],
                                K, 256, rng=np.random.default_rng(0))
    P, Q, W = cs.arrays()
    print(f"{len(cs)} covisible pixel pairs between views 0 and 1")
    print(f"pixel spread view 0: x [{P[:,0].min():.0f}, {P[:,0].max():.0f}], "
          f"y [{P[:,1].min():.0f}, {P[:,1].max():.0f}]")

    noisy = matching.synth_matches(ds.scene, ds.gt_poses[0], ds.gt_poses[1],
                                   K, 256, noise_std=2.0, outlier_frac=0.1,
                                   rng=np.random.default_rng(0))
    kept = matching.filter_confidence(noisy, 0.95)
    print(f"confidence filter at 0.95 keeps {len(kept)}/{len(noisy)} "
          "(synthetic matches carry w = 1, so all pass; real matchers prune here)")

    print()
    print("== correspondence loss ==")
    l0, _ = losses.mvcorr_loss(field, ds.gt_poses[0], ds.gt_poses[1], K,
                               P, Q, W, cfg, alpha=3.0)
    print(f"exact depths + exact poses + exact matches -> loss {float(l0.value):.3e}")

    bad = interpolate_pose(ds.gt_poses[1], ds.gt_poses[2], 0.25)
    l1, _ = losses.mvcorr_loss(field, ds.gt_poses[0], bad, K, P, Q, W,
                               cfg, alpha=3.0)
    print(f"same matches, view-1 pose dragged 25% toward view 2 -> "
          f"loss {float(l1.value):.1f}")
    print("the loss is a pure function of pose/depth error, which is what")
    print("lets it pull noisy cameras back into place during stage 1")

    print()
    print("== depth consistency + visibility mask ==")
    rng = np.random.default_rng(1)
    ys, xs = np.nonzero(ds.gt_depths[0] > 0)
    sel = rng.choice(len(xs), 200, replace=False)
    pix = np.stack([xs[sel], ys[sel]], axis=-1).astype(np.float64)

    for t in (0.25, 0.5, 0.75):
        virt = interpolate_pose(ds.gt_poses[0], ds.gt_poses[1], t)
        l, stats = losses.depth_consistency_loss(field, ds.gt_poses[0], virt,
                                                 K, pix, cfg, alpha=3.0)
        print(f"virtual camera at t={t:.2f}: loss {float(l.value):.2e}, "
              f"mask acceptance {stats['mask_acceptance']:.2f}")
    print("zero loss with partial acceptance is the designed behavior:")
    print("points occluded in (or outside of) the virtual view are masked,")
    print("never penalized")


if __name__ == "__main__":
    main()
