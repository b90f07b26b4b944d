"""Command-line entry point for reproducible experiments.

Subcommands: gen-scene, perturb-poses, gen-matches, train, render, eval,
ablate. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
Every run writes a `run.txt` manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from .evaluation import (depth_error, psnr, ransac_pair_align, ssim,
                         test_time_pose_opt)
from .field import EncodingConfig, MlpConfig, RadianceField
from .geometry import load_poses, perturb_pose, save_poses
from .matching import load_matches, save_matches, synth_matches
from .renderer import render_image
from .scenes import load_dataset, gen_dataset, save_dataset, save_ppm, save_depth
from .training import TrainConfig, TrainError, parse_config_file, save_config_file, train


class UsageError(ValueError):
    pass


def _write_manifest(out_dir, command, args_dict, seed, duration, inputs=(),
                    outputs=()):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.txt"), "w") as fh:
        fh.write(f"command = {command}\n")
        fh.write(f"version = {__version__}\n")
        fh.write(f"seed = {seed}\n")
        for k in sorted(args_dict):
            fh.write(f"arg.{k} = {args_dict[k]}\n")
        for p in inputs:
            fh.write(f"input = {p}\n")
        for p in outputs:
            fh.write(f"output = {p}\n")
        fh.write(f"duration_sec = {duration:.3f}\n")


def _resolve_config(args) -> TrainConfig:
    """flag (--set key=value) > config file > dataclass default."""
    if getattr(args, "config", None):
        cfg = parse_config_file(args.config)
    else:
        cfg = TrainConfig()
    overrides = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        if key not in fields:
            raise UsageError(f"unknown config key {key!r}")
        ftype = fields[key].type
        if ftype == "bool":
            overrides[key] = val.lower() in ("true", "1", "yes")
        elif ftype == "int":
            overrides[key] = int(val)
        elif ftype == "float":
            overrides[key] = float(val)
        else:
            overrides[key] = val
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _build_field(cfg: TrainConfig) -> RadianceField:
    return RadianceField(
        EncodingConfig(L_x=cfg.L_x, L_d=cfg.L_d),
        MlpConfig(depth=cfg.mlp_depth, width=cfg.mlp_width,
                  skip_layers=(cfg.mlp_depth // 2,)),
        single_mlp=cfg.single_mlp,
        seed=cfg.seed,
    )


def _load_field(checkpoint, cfg: TrainConfig) -> RadianceField:
    field = _build_field(cfg)
    state = ad.load_checkpoint(checkpoint)
    field.load_state_dict(state)
    return field


def _load_match_dir(path, n_views):
    matches = {}
    for i in range(n_views):
        for j in range(n_views):
            if i == j:
                continue
            fp = os.path.join(path, f"matches_{i:03d}_{j:03d}.txt")
            if os.path.exists(fp):
                matches[(i, j)] = load_matches(fp)
    if not matches:
        raise UsageError(f"no match files found under {path}")
    return matches


# -- subcommands --------------------------------------------------------


def cmd_gen_scene(args):
    t0 = time.time()
    if args.views < 2:
        raise UsageError("need at least 2 views")
    ds = gen_dataset(seed=args.seed, n_views=args.views, layout=args.layout,
                     resolution=args.res)
    save_dataset(ds, args.out)
    _write_manifest(args.out, "gen-scene", vars(args), args.seed,
                    time.time() - t0, outputs=[args.out])
    print(f"wrote {args.views}-view dataset at {args.res}x{args.res} to {args.out}")
    return 0


def cmd_perturb_poses(args):
    t0 = time.time()
    ds = load_dataset(getattr(args, "in"))
    rng = np.random.default_rng(args.seed)
    noisy, rots, trs = [], [], []
    for p in ds.gt_poses:
        q, dr, dt = perturb_pose(p, args.level, ds.scene.radius, rng)
        noisy.append(q)
        rots.append(np.degrees(dr))
        trs.append(dt)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "poses_init.txt")
    save_poses(noisy, out_path)
    print(f"perturbed {len(noisy)} poses: mean rotation {np.mean(rots):.3f} deg, "
          f"mean translation {np.mean(trs):.4f} world units")
    _write_manifest(args.out, "perturb-poses", vars(args), args.seed,
                    time.time() - t0, inputs=[getattr(args, "in")],
                    outputs=[out_path])
    return 0


def cmd_gen_matches(args):
    t0 = time.time()
    ds = load_dataset(args.dataset)
    n = ds.n_views
    if args.pairs == "all":
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    elif args.pairs == "ring":
        pairs = [(i, (i + 1) % n) for i in range(n)]
        pairs += [((i + 1) % n, i) for i in range(n)]
    else:
        raise UsageError(f"unknown pair scheme {args.pairs!r}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    outs = []
    for i, j in pairs:
        cs = synth_matches(ds.scene, ds.gt_poses[i], ds.gt_poses[j],
                           ds.intrinsics, args.n, noise_std=args.noise,
                           outlier_frac=args.outliers, rng=rng,
                           view_i=i, view_j=j)
        fp = os.path.join(args.out, f"matches_{i:03d}_{j:03d}.txt")
        save_matches(cs, fp)
        outs.append(fp)
    print(f"wrote {len(outs)} match files ({args.n} matches each)")
    _write_manifest(args.out, "gen-matches", vars(args), args.seed,
                    time.time() - t0, inputs=[args.dataset], outputs=outs)
    return 0


def cmd_train(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    ds = load_dataset(args.dataset)
    matches = None
    if cfg.use_mvcorr:
        if not args.matches:
            raise UsageError("use_mvcorr requires --matches")
        matches = _load_match_dir(args.matches, ds.n_views)
    os.makedirs(args.out, exist_ok=True)
    save_config_file(cfg, os.path.join(args.out, "config.txt"))
    field, poses, log, state = train(ds, matches, None, cfg, out_dir=args.out)
    status = "aborted (divergence)" if state.aborted else "completed"
    last = log[-1] if log else {}
    print(f"training {status} after {state.iter} iters; "
          f"final rot_err {last.get('rot_err', float('nan')):.3f} deg, "
          f"trans_err {last.get('trans_err', float('nan')):.4f}")
    _write_manifest(args.out, "train", vars(args), cfg.seed, time.time() - t0,
                    inputs=[args.dataset] + ([args.matches] if args.matches else []),
                    outputs=[os.path.join(args.out, "log.csv")])
    return 0 if not state.aborted else 1


def cmd_render(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    ds = load_dataset(args.dataset)
    field = _load_field(args.checkpoint, cfg)
    poses = load_poses(args.poses)
    rcfg = ds.render_config(cfg.n_coarse, cfg.n_fine, 0.0, cfg.sample_mode)
    os.makedirs(args.out, exist_ok=True)
    outs = []
    for k, pose in enumerate(poses):
        rgb, depth = render_image(field, pose, ds.intrinsics, rcfg,
                                  alpha=float(cfg.L_x))
        ip = os.path.join(args.out, f"render_{k:03d}.ppm")
        dp = os.path.join(args.out, f"render_{k:03d}.dep")
        save_ppm(rgb, ip)
        save_depth(depth, dp)
        outs += [ip, dp]
    print(f"rendered {len(poses)} views to {args.out}")
    _write_manifest(args.out, "render", vars(args), cfg.seed, time.time() - t0,
                    inputs=[args.checkpoint, args.poses], outputs=outs)
    return 0


def cmd_eval(args):
    t0 = time.time()
    cfg = _resolve_config(args)
    ds = load_dataset(args.dataset)
    field = _load_field(args.checkpoint, cfg)
    poses = load_poses(args.poses) if args.poses else ds.gt_poses
    align = ransac_pair_align(poses, ds.gt_poses)
    scale = align.sim3.scale
    rcfg = ds.render_config(cfg.n_coarse, cfg.n_fine, 0.0, cfg.sample_mode)
    psnrs, ssims, derrs = [], [], []
    for k, pose in enumerate(poses):
        if args.tt_opt:
            pose, _, _ = test_time_pose_opt(
                field, ds.intrinsics, ds.images[k], pose, rcfg,
                alpha=float(cfg.L_x), rng=np.random.default_rng(cfg.seed))
        rgb, depth = render_image(field, pose, ds.intrinsics, rcfg,
                                  alpha=float(cfg.L_x))
        psnrs.append(psnr(rgb, ds.images[k]))
        ssims.append(ssim(rgb, ds.images[k]))
        derrs.append(depth_error(depth, ds.gt_depths[k], scale))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write("scene,views,rot_err_deg,trans_err_x100,psnr,ssim,depth_err\n")
        fh.write(f"synthetic,{ds.n_views},{align.mean_rot_deg:.6f},"
                 f"{100.0 * align.mean_trans:.6f},{np.mean(psnrs):.4f},"
                 f"{np.mean(ssims):.6f},{np.mean(derrs):.6f}\n")
    print(f"rot {align.mean_rot_deg:.3f} deg | trans x100 "
          f"{100 * align.mean_trans:.3f} | psnr {np.mean(psnrs):.2f} | "
          f"ssim {np.mean(ssims):.4f} | depth {np.mean(derrs):.4f}")
    _write_manifest(args.out, "eval", vars(args), cfg.seed, time.time() - t0,
                    inputs=[args.checkpoint, args.dataset], outputs=[csv_path])
    return 0


_ABLATE_CELLS = {
    "photo": dict(use_mvcorr=False, use_dcons=False),
    "photo+mvcorr": dict(use_mvcorr=True, use_dcons=False),
    "photo+mvcorr+dcons": dict(use_mvcorr=True, use_dcons=True),
}


def cmd_ablate(args):
    t0 = time.time()
    cells = [c.strip() for c in args.grid.split(",") if c.strip()]
    if not cells:
        raise UsageError("empty ablation grid")
    for c in cells:
        if c not in _ABLATE_CELLS:
            raise UsageError(
                f"unknown grid cell {c!r}; choose from {sorted(_ABLATE_CELLS)}")
    base = _resolve_config(args)
    ds = load_dataset(args.dataset)
    matches = _load_match_dir(args.matches, ds.n_views) if args.matches else None
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for cell in cells:
        cell_dir = os.path.join(args.out, cell.replace("+", "_"))
        if os.path.exists(os.path.join(cell_dir, "run.txt")):
            print(f"skipping finished cell {cell}")
        else:
            tc = time.time()
            cfg = dataclasses.replace(base, **_ABLATE_CELLS[cell])
            os.makedirs(cell_dir, exist_ok=True)
            train(ds, matches if cfg.use_mvcorr else None, None, cfg,
                  out_dir=cell_dir)
            _write_manifest(cell_dir, "ablate-cell", {"cell": cell}, cfg.seed,
                            time.time() - tc)
        from .training import LOG_COLUMNS  # lazy: header order shared with log
        with open(os.path.join(cell_dir, "log.csv")) as fh:
            last = fh.readlines()[-1].strip().split(",")
        rows.append((cell, dict(zip(LOG_COLUMNS, last))))
    table = os.path.join(args.out, "ablation.csv")
    with open(table, "w") as fh:
        fh.write("cell,rot_err,trans_err,photo,total\n")
        for cell, r in rows:
            fh.write(f"{cell},{r['rot_err']},{r['trans_err']},"
                     f"{r['photo']},{r['total']}\n")
    print(f"ablation table with {len(rows)} rows at {table}")
    _write_manifest(args.out, "ablate", vars(args),
                    getattr(args, "seed", None) or base.seed,
                    time.time() - t0, outputs=[table])
    return 0


# -- argument parsing ---------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="posefield",
        description="Joint radiance-field and camera-pose optimization toolkit")
    ap.add_argument("--threads", type=int, default=0,
                    help="worker threads (0 = hardware count); use 1 with "
                         "--deterministic for bitwise-reproducible runs")
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded deterministic reductions")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--layout", default="hemisphere",
                   choices=["hemisphere", "forward_facing"])
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("perturb-poses", help="add pose noise to a dataset")
    p.add_argument("--in", required=True, dest="in")
    p.add_argument("--level", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb_poses)

    p = sub.add_parser("gen-matches", help="synthesize correspondences")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pairs", default="all", choices=["all", "ring"])
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--outliers", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_matches)

    def add_cfg_flags(p):
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field (repeatable)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="staged joint optimization")
    p.add_argument("--dataset", required=True)
    p.add_argument("--matches", default=None)
    add_cfg_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--dataset", required=True)
    add_cfg_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="alignment + image metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--poses", default=None)
    p.add_argument("--tt-opt", action="store_true", dest="tt_opt")
    add_cfg_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-flag ablation grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--matches", default=None)
    p.add_argument("--grid", required=True,
                   help="comma list, e.g. photo,photo+mvcorr,photo+mvcorr+dcons")
    add_cfg_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def _apply_thread_limits(args) -> None:
    n = 1 if args.deterministic else args.threads
    if n <= 0:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass  # BLAS keeps its defaults; pure-numpy paths are unaffected


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _apply_thread_limits(args)
    try:
        return args.func(args)
    except (UsageError, TrainError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # anything else is a runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
