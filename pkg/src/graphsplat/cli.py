"""Command-line entry point: ``graphsplat <subcommand> ...``.

Exit status is 0 on success, 2 for bad arguments or configuration and 3
when a run fails (non-finite loss, unreadable input file, empty object).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .core import DenseVolume
from .errors import ConfigError, GraphSplatError, InvalidParameterError
from .experiments import (ABLATION_FIELDS, SWEEP_FIELDS, initial_cloud, reconstruct,
                          run_ablation, run_sweep)
from .fbp import fdk_reconstruct, gaussian_filter_volume, init_point_cloud
from .metrics import psnr_3d, ssim_slices
from .phantom import (PHANTOM_KINDS, NoiseSpec, PhantomSpec, add_noise, desk_geometry,
                      make_phantom, project_volume)
from .trainer import METRICS_FIELDS, eval_grid
from .voxelizer import VoxelizeConfig, voxelize

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

log = logging.getLogger("graphsplat")


class UsageError(Exception):
    pass


def _triple(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return vals


def _pair(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWS,COLS integers, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected ROWS,COLS, got {text!r}")
    return vals


def _number_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _assignment(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _overrides(args, extra=None):
    out = dict(extra or {})
    for key, value in getattr(args, "set", None) or []:
        out[key] = value
    return out


def _ssim_axes(name):
    return (2,) if name == "z" else (0, 1, 2)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_simulate(args):
    out = Path(args.out_dir)
    vol = make_phantom(PhantomSpec(args.phantom, args.dims, args.seed))
    geo = desk_geometry(args.mode, args.views, args.detector)
    clean = project_volume(vol, geo)
    noisy = add_noise(clean, NoiseSpec(args.noise_i0, args.noise_sigma, args.seed))
    io.write_volume(out / "gt.vol", vol)
    io.write_stack(out / "projections.bin", noisy)
    print(f"wrote {out / 'gt.vol'} and {out / 'projections.bin'} "
          f"({geo.num_views} views, {geo.detector_rows}x{geo.detector_cols})")


def cmd_fdk(args):
    stack = io.read_stack(args.projections)
    vol = fdk_reconstruct(stack, args.dims, window=args.window)
    io.write_volume(args.out, vol)
    print(f"wrote {args.out}")


def cmd_init(args):
    vol = io.read_volume(args.volume)
    cfg = load_config(args.config, _overrides(args, {
        k: v for k, v in (("sigma_d", args.sigma_d), ("tau", args.tau),
                          ("num_points_m", args.points), ("seed", args.seed)) if v is not None}))
    icfg = cfg.init
    source = vol if args.no_deinit else gaussian_filter_volume(vol, icfg.sigma_d, icfg.radius_r)
    cloud = init_point_cloud(source, icfg, bbox=vol.bbox())
    io.write_cloud(args.out, cloud)
    print(f"wrote {len(cloud)} kernels to {args.out}")


def cmd_train(args):
    extra = {}
    if args.no_pga:
        extra["lambda_g"] = 0.0
    if args.max_iters is not None:
        extra["max_iters"] = args.max_iters
    cfg = load_config(args.config, _overrides(args, extra))
    stack = io.read_stack(args.projections)
    gt = io.read_volume(args.gt) if args.gt else None
    like = gt
    if args.init is not None:
        if args.no_deinit:
            raise UsageError("--no-deinit selects the initialization; it cannot be combined "
                             "with --init")
        init, _ = io.read_cloud(args.init)
        if like is None:
            dims, spacing, origin = eval_grid(init.bbox, args.dims or cfg.train.eval_dims)
            like = _grid_template(dims, spacing, origin)
    else:
        dims = gt.dims if gt is not None else (args.dims or cfg.train.eval_dims)
        fdk, _, init = initial_cloud(stack, dims, cfg, deinit=not args.no_deinit)
        if like is None:
            like = fdk
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if row.psnr_3d is not None:
            log.info("iter %d  loss %.5f  psnr %.3f  kernels %d", row.iter, row.total,
                     row.psnr_3d, row.kernel_count)

    run = reconstruct(stack, init, cfg, reference=gt, like=like, callback=progress)
    io.write_cloud(out / "cloud.bin", run.result.cloud, run.result.graph)
    io.write_volume(out / "volume.vol", run.volume)
    io.write_metrics_csv(out / "metrics.csv", run.result.log, METRICS_FIELDS)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    msg = f"trained {len(run.result.cloud)} kernels in {run.seconds:.1f} s"
    if run.psnr is not None:
        msg += f"; PSNR {run.psnr:.3f} dB, SSIM {run.ssim:.4f}"
    print(msg)


def _grid_template(dims, spacing, origin):
    return DenseVolume(np.zeros(dims, dtype=np.float32), spacing, origin)


def cmd_voxelize(args):
    cloud, graph = io.read_cloud(args.cloud)
    use_graph = not args.no_graph_density
    if use_graph and graph is None:
        raise UsageError("cloud file has no graph; pass --no-graph-density")
    dims, spacing, origin = eval_grid(cloud.bbox, args.dims)
    vol = voxelize(cloud, graph, dims, spacing, origin,
                   VoxelizeConfig(tile_edge=args.tile_edge, use_graph_density=use_graph))
    io.write_volume(args.out, vol)
    print(f"wrote {args.out}")


def cmd_eval(args):
    vol = io.read_volume(args.volume)
    ref = io.read_volume(args.reference)
    row = {"volume": str(args.volume), "reference": str(args.reference),
           "psnr": psnr_3d(vol, ref), "ssim": ssim_slices(vol, ref, _ssim_axes(args.ssim_axes))}
    io.write_metrics_csv(args.out, [row], ("volume", "reference", "psnr", "ssim"))
    if args.slices:
        Path(args.slices).mkdir(parents=True, exist_ok=True)
        mid = vol.dims[2] // 2
        peak = float(np.max(ref.data))
        io.write_pgm(Path(args.slices) / "volume_z.pgm", np.asarray(vol.data)[:, :, mid].T, peak)
        io.write_pgm(Path(args.slices) / "reference_z.pgm", np.asarray(ref.data)[:, :, mid].T,
                     peak)
    print(f"PSNR {row['psnr']:.3f} dB  SSIM {row['ssim']:.4f}")


def cmd_ablate(args):
    extra = {}
    if args.max_iters is not None:
        extra["max_iters"] = args.max_iters
    cfg = load_config(args.config, _overrides(args, extra))
    stack = io.read_stack(args.projections)
    gt = io.read_volume(args.gt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def report(row):
        log.info("%s", {k: row[k] for k in row})

    if not args.skip_grid:
        rows = run_ablation(stack, gt, cfg, seeds=[int(s) for s in args.seeds], progress=report)
        io.write_metrics_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
        for r in rows:
            print(f"seed {r['seed']} De-Init {r['deinit']} PGA {r['pga']}: "
                  f"PSNR {r['psnr']:.3f} dB")
    if args.sweep_k or args.sweep_sigma_d:
        ks = [int(k) for k in args.sweep_k or []]
        if any(k < 1 for k in ks):
            raise UsageError("--sweep-k values must be >= 1")
        rows = run_sweep(stack, gt, cfg, ks=ks, sigmas=args.sweep_sigma_d or [],
                         seed=int(args.seeds[0]), progress=report)
        io.write_metrics_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
        for r in rows:
            print(f"{r['parameter']}={r['value']:g}: PSNR {r['psnr']:.3f} dB, "
                  f"{r['time_seconds']:.1f} s")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", type=_assignment, metavar="KEY=VALUE",
                   help="override one config key (JSON value); repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="graphsplat",
                                     description="Sparse-view CT with graph-coupled Gaussians")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="phantom volume and noisy projections")
    p.add_argument("--phantom", choices=PHANTOM_KINDS, required=True)
    p.add_argument("--dims", type=_triple, default=(64, 64, 64))
    p.add_argument("--views", type=int, default=25)
    p.add_argument("--mode", choices=("parallel", "cone"), default="parallel")
    p.add_argument("--detector", type=_pair, default=(64, 64), help="ROWS,COLS")
    p.add_argument("--noise-i0", type=float, default=1e5)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fdk", help="analytic reconstruction")
    p.add_argument("--projections", required=True)
    p.add_argument("--dims", type=_triple, required=True)
    p.add_argument("--window", choices=("ram-lak", "hann"), default="hann")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fdk)

    p = sub.add_parser("init", help="sample an initial kernel cloud from a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--sigma-d", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-deinit", action="store_true", help="sample the volume unfiltered")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("train", help="fit kernels to projections")
    p.add_argument("--projections", required=True)
    p.add_argument("--init", help="initial cloud; built from FDK when omitted")
    p.add_argument("--dims", type=_triple, help="output grid when no --gt is given")
    p.add_argument("--gt", help="reference volume for PSNR monitoring")
    p.add_argument("--no-pga", action="store_true", help="set lambda_g = 0")
    p.add_argument("--no-deinit", action="store_true",
                   help="initialize from the unfiltered FDK volume")
    p.add_argument("--max-iters", type=int)
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("voxelize", help="dense volume from a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--dims", type=_triple, required=True)
    p.add_argument("--no-graph-density", action="store_true")
    p.add_argument("--tile-edge", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("eval", help="PSNR and slice SSIM against a reference")
    p.add_argument("--volume", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--ssim-axes", choices=("z", "all"), default="z")
    p.add_argument("--slices", help="directory for mid-slice PGM previews")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="De-Init x PGA grid and parameter sweeps")
    p.add_argument("--projections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--seeds", type=_number_list, default=[0])
    p.add_argument("--sweep-k", type=_number_list, help="e.g. 4,5,6,7,8")
    p.add_argument("--sweep-sigma-d", type=_number_list, help="e.g. 1,2,3,4,5")
    p.add_argument("--skip-grid", action="store_true", help="run only the sweeps")
    p.add_argument("--max-iters", type=int)
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidParameterError as exc:
        print(f"error: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GraphSplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
