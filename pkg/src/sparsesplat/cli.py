"""Command-line pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_blender, write_depth, write_png
from .errors import DataFormatError, InvalidInputError, NumericalError
from .gaussians import RenderSettings, load_ply, save_ply
from .mesh import extract_mesh, write_mesh
from .pipeline import PipelineConfig, dataset_bounds, evaluate, format_table, initial_cloud, reconstruct
from .rasterizer import render
from .relevance import blend_latents, noise_difference, normalize, read_latent, threshold_mask, \
    upsample_mask, write_latent
from .synth import SceneSpec, synth

log = logging.getLogger("sparsesplat")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> PipelineConfig:
    return PipelineConfig.load(args.config, args.set or [])


def cmd_synth(args):
    if args.spec:
        spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        spec = SceneSpec.sphere() if args.preset == "sphere" else SceneSpec.sphere_and_box()
    if args.seed is not None:
        spec.seed = args.seed
    ds = synth(spec, args.out)
    print(f"wrote {len(ds.views)} views ({len(ds.train)} train, {len(ds.heldout)} held-out) to {args.out}")


def cmd_carve(args):
    cfg = _config(args)
    ds = load_blender(args.dataset)
    cloud = initial_cloud(ds, cfg.hull, cfg.train.sh_degree)
    save_ply(cloud, args.out)
    print(f"wrote {len(cloud)} Gaussians to {args.out}")


def cmd_reconstruct(args):
    cfg = _config(args)
    ds = load_blender(args.dataset)
    init = load_ply(args.init) if args.init else None
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    cloud, train_log = reconstruct(ds, cfg, init, log_path=log_path,
                                   checkpoint_dir=args.checkpoint_dir,
                                   checkpoint_interval=args.checkpoint_interval)
    save_ply(cloud, out)
    last = train_log.records[-1] if train_log.records else None
    summary = f", final loss {last.loss:.5f}" if last else ""
    print(f"wrote {len(cloud)} Gaussians to {out}{summary}")


def _select(ds, which):
    if which == "all":
        return ds.views
    if which in ("train", "heldout"):
        return ds.train if which == "train" else ds.heldout
    views = [v for v in ds.views if v.name == which]
    if not views:
        raise InvalidInputError(f"no view named {which!r}")
    return views


def cmd_render(args):
    cfg = _config(args)
    ds = load_blender(args.dataset)
    cloud = load_ply(args.ply)
    settings = RenderSettings(background=ds.background, sh_degree=min(cfg.train.sh_degree, cloud.sh_degree))
    outdir = Path(args.out)
    for v in _select(ds, args.views):
        o = render(cloud, v.camera, settings)
        stem = outdir / v.name
        stem.parent.mkdir(parents=True, exist_ok=True)
        write_png(stem.with_suffix(".png"), o.color)
        write_png(stem.parent / (stem.name + "_alpha.png"), o.alpha)
        write_depth(stem.with_suffix(".dpth"), o.depth)
    print(f"rendered to {outdir}")


def cmd_mask(args):
    cfg = _config(args)
    tau = cfg.relevance.tau if args.tau is None else args.tau
    rel = normalize(noise_difference(read_latent(args.eps_text), read_latent(args.eps_null)))
    mask = threshold_mask(rel, tau, cfg.relevance.blur)
    if args.blend:
        z_edit, z_orig, out = args.blend
        write_latent(out, blend_latents(read_latent(z_edit), read_latent(z_orig), mask))
    if args.size:
        w, h = (int(x) for x in args.size.lower().split("x"))
        mask = upsample_mask(mask, h, w)
    write_png(args.out, mask.astype(np.uint8) * 255)
    if args.relevance_out:
        write_png(args.relevance_out, rel)
    print(f"mask covers {mask.mean():.1%} of the grid")


def cmd_export_mesh(args):
    cfg = _config(args).mesh
    cloud = load_ply(args.ply)
    if args.bounds:
        bounds = np.array(args.bounds, dtype=np.float64).reshape(2, 3)
    elif args.dataset:
        bounds = dataset_bounds(load_blender(args.dataset))
    else:
        lo, hi = cloud.positions.min(0), cloud.positions.max(0)
        pad = 0.1 * (hi - lo).max() + 3 * cloud.scales.max()
        bounds = np.stack([lo - pad, hi + pad])
    mesh = extract_mesh(cloud, bounds, cfg.resolution, cfg.iso, cfg.smooth_iterations,
                        cfg.target_faces, cfg.min_opacity)
    write_mesh(mesh, args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")


def cmd_eval(args):
    cfg = _config(args)
    ds = load_blender(args.dataset)
    cloud = load_ply(args.ply)
    rows = evaluate(cloud, _select(ds, args.views), ds.background, cfg.train.sh_degree)
    print(format_table(rows, args.method))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsesplat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config with train/hull/mesh/relevance sections")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        return sp

    sp = sub.add_parser("synth", help="ray-trace a synthetic dataset")
    sp.add_argument("--spec", help="JSON scene spec")
    sp.add_argument("--preset", choices=["sphere", "sphere-box"], default="sphere-box")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("carve", help="visual-hull initial Gaussians"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_carve)

    sp = with_config(sub.add_parser("reconstruct", help="optimise Gaussians against a dataset"))
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--init", help="initial PLY; carved from the dataset if omitted")
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", help="training log path (default: OUT with .log suffix)")
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--checkpoint-interval", type=int, default=0)
    sp.set_defaults(func=cmd_reconstruct)

    sp = with_config(sub.add_parser("render", help="render a PLY from dataset cameras"))
    sp.add_argument("--ply", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--views", default="all", help="all, train, heldout or a view name")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = with_config(sub.add_parser("mask", help="relevance mask from two noise predictions"))
    sp.add_argument("--eps-text", required=True, help="LTNT noise predicted with the instruction")
    sp.add_argument("--eps-null", required=True, help="LTNT noise predicted with the null instruction")
    sp.add_argument("--tau", type=float)
    sp.add_argument("--size", help="upsample the mask to WxH pixels")
    sp.add_argument("--blend", nargs=3, metavar=("Z_EDIT", "Z_ORIG", "OUT"),
                    help="also write the masked blend of two LTNT latents")
    sp.add_argument("--relevance-out", help="write the normalised relevance map as PNG")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mask)

    sp = with_config(sub.add_parser("export-mesh", help="extract a triangle mesh from a PLY"))
    sp.add_argument("--ply", required=True)
    sp.add_argument("--dataset", help="take the sampling bounds from this dataset")
    sp.add_argument("--bounds", type=float, nargs=6, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    sp.add_argument("--out", required=True, help="output .obj or .ply")
    sp.set_defaults(func=cmd_export_mesh)

    sp = with_config(sub.add_parser("eval", help="PSNR/SSIM table against held-out views"))
    sp.add_argument("--ply", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--views", default="heldout")
    sp.add_argument("--method", default="ours", help="label for the method column")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
