"""``bevsplat`` command line.

Exit codes: 0 success, 1 contract error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import parallel
from .bev_core import load_patch, read_patch, save_maps, save_patch
from .camera import load_camera, save_camera
from .config import PipelineConfig, load_config
from .decoder import AttributeConfig, load_gaussians, save_gaussians
from .errors import ContractError
from .features import load_features, load_style_table, save_features, save_style_table
from .pipeline import cull_stage, decode_stage, encode_stage, run_pipeline, stats_scaling
from .pointgen import CULL_MODES, export_ply, load_points, save_points
from .raster import rasterize, save_alpha, save_color, save_depth
from .serialize import METHODS, SerialOrder, load_perm, save_perm, serialize
from .synth import default_camera, framed_camera, synth_city


def _floats3(text: str) -> tuple:
    vals = tuple(float(v) for v in text.split(","))
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated numbers")
    return vals


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_synth(a):
    patch = synth_city(a.size, a.seed, max_height=a.max_height)
    save_maps(patch, a.out_height, a.out_semantic, a.out_density)
    if a.out_camera:
        make_cam = framed_camera if a.view == "framed" else default_camera
        save_camera(make_cam(patch, a.width, a.height), a.out_camera)
    _emit({"record": "synth", "size": a.size, "n_instances": patch.n_instances,
           "max_height": patch.max_height})


def cmd_instantiate(a):
    patch = load_patch(a.height, a.semantic, a.density).instantiated()
    save_patch(patch, a.out)
    _emit({"record": "instantiate", "n_instances": patch.n_instances,
           "width": patch.width, "height": patch.height_cells})


def cmd_cull(a):
    patch = read_patch(a.patch)
    cam = load_camera(a.camera)
    cloud, n_ext, counts = cull_stage(patch, cam, a.mode, a.supersample)
    save_points(cloud, a.out)
    if a.ply:
        export_ply(cloud, a.ply)
    _emit({"record": "cull", "mode": a.mode, "n_extruded": n_ext, "n_kept": len(cloud)})


def cmd_encode(a):
    patch = read_patch(a.patch)
    cloud = load_points(a.points)
    style_seed = a.seed if a.style_seed is None else a.style_seed
    cloud, table = encode_stage(patch, cloud, a.seed, style_seed, a.c_fs, a.c_z)
    save_features(cloud, a.out)
    styles = a.styles_out or f"{a.out}.styles.json"
    save_style_table(table, styles)
    _emit({"record": "encode", "n_points": len(cloud), "c_fs": a.c_fs, "styles": str(styles)})


def cmd_serialize(a):
    cloud = load_points(a.points)
    orders = serialize(cloud.coords_abs, a.method, a.grid, a.bits)
    if len(orders) == 1:
        save_perm(orders[0], a.out)
    else:
        for order in orders:
            save_perm(order, f"{a.out}.{order.method}")
    _emit({"record": "serialize", "method": a.method, "n_points": len(cloud)})


def cmd_decode(a):
    cloud = load_features(a.feats)
    table = load_style_table(a.styles)
    cfg = PipelineConfig(grid=a.grid, n_pe=a.n_pe, window=a.window, decoder_seed=a.seed,
                         attrs=AttributeConfig.parse(a.attrs).to_spec(),
                         serialization=a.method, hilbert_bits=a.bits)
    orders = None
    if a.order:
        perm = load_perm(a.order)
        if perm.size != len(cloud) or not np.array_equal(np.sort(perm), np.arange(len(cloud))):
            raise ContractError("order file is not a permutation of the points")
        orders = [SerialOrder("file", 0.0, perm, np.argsort(perm))]
    gs = decode_stage(cloud, table, cfg, orders)
    save_gaussians(gs, a.out)
    _emit({"record": "decode", "n_gaussians": len(gs), "attrs": cfg.attrs})


def cmd_render(a):
    gs = load_gaussians(a.gaussians)
    cam = load_camera(a.camera)
    rt = rasterize(gs, cam, a.bg)
    save_color(rt, a.out)
    if a.depth:
        save_depth(rt, a.depth)
    if a.alpha:
        save_alpha(rt, a.alpha)
    _emit({"record": "render", "width": cam.width, "height": cam.height,
           "n_gaussians": len(gs)})


def _config_from(a) -> PipelineConfig:
    cfg = load_config(a.config) if a.config else PipelineConfig()
    over = {
        "grid": a.grid, "n_pe": a.n_pe, "window": a.window, "scene_seed": a.scene_seed,
        "style_seed": a.style_seed, "decoder_seed": a.decoder_seed, "cull_mode": a.mode,
        "attrs": a.attrs, "supersample": a.supersample, "background": a.bg,
        "serialization": a.method, "hilbert_bits": a.bits, "threads": a.threads,
    }
    if a.no_density:
        over["density"] = False
    return cfg.updated(over)


def cmd_pipeline(a):
    cfg = _config_from(a)
    patch = load_patch(a.height, a.semantic, a.density)
    cam = load_camera(a.camera)
    res = run_pipeline(cfg, patch, cam, workdir=a.workdir)
    save_color(res.frame, a.out)
    if a.depth:
        save_depth(res.frame, a.depth)
    _emit(res.stats)
    if a.timings:
        _emit({"record": "timings", **res.timings})


def cmd_stats(a):
    cfg = _config_from(a)
    patch = load_patch(a.height, a.semantic, a.density).instantiated()
    cam = load_camera(a.camera)
    if not cfg.density:
        patch = patch.with_density(np.ones_like(patch.D))
    with parallel.threads(cfg.threads):
        _, n_ext, counts = cull_stage(patch, cam, cfg.cull_mode, cfg.supersample,
                                      all_modes=True)
    _emit({"record": "modes", "n_extruded": n_ext, **{f"n_{m}": c for m, c in counts.items()}})
    scales = [int(s) for s in a.scales.split(",")]
    for row in stats_scaling(cfg, patch, cam, scales):
        _emit(row)


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--grid", type=float)
    p.add_argument("--n-pe", dest="n_pe", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--scene-seed", dest="scene_seed", type=int)
    p.add_argument("--style-seed", dest="style_seed", type=int)
    p.add_argument("--decoder-seed", dest="decoder_seed", type=int)
    p.add_argument("--mode", choices=CULL_MODES)
    p.add_argument("--attrs")
    p.add_argument("--supersample", type=int)
    p.add_argument("--bg", type=_floats3)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--bits", type=int)
    p.add_argument("--no-density", action="store_true", help="ignore the density map")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bevsplat", description="BEV-point city rendering pipeline")
    ap.add_argument("--threads", type=int, default=None, help="worker cap (default 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic city patch")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-height", type=int, default=24)
    p.add_argument("--out-height", required=True)
    p.add_argument("--out-semantic", required=True)
    p.add_argument("--out-density")
    p.add_argument("--out-camera")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--view", choices=("overview", "framed"), default="overview",
                   help="framed keeps the whole frustum inside the patch")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("instantiate", help="load maps and label instances")
    p.add_argument("--height", required=True)
    p.add_argument("--semantic", required=True)
    p.add_argument("--density")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_instantiate)

    p = sub.add_parser("cull", help="extrude and keep visible points")
    p.add_argument("--patch", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--mode", choices=CULL_MODES, default="ray")
    p.add_argument("--supersample", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--ply")
    p.set_defaults(fn=cmd_cull)

    p = sub.add_parser("encode", help="scene features and style table")
    p.add_argument("--patch", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style-seed", type=int)
    p.add_argument("--c-fs", type=int, default=61)
    p.add_argument("--c-z", type=int, default=256)
    p.add_argument("--out", required=True)
    p.add_argument("--styles-out")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("serialize", help="write the point order as a u32 array")
    p.add_argument("--points", required=True)
    p.add_argument("--method", choices=METHODS, default="linear")
    p.add_argument("--grid", type=float, default=0.01)
    p.add_argument("--bits", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_serialize)

    p = sub.add_parser("decode", help="features -> Gaussians")
    p.add_argument("--feats", required=True)
    p.add_argument("--styles", required=True)
    p.add_argument("--attrs", default="rgb")
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--method", choices=METHODS, default="linear")
    p.add_argument("--grid", type=float, default=0.01)
    p.add_argument("--bits", type=int, default=10)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--n-pe", type=int, default=10)
    p.add_argument("--order", help="u32 permutation file from `serialize`")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("render", help="rasterize Gaussians")
    p.add_argument("--gaussians", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--bg", type=_floats3, default=(1.0, 1.0, 1.0))
    p.add_argument("--out", required=True)
    p.add_argument("--depth")
    p.add_argument("--alpha")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("pipeline", help="run every stage")
    p.add_argument("--height", required=True)
    p.add_argument("--semantic", required=True)
    p.add_argument("--density")
    p.add_argument("--camera", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--depth")
    p.add_argument("--workdir", help="also write intermediate artifacts here")
    p.add_argument("--timings", action="store_true", help="emit a timings record")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("stats", help="culling-mode counts and working-set scaling")
    p.add_argument("--height", required=True)
    p.add_argument("--semantic", required=True)
    p.add_argument("--density")
    p.add_argument("--camera", required=True)
    p.add_argument("--scales", default="1,4,16")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_stats)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        if a.command in ("pipeline", "stats"):
            a.fn(a)
        else:
            with parallel.threads(a.threads or 1):
                a.fn(a)
    except ContractError as e:
        print(f"bevsplat: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"bevsplat: I/O error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
