"""End-to-end composition of the stages plus the working-set scaling report."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import parallel
from .bev_core import BevPatch, SemanticClass, save_patch
from .camera import CameraModel, save_camera
from .config import PipelineConfig
from .decoder import AttributeConfig, GaussianSet, decode, make_weights, save_gaussians
from .errors import ContractError, StageError
from .features import (
    StyleTable, gather_scene_feats, save_features, save_style_table, scene_encode,
)
from .pointgen import (
    CULL_MODES, POINT_RECORD, BevPointCloud, build_occupancy, extrude,
    patch_relative_coords, save_points, select_visible, visibility_map,
)
from .raster import RenderTarget, rasterize
from .serialize import save_perm, serialize


@dataclass
class PipelineResult:
    frame: RenderTarget
    gaussians: GaussianSet
    cloud: BevPointCloud
    stats: dict
    timings: dict = field(default_factory=dict)


class _Stages:
    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except ContractError as e:
            raise StageError(name, e) from e
        self.timings[name] = round(time.perf_counter() - t0, 6)
        return out


def cull_stage(patch: BevPatch, cam: CameraModel, mode: str = "ray", supersample: int = 2,
               all_modes: bool = False):
    """Extrude, cull and attach relative coordinates.

    Returns the culled cloud, the extruded count and, with ``all_modes``,
    the kept count of every mode from one shared visibility map.
    """
    if mode not in CULL_MODES:
        raise ContractError(f"unknown cull mode {mode!r}")
    points = extrude(patch)
    occ = build_occupancy(patch)
    visible, _ = visibility_map(occ, cam, supersample)
    counts = {}
    for m in (CULL_MODES if all_modes else (mode,)):
        keep = select_visible(points, visible, cam, m, patch)
        counts[m] = int(keep.size)
        if m == mode:
            chosen = keep
    cloud = patch_relative_coords(points.subset(chosen), patch)
    return cloud, len(points), counts


def encode_stage(patch: BevPatch, cloud: BevPointCloud, scene_seed: int, style_seed: int,
                 c_fs: int = 61, c_z: int = 256):
    fmap = scene_encode(patch, scene_seed, c_fs)
    return gather_scene_feats(cloud, fmap), StyleTable(style_seed, patch.n_instances, c_z)


def decode_stage(cloud: BevPointCloud, table: StyleTable, cfg: PipelineConfig, orders=None):
    attrs = AttributeConfig.parse(cfg.attrs)
    c_fs = cloud.scene_feats.shape[1] if cloud.scene_feats is not None else cfg.c_fs
    weights = make_weights(cfg.decoder_seed, c_fp=2 * cfg.n_pe * (3 + c_fs), c_z=table.c_z,
                           config=attrs)
    gs, _ = decode(cloud, table, weights, attrs, method=cfg.serialization, g=cfg.grid,
                   bit_depth=cfg.hilbert_bits, window=cfg.window, n_pe=cfg.n_pe, orders=orders)
    return gs


def class_counts(cloud: BevPointCloud) -> dict:
    if cloud.classes is None:
        return {}
    counts = np.bincount(cloud.classes, minlength=len(SemanticClass))
    return {c.name.lower(): int(counts[c]) for c in SemanticClass}


def run_pipeline(cfg: PipelineConfig, patch: BevPatch, cam: CameraModel,
                 workdir=None) -> PipelineResult:
    """instantiate -> extrude/cull -> features -> serialize -> decode -> rasterize.

    With ``workdir`` the intermediate artifacts are written in the formats the
    per-stage commands read.
    """
    st = _Stages()
    with parallel.threads(cfg.threads):
        if not cfg.density:
            patch = patch.with_density(np.ones_like(patch.D))
        patch = st.run("instantiate", patch.instantiated)
        cloud, n_ext, counts = st.run("cull", cull_stage, patch, cam, cfg.cull_mode,
                                      cfg.supersample, all_modes=True)
        cloud, table = st.run("features", encode_stage, patch, cloud, cfg.scene_seed,
                              cfg.style_seed, cfg.c_fs, cfg.c_z)
        orders = st.run("serialize", serialize, cloud.coords_abs, cfg.serialization,
                        cfg.grid, cfg.hilbert_bits)
        gs = st.run("decode", decode_stage, cloud, table, cfg, orders)
        frame = st.run("rasterize", rasterize, gs, cam, cfg.background)

    labels_view = np.unique(cloud.labels[cloud.labels > 0])
    stats = {
        "record": "pipeline",
        "n_extruded": n_ext,
        "n_region": counts["region"],
        "n_instance": counts["instance"],
        "n_ray": counts["ray"],
        "n_culled": len(cloud),
        "n_gaussians": len(gs),
        "n_instances": patch.n_instances,
        "n_instances_in_view": int(labels_view.size),
        "class_counts": class_counts(cloud),
        "style_table_bytes": len(table.to_json()),
        "points_bytes": 8 + len(cloud) * POINT_RECORD.itemsize,
    }
    if workdir is not None:
        wd = Path(workdir)
        wd.mkdir(parents=True, exist_ok=True)
        save_patch(patch, wd / "patch.bvp")
        save_camera(cam, wd / "camera.json")
        save_points(cloud, wd / "points.bvp")
        save_features(cloud, wd / "feats.bvf")
        save_style_table(table, wd / "styles.json")
        for order in orders:
            save_perm(order, wd / f"perm_{order.method}.bin")
        save_gaussians(gs, wd / "gauss.bvg")
        (wd / "pipeline.cfg").write_text(cfg.to_text())
    return PipelineResult(frame=frame, gaussians=gs, cloud=cloud, stats=stats,
                          timings=st.timings)


def tiling_for(scale: int) -> tuple[int, int]:
    """Most square (nx, ny) with nx * ny == scale."""
    if scale < 1:
        raise ContractError("scales must be >= 1")
    ny = max(d for d in range(1, math.isqrt(scale) + 1) if scale % d == 0)
    return scale // ny, ny


def stats_scaling(cfg: PipelineConfig, base: BevPatch, cam: CameraModel,
                  scales=(1, 4, 16)) -> list[dict]:
    """Visible-set size and artifact bytes as the base patch is tiled around a fixed camera."""
    from .synth import tile_patch

    rows = []
    with parallel.threads(cfg.threads):
        for s in scales:
            nx, ny = tiling_for(int(s))
            patch = tile_patch(base, nx, ny)
            if not cfg.density:
                patch = patch.with_density(np.ones_like(patch.D))
            cloud, n_ext, counts = cull_stage(patch, cam, cfg.cull_mode, cfg.supersample)
            n_view = int(np.unique(cloud.labels[cloud.labels > 0]).size)
            table_bytes = len(StyleTable(cfg.style_seed, n_view, cfg.c_z).to_json())
            pts_bytes = 8 + len(cloud) * POINT_RECORD.itemsize
            rows.append({
                "record": "scaling",
                "scale": int(s),
                "tiles": [nx, ny],
                "n_extruded": n_ext,
                "n_visible": len(cloud),
                "n_instances": patch.n_instances,
                "n_instances_in_view": n_view,
                "style_table_bytes": table_bytes,
                "points_bytes": pts_bytes,
                "artifact_bytes": table_bytes + pts_bytes,
            })
    return rows
