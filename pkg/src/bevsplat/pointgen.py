"""BEV point extrusion, occupancy, visibility culling and relative coordinates.

A point sits at the center of voxel ``(x, y, z)``: world position
``(x + 0.5, y + 0.5, z)``.  The voxel spans ``[x, x+1) x [y, y+1) x
[z - 0.5, z + 0.5)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import parallel
from .bev_core import BevPatch, InstanceAttrs, SemanticClass, patch_bbox
from .camera import CameraModel, camera_rays
from .errors import ContractError

POINTS_MAGIC = b"BVP1"
CULL_MODES = ("region", "instance", "ray")
RAY_CHUNK = 1 << 15

POINT_RECORD = np.dtype([("abs", "<f4", 3), ("label", "<u4"), ("rel", "<f4", 3)])


@dataclass(frozen=True, eq=False)
class BevPointCloud:
    coords_abs: np.ndarray  # (N, 3) float32
    labels: np.ndarray  # (N,) int64
    coords_rel: np.ndarray  # (N, 3) float32
    scene_feats: np.ndarray | None = None  # (N, C_FS) float32
    classes: np.ndarray | None = None  # (N,) uint8, not persisted

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def voxels(self) -> np.ndarray:
        """Integer voxel index (x, y, z) of each point."""
        c = self.coords_abs.astype(np.float64)
        return np.stack(
            [np.floor(c[:, 0]), np.floor(c[:, 1]), np.rint(c[:, 2])], axis=1
        ).astype(np.int64)

    def subset(self, idx) -> "BevPointCloud":
        def take(a):
            return None if a is None else a[idx]

        return BevPointCloud(
            coords_abs=self.coords_abs[idx],
            labels=self.labels[idx],
            coords_rel=self.coords_rel[idx],
            scene_feats=take(self.scene_feats),
            classes=take(self.classes),
        )


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    bits: np.ndarray  # bool, indexed [x, y, z]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.bits.shape)

    @property
    def lower(self) -> np.ndarray:
        """World coordinates of the grid's minimum corner."""
        return np.array([0.0, 0.0, -0.5])


@dataclass(frozen=True)
class CullResult:
    cloud: BevPointCloud
    visible: np.ndarray  # bool [x, y, z] visibility map (ray hits)
    hits: np.ndarray  # (R, 3) first-hit voxel per ray, -1 where the ray escapes


def extrude(patch: BevPatch) -> BevPointCloud:
    """One point per integer level 0..H(x,y) of every cell with density 1.

    Points are emitted in lexicographic (x, y, z) order.
    """
    H = patch.H.T.astype(np.int64)  # [x, y]
    D = patch.D.T.astype(bool)
    counts = np.where(D, H + 1, 0).ravel()
    n = int(counts.sum())
    xs, ys = np.meshgrid(np.arange(patch.width), np.arange(patch.height_cells), indexing="ij")
    cell = np.repeat(np.arange(counts.size), counts)
    starts = np.cumsum(counts) - counts
    z = np.arange(n) - np.repeat(starts, counts)
    x = xs.ravel()[cell]
    y = ys.ravel()[cell]
    coords = np.stack([x + 0.5, y + 0.5, z], axis=1).astype(np.float32)
    return BevPointCloud(
        coords_abs=coords,
        labels=patch.Q.T.ravel()[cell].astype(np.int64),
        coords_rel=np.zeros((n, 3), dtype=np.float32),
        classes=patch.S.T.ravel()[cell].astype(np.uint8),
    )


def build_occupancy(patch: BevPatch) -> OccupancyGrid:
    """Solid height-field occupancy; ignores the density map."""
    H = patch.H.T.astype(np.int64)
    solid = patch.S.T != SemanticClass.NONE
    zs = np.arange(patch.max_height + 1)
    bits = (zs[None, None, :] <= H[:, :, None]) & solid[:, :, None]
    return OccupancyGrid(bits=bits)


def _box_interval(o, d, lo, hi):
    """Ray-box slab interval, returned as (t_enter, t_exit); empty if enter > exit."""
    n = d.shape[0]
    t0 = np.full(n, -np.inf)
    t1 = np.full(n, np.inf)
    for a in range(3):
        da = d[:, a]
        nz = da != 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[a] - o[a]) / da
            tb = (hi[a] - o[a]) / da
        tmin = np.where(nz, np.minimum(ta, tb), -np.inf)
        tmax = np.where(nz, np.maximum(ta, tb), np.inf)
        inside = (o[a] >= lo[a]) & (o[a] <= hi[a])
        tmin = np.where(~nz & ~inside, np.inf, tmin)
        t0 = np.maximum(t0, tmin)
        t1 = np.minimum(t1, tmax)
    return t0, t1


def first_hits(origin: np.ndarray, dirs: np.ndarray, occ: OccupancyGrid,
               t_near: float, t_far: float) -> np.ndarray:
    """Amanatides-Woo traversal; returns the first occupied voxel per ray.

    Rays are ``origin + t * dirs`` for t in [t_near, t_far].  Crossing times
    are recomputed from the voxel index at each step rather than accumulated,
    and ties between axes step the lowest axis first.
    """
    chunks = [dirs[i:i + RAY_CHUNK] for i in range(0, len(dirs), RAY_CHUNK)]
    out = parallel.pmap(lambda d: _first_hits_chunk(origin, d, occ, t_near, t_far), chunks)
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(out)


def _first_hits_chunk(origin, dirs, occ, t_near, t_far):
    dims = np.array(occ.dims)
    o = np.asarray(origin, dtype=np.float64) - occ.lower
    n = dirs.shape[0]
    hits = np.full((n, 3), -1, dtype=np.int64)
    if n == 0 or min(dims) == 0:
        return hits
    t_enter, t_exit = _box_interval(o, dirs, np.zeros(3), dims.astype(np.float64))
    t_start = np.maximum(t_near, t_enter)
    t_end = np.minimum(t_far, t_exit)
    idx = np.nonzero(t_start <= t_end)[0]
    d = dirs[idx]
    ts = t_start[idx]
    tend = t_end[idx]
    v = np.floor(o[None, :] + ts[:, None] * d).astype(np.int64)
    np.clip(v, 0, dims - 1, out=v)
    step = np.where(d > 0, 1, -1)
    nz = d != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tn = np.where(nz, (v + (step > 0) - o[None, :]) / d, np.inf)
    flat = occ.bits.ravel()
    stride = np.array([dims[1] * dims[2], dims[2], 1])
    while idx.size:
        occupied = flat[v @ stride]
        if occupied.any():
            hits[idx[occupied]] = v[occupied]
        axis = np.argmin(tn, axis=1)
        rows = np.arange(idx.size)
        tmin = tn[rows, axis]
        v[rows, axis] += step[rows, axis]
        va = v[rows, axis]
        alive = ~occupied & (tmin <= tend) & (va >= 0) & (va < dims[axis])
        # crossing time of the next plane along the stepped axis
        nb = va + (step[rows, axis] > 0) - o[axis]
        tn[rows, axis] = nb / d[rows, axis]
        idx, d, tend, v, step, tn = (a[alive] for a in (idx, d, tend, v, step, tn))
    return hits


def visibility_map(occ: OccupancyGrid, cam: CameraModel, supersample: int = 2):
    origin, dirs = camera_rays(cam, supersample)
    hits = first_hits(origin, dirs, occ, cam.near, cam.far)
    visible = np.zeros(occ.dims, dtype=bool)
    h = hits[hits[:, 0] >= 0]
    visible[h[:, 0], h[:, 1], h[:, 2]] = True
    return visible, hits


def frustum_footprint(cam: CameraModel) -> np.ndarray:
    """Convex hull (CCW, xy) of the view frustum projected onto the ground."""
    us = [-0.5, cam.width - 0.5]
    vs = [-0.5, cam.height - 0.5]
    corners = []
    for depth in (cam.near, cam.far):
        for u in us:
            for v in vs:
                pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
                corners.append(cam.R.T @ (pc - cam.t))
    return _convex_hull(np.array(corners)[:, :2])


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def cells_touching_polygon(cells: np.ndarray, poly: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Separating-axis test of unit squares ``[x, x+1) x [y, y+1)`` against a convex polygon."""
    cells = np.asarray(cells, dtype=np.float64)
    if len(cells) == 0:
        return np.zeros(0, dtype=bool)
    if len(poly) < 3:
        return np.zeros(len(cells), dtype=bool)
    lo = cells
    hi = cells + 1.0
    keep = (hi[:, 0] >= poly[:, 0].min() - eps) & (lo[:, 0] <= poly[:, 0].max() + eps)
    keep &= (hi[:, 1] >= poly[:, 1].min() - eps) & (lo[:, 1] <= poly[:, 1].max() + eps)
    sq = np.stack([
        np.stack([lo[:, 0], lo[:, 1]], 1), np.stack([hi[:, 0], lo[:, 1]], 1),
        np.stack([hi[:, 0], hi[:, 1]], 1), np.stack([lo[:, 0], hi[:, 1]], 1),
    ], axis=1)  # (N, 4, 2)
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    for nrm, p0 in zip(normals, poly):
        proj = sq @ nrm
        # polygon is CCW so its interior lies on the side where (q - p0).n <= 0
        keep &= proj.min(axis=1) <= p0 @ nrm + eps * np.linalg.norm(nrm)
    return keep


def visibility_cull(points: BevPointCloud, occ: OccupancyGrid, cam: CameraModel,
                    mode: str = "ray", supersample: int = 2,
                    patch: BevPatch | None = None) -> CullResult:
    """Keep the points a camera can see.

    ``region`` keeps points whose cell meets the frustum's ground footprint;
    ``instance`` additionally requires the point's instance (or, for stuff,
    its column) to own a ray-hit voxel; ``ray`` keeps exactly the points in
    first-hit voxels.
    """
    if mode not in CULL_MODES:
        raise ContractError(f"unknown cull mode {mode!r}; expected one of {CULL_MODES}")
    cam.validate()
    visible, hits = visibility_map(occ, cam, supersample)
    keep = select_visible(points, visible, cam, mode, patch)
    return CullResult(cloud=points.subset(keep), visible=visible, hits=hits)


def select_visible(points: BevPointCloud, visible: np.ndarray, cam: CameraModel,
                   mode: str, patch: BevPatch | None = None) -> np.ndarray:
    """Indices of the points kept by ``mode`` given a ray visibility map."""
    if mode not in CULL_MODES:
        raise ContractError(f"unknown cull mode {mode!r}; expected one of {CULL_MODES}")
    vox = points.voxels
    if not np.all((vox >= 0) & (vox < np.array(visible.shape))):
        raise ContractError("points fall outside the occupancy grid")
    if mode == "ray":
        return np.nonzero(visible[vox[:, 0], vox[:, 1], vox[:, 2]])[0]
    cells = np.unique(vox[:, :2], axis=0)
    touch = cells_touching_polygon(cells, frustum_footprint(cam))
    region = np.zeros(visible.shape[:2], dtype=bool)
    region[cells[touch, 0], cells[touch, 1]] = True
    keep = region[vox[:, 0], vox[:, 1]]
    if mode == "instance":
        if patch is None:
            raise ContractError("instance mode needs the patch's instance map")
        Qxy = patch.Q.T
        col_hit = visible.any(axis=2)
        label_hit = np.zeros(patch.n_instances + 1, dtype=bool)
        label_hit[np.unique(Qxy[col_hit])] = True
        label_hit[0] = False
        lab = points.labels
        keep &= np.where(lab > 0, label_hit[lab], col_hit[vox[:, 0], vox[:, 1]])
    return np.nonzero(keep)[0]


def relative_coords(cloud: BevPointCloud, attrs: list[InstanceAttrs],
                    whole: InstanceAttrs) -> BevPointCloud:
    """Normalize each point into its instance box: 2 (p - center) / size.

    Label-0 points use ``whole`` (the patch box).  Zero-extent axes divide
    by 1 instead, giving 0 for member points.
    """
    n_lab = max([a.label for a in attrs], default=0) + 1
    centers = np.zeros((n_lab, 3))
    sizes = np.ones((n_lab, 3))
    centers[0], sizes[0] = whole.center, whole.size
    for a in attrs:
        centers[a.label], sizes[a.label] = a.center, a.size
    sizes = np.where(sizes == 0, 1.0, sizes)
    lab = cloud.labels
    if len(lab) and (lab.max() >= n_lab or lab.min() < 0):
        raise ContractError("point label without an instance box")
    rel = 2.0 * (cloud.coords_abs.astype(np.float64) - centers[lab]) / sizes[lab]
    return replace(cloud, coords_rel=rel.astype(np.float32))


def patch_relative_coords(cloud: BevPointCloud, patch: BevPatch) -> BevPointCloud:
    from .bev_core import instance_bboxes

    return relative_coords(cloud, instance_bboxes(patch), patch_bbox(patch))


def save_points(cloud: BevPointCloud, path) -> None:
    """Write the ``BVP1`` container: u32 count, then (f32x3 abs, u32 label, f32x3 rel) records."""
    rec = np.empty(len(cloud), dtype=POINT_RECORD)
    rec["abs"] = cloud.coords_abs
    rec["label"] = cloud.labels
    rec["rel"] = cloud.coords_rel
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(rec.tobytes())


def points_from_bytes(data: bytes, offset: int = 0) -> tuple[BevPointCloud, int]:
    if data[offset:offset + 4] != POINTS_MAGIC:
        raise ContractError("not a BVP1 point container")
    (n,) = struct.unpack_from("<I", data, offset + 4)
    start = offset + 8
    end = start + n * POINT_RECORD.itemsize
    if len(data) < end:
        raise ContractError("truncated point container")
    rec = np.frombuffer(data, POINT_RECORD, n, start)
    cloud = BevPointCloud(
        coords_abs=rec["abs"].astype(np.float32),
        labels=rec["label"].astype(np.int64),
        coords_rel=rec["rel"].astype(np.float32),
    )
    return cloud, end


def load_points(path) -> BevPointCloud:
    cloud, _ = points_from_bytes(Path(path).read_bytes())
    return cloud


def export_ply(cloud: BevPointCloud, path) -> None:
    """ASCII PLY with position, instance label and relative coordinates."""
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property float x", "property float y", "property float z",
        "property uint label",
        "property float rx", "property float ry", "property float rz",
        "end_header",
    ]
    for p, l, r in zip(cloud.coords_abs, cloud.labels, cloud.coords_rel):
        lines.append(f"{p[0]:g} {p[1]:g} {p[2]:g} {int(l)} {r[0]:g} {r[1]:g} {r[2]:g}")
    Path(path).write_text("\n".join(lines) + "\n")
