"""BEV map patches: loading, instance labeling and per-instance boxes.

Maps are stored as 2D arrays indexed ``[y, x]`` (image rows are y).  Cell
``(x, y)`` covers world ``[x, x+1) x [y, y+1)``; heights share that unit.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError

DEFAULT_MAX_HEIGHT = 4096
PATCH_MAGIC = b"BVM1"


class SemanticClass(enum.IntEnum):
    """Class ids as stored in the 8-bit semantic PNG."""

    NONE = 0  # air / no geometry; the only non-solid class
    ROAD = 1
    WATER = 2
    VEGETATION = 3
    GROUND = 4
    BUILDING_ROOF = 5
    BUILDING_FACADE = 6
    CAR = 7


NUM_CLASSES = len(SemanticClass)

# Classes sharing a group may join one instance; different groups never merge.
INSTANCE_GROUP = {
    SemanticClass.BUILDING_ROOF: 1,
    SemanticClass.BUILDING_FACADE: 1,
    SemanticClass.CAR: 2,
}


def instance_group_map(S: np.ndarray) -> np.ndarray:
    lut = np.zeros(256, dtype=np.int64)
    for cls, group in INSTANCE_GROUP.items():
        lut[int(cls)] = group
    return lut[S]


@dataclass(frozen=True, eq=False)
class BevPatch:
    H: np.ndarray  # uint16 heights
    S: np.ndarray  # uint8 class ids
    D: np.ndarray  # uint8 in {0, 1}
    Q: np.ndarray  # int64 instance ids, 0 = stuff

    @property
    def width(self) -> int:
        return int(self.H.shape[1])

    @property
    def height_cells(self) -> int:
        return int(self.H.shape[0])

    @property
    def n_instances(self) -> int:
        return int(self.Q.max()) if self.Q.size else 0

    @property
    def max_height(self) -> int:
        return int(self.H.max()) if self.H.size else 0

    def with_density(self, D: np.ndarray) -> "BevPatch":
        return replace(self, D=(np.asarray(D) != 0).astype(np.uint8))

    def instantiated(self) -> "BevPatch":
        return replace(self, Q=instantiate(self.S))


@dataclass(frozen=True)
class InstanceAttrs:
    label: int
    size: np.ndarray  # (3,) world units
    center: np.ndarray  # (3,) world units


def make_patch(
    H,
    S,
    D=None,
    max_height: int = DEFAULT_MAX_HEIGHT,
) -> BevPatch:
    """Validate raw maps and build a patch with an empty instance map."""
    H = np.asarray(H)
    S = np.asarray(S)
    if H.ndim != 2 or S.ndim != 2:
        raise ContractError("height and semantic maps must be 2D")
    if H.shape != S.shape:
        raise ContractError(
            f"dimension mismatch: height {H.shape[::-1]} vs semantic {S.shape[::-1]}"
        )
    if D is None:
        D = np.ones_like(S, dtype=np.uint8)
    D = np.asarray(D)
    if D.shape != S.shape:
        raise ContractError(
            f"dimension mismatch: density {D.shape[::-1]} vs semantic {S.shape[::-1]}"
        )
    if H.size and H.min() < 0:
        raise ContractError("height field must be non-negative")
    if H.size and H.max() > max_height:
        raise ContractError(f"height overflow: {int(H.max())} > max {max_height}")
    if S.size and (S.min() < 0 or S.max() >= NUM_CLASSES):
        bad = sorted(set(np.unique(S).tolist()) - set(range(NUM_CLASSES)))
        raise ContractError(f"unknown semantic class id(s): {bad}")
    return BevPatch(
        H=H.astype(np.uint16),
        S=S.astype(np.uint8),
        D=(D != 0).astype(np.uint8),
        Q=np.zeros(S.shape, dtype=np.int64),
    )


def _read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def load_patch(height_path, semantic_path, density_path=None,
               max_height: int = DEFAULT_MAX_HEIGHT) -> BevPatch:
    H = _read_png(height_path).astype(np.int64)
    S = _read_png(semantic_path).astype(np.int64)
    D = None if density_path is None else _read_png(density_path)
    return make_patch(H, S, D, max_height=max_height)


def save_maps(patch: BevPatch, height_path, semantic_path, density_path=None) -> None:
    """Write the maps as PNGs (16-bit height, 8-bit semantic and density)."""
    Image.fromarray(patch.H.astype(np.uint16)).save(height_path)
    Image.fromarray(patch.S.astype(np.uint8)).save(semantic_path)
    if density_path is not None:
        Image.fromarray((patch.D * 255).astype(np.uint8)).save(density_path)


def instantiate(S: np.ndarray) -> np.ndarray:
    """Label 4-connected components of instance-bearing classes.

    Ids run 1..N in row-major order of each component's first cell.
    Stuff cells get 0.
    """
    S = np.asarray(S)
    groups = instance_group_map(S)
    combined = np.zeros(S.shape, dtype=np.int64)
    offset = 0
    for group in sorted(set(INSTANCE_GROUP.values())):
        lab, n = ndimage.label(groups == group)  # default structure is 4-connected
        mask = lab > 0
        combined[mask] = lab[mask] + offset
        offset += n
    Q = np.zeros(S.shape, dtype=np.int64)
    if offset == 0:
        return Q
    flat = combined.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(offset + 1, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    Q.ravel()[:] = lut[flat]
    return Q


def instance_bboxes(patch: BevPatch) -> list[InstanceAttrs]:
    """Axis-aligned 3D box of each instance's extruded columns."""
    n = patch.n_instances
    if n == 0:
        return []
    slices = ndimage.find_objects(patch.Q, max_label=n)
    index = np.arange(1, n + 1)
    zmax = np.atleast_1d(ndimage.maximum(patch.H.astype(np.float64), patch.Q, index))
    out = []
    for l, sl in enumerate(slices, start=1):
        ys, xs = sl
        lo = np.array([xs.start, ys.start, 0.0])
        hi = np.array([xs.stop, ys.stop, float(zmax[l - 1])])
        out.append(InstanceAttrs(label=l, size=hi - lo, center=(hi + lo) / 2))
    return out


def patch_bbox(patch: BevPatch) -> InstanceAttrs:
    """Whole-patch box, used as the frame of reference for stuff points."""
    lo = np.zeros(3)
    hi = np.array([patch.width, patch.height_cells, float(patch.max_height)])
    return InstanceAttrs(label=0, size=hi - lo, center=(hi + lo) / 2)


def save_patch(patch: BevPatch, path) -> None:
    """Binary container: magic, u32 width, u32 height, then H, S, D, Q planes."""
    with open(path, "wb") as f:
        f.write(PATCH_MAGIC)
        f.write(struct.pack("<II", patch.width, patch.height_cells))
        f.write(patch.H.astype("<u2").tobytes())
        f.write(patch.S.astype("u1").tobytes())
        f.write(patch.D.astype("u1").tobytes())
        f.write(patch.Q.astype("<u4").tobytes())


def read_patch(path) -> BevPatch:
    data = Path(path).read_bytes()
    if data[:4] != PATCH_MAGIC:
        raise ContractError(f"{path}: not a BEV patch file")
    w, h = struct.unpack_from("<II", data, 4)
    n = w * h
    off = 12
    expected = off + n * (2 + 1 + 1 + 4)
    if len(data) != expected:
        raise ContractError(f"{path}: truncated patch file")
    H = np.frombuffer(data, "<u2", n, off).reshape(h, w)
    off += 2 * n
    S = np.frombuffer(data, "u1", n, off).reshape(h, w)
    off += n
    D = np.frombuffer(data, "u1", n, off).reshape(h, w)
    off += n
    Q = np.frombuffer(data, "<u4", n, off).reshape(h, w)
    patch = make_patch(H.astype(np.int64), S.astype(np.int64), D)
    return replace(patch, Q=Q.astype(np.int64))
