"""Seeded synthetic Manhattan-style city patches for tests and demos."""
from __future__ import annotations

import numpy as np

from .bev_core import BevPatch, SemanticClass as SC, make_patch
from .camera import CameraModel, look_at
from .errors import ContractError


def synth_city(size: int = 128, seed: int = 0, block: int = 20, road: int = 4,
               max_height: int = 24, sparse_stuff: bool = True) -> BevPatch:
    """Street grid with building lots, parks, water and parked cars.

    Each block period starts with a road strip, so the patch tiles without
    buildings touching across the seam.  With ``sparse_stuff`` the density
    map keeps every other road/water/ground cell.
    """
    rng = np.random.default_rng(seed)
    S = np.full((size, size), SC.GROUND, dtype=np.int64)
    H = np.zeros((size, size), dtype=np.int64)
    period = block + road
    idx = np.arange(size)
    on_road = (idx % period) < road
    S[on_road, :] = SC.ROAD
    S[:, on_road] = SC.ROAD

    starts = [s for s in range(road, size, period)]
    for by in starts:
        for bx in starts:
            y1, x1 = min(by + block, size), min(bx + block, size)
            kind = rng.random()
            if kind < 0.1:
                S[by:y1, bx:x1] = SC.WATER
            elif kind < 0.25:
                S[by:y1, bx:x1] = SC.VEGETATION
                H[by:y1, bx:x1] = rng.integers(0, 3, size=(y1 - by, x1 - bx))
            else:
                _fill_lots(S, H, rng, bx, by, x1, y1, max_height)

    _park_cars(S, H, rng, on_road, size)
    D = np.ones((size, size), dtype=np.uint8)
    if sparse_stuff:
        yy, xx = np.mgrid[0:size, 0:size]
        thin = np.isin(S, [SC.ROAD, SC.WATER, SC.GROUND]) & ((xx + yy) % 2 == 1)
        D[thin] = 0
    return make_patch(H, S, D).instantiated()


def _fill_lots(S, H, rng, x0, y0, x1, y1, max_height):
    # split the block into a 2x2 lot grid with a one-cell gap between lots
    mx = (x0 + x1) // 2
    my = (y0 + y1) // 2
    for ly0, ly1 in ((y0 + 1, my), (my + 1, y1 - 1)):
        for lx0, lx1 in ((x0 + 1, mx), (mx + 1, x1 - 1)):
            if ly1 - ly0 < 3 or lx1 - lx0 < 3 or rng.random() < 0.15:
                continue
            w = rng.integers(3, lx1 - lx0 + 1)
            h = rng.integers(3, ly1 - ly0 + 1)
            ox = lx0 + rng.integers(0, lx1 - lx0 - w + 1)
            oy = ly0 + rng.integers(0, ly1 - ly0 - h + 1)
            height = int(rng.integers(3, max_height + 1))
            S[oy:oy + h, ox:ox + w] = SC.BUILDING_FACADE
            S[oy + 1:oy + h - 1, ox + 1:ox + w - 1] = SC.BUILDING_ROOF
            H[oy:oy + h, ox:ox + w] = height


def _park_cars(S, H, rng, on_road, size):
    lanes = np.nonzero(on_road)[0]
    for lane in lanes[1::4]:
        for pos in range(2, size - 3, 6):
            if rng.random() < 0.4:
                if S[lane, pos] == SC.ROAD and S[lane, pos + 1] == SC.ROAD:
                    S[lane, pos:pos + 2] = SC.CAR
                    H[lane, pos:pos + 2] = 1
            if rng.random() < 0.4:
                if S[pos, lane] == SC.ROAD and S[pos + 1, lane] == SC.ROAD:
                    S[pos:pos + 2, lane] = SC.CAR
                    H[pos:pos + 2, lane] = 1


def default_camera(patch: BevPatch, width: int = 256, height: int = 256,
                   fov_deg: float = 60.0) -> CameraModel:
    """Oblique aerial view of the patch center."""
    w, h = patch.width, patch.height_cells
    target = np.array([w / 2, h / 2, 0.0])
    eye = np.array([w / 2, -0.15 * h, 0.75 * max(w, h)])
    return look_at(eye, target, width, height, fov_deg=fov_deg, near=0.5,
                   far=3.0 * max(w, h))


def framed_camera(patch: BevPatch, width: int = 256, height: int = 256,
                  fov_deg: float = 60.0, margin: float = 1.0) -> CameraModel:
    """Oblique view whose whole frustum projects inside the patch.

    The far plane is the largest value (found by bisection) that keeps the
    frustum's ground footprint ``margin`` cells inside the patch border, so
    geometry added around the patch can never enter the view.
    """
    from .pointgen import frustum_footprint

    w, h = patch.width, patch.height_cells
    eye = np.array([w / 2, 0.3 * h, 0.2 * max(w, h) + patch.max_height])
    target = np.array([w / 2, 0.65 * h, 0.0])

    def fits(far):
        cam = look_at(eye, target, width, height, fov_deg=fov_deg, near=0.5, far=far)
        fp = frustum_footprint(cam)
        return bool(np.all(fp >= margin) and np.all(fp <= [w - margin, h - margin]))

    lo, hi = 0.5, 4.0 * max(w, h)
    if not fits(lo + 1e-6):
        raise ContractError("patch too small for a framed camera")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if fits(mid) else (lo, mid)
    return look_at(eye, target, width, height, fov_deg=fov_deg, near=0.5, far=lo)


def tile_patch(patch: BevPatch, nx: int, ny: int) -> BevPatch:
    """Repeat the maps nx times along x and ny times along y, then re-instance."""
    H = np.tile(patch.H, (ny, nx))
    S = np.tile(patch.S, (ny, nx))
    D = np.tile(patch.D, (ny, nx))
    return make_patch(H.astype(np.int64), S.astype(np.int64), D).instantiated()
