"""CPU Gaussian splatting: projection, depth sort, front-to-back compositing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import parallel
from .camera import CameraModel
from .decoder import GaussianSet
from .errors import ContractError

BLUR_FLOOR = 0.3  # px^2 added to the 2D covariance diagonal
ALPHA_MAX = 0.99
MIN_TRANSMITTANCE = 1e-4
SIGMA_CUTOFF = 3.0
TILE = 16
SPLAT_CHUNK = 128
DEPTH_SCALE = 100.0  # 16-bit depth PNG counts per world unit
LAMBDA_L1 = 10.0


@dataclass(frozen=True, eq=False)
class Splats:
    """Projected 2D Gaussians (structure of arrays)."""

    means: np.ndarray  # (M, 2) pixels
    covs: np.ndarray  # (M, 2, 2) pixels^2
    depths: np.ndarray  # (M,) camera depth
    colors: np.ndarray  # (M, 3)
    opacities: np.ndarray  # (M,)
    index: np.ndarray  # (M,) row in the source GaussianSet

    def __len__(self) -> int:
        return int(self.depths.shape[0])

    @property
    def conics(self) -> np.ndarray:
        """(a, b, c) of the inverse covariance [[a, b], [b, c]]."""
        c = self.covs
        det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
        return np.stack([c[:, 1, 1] / det, -c[:, 0, 1] / det, c[:, 0, 0] / det], axis=1)

    @property
    def radii(self) -> np.ndarray:
        c = self.covs
        mid = 0.5 * (c[:, 0, 0] + c[:, 1, 1])
        disc = np.sqrt(np.maximum(mid * mid - (c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2), 0.0))
        return SIGMA_CUTOFF * np.sqrt(mid + disc)


@dataclass(frozen=True, eq=False)
class RenderTarget:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), 0 where nothing was drawn

    @property
    def width(self) -> int:
        return int(self.alpha.shape[1])

    @property
    def height(self) -> int:
        return int(self.alpha.shape[0])


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def project(gauss: GaussianSet, cam: CameraModel, blur: float = BLUR_FLOOR) -> Splats:
    """Perspective-project Gaussians with the affine (Jacobian) approximation.

    Drops Gaussians outside (near, far) and those whose 3-sigma footprint
    misses the image.
    """
    cam.validate()
    p = cam.world_to_camera(gauss.centers.astype(np.float64))
    z = p[:, 2]
    keep = (z > cam.near) & (z < cam.far)
    idx = np.nonzero(keep)[0]
    p, z = p[idx], z[idx]
    Rg = quat_to_rotmat(gauss.rotations[idx])
    s = gauss.scales[idx].astype(np.float64)
    M = Rg * s[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * p[:, 0] / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * p[:, 1] / (z * z)
    JW = J @ cam.R
    cov = JW @ sigma @ JW.transpose(0, 2, 1)
    cov[:, 0, 0] += blur
    cov[:, 1, 1] += blur
    cov[:, 0, 1] = cov[:, 1, 0] = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    means = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    spl = Splats(means, cov, z, gauss.colors[idx].astype(np.float64),
                 gauss.opacities[idx].astype(np.float64), idx)
    r = spl.radii
    on = ((means[:, 0] + r >= -0.5) & (means[:, 0] - r <= cam.width - 0.5)
          & (means[:, 1] + r >= -0.5) & (means[:, 1] - r <= cam.height - 0.5))
    return _take(spl, np.nonzero(on)[0])


def _take(s: Splats, idx) -> Splats:
    return Splats(s.means[idx], s.covs[idx], s.depths[idx], s.colors[idx],
                  s.opacities[idx], s.index[idx])


def _composite(px, py, mx, conic, col, opa, dep, t_min):
    """Front-to-back blend of depth-ordered splats over pixels (px, py).

    Accumulation runs strictly in splat order (cumprod / cumsum), so adding
    splats with zero alpha leaves every result bit unchanged.
    """
    P = px.size
    T = np.ones(P)
    C = np.zeros((P, 3))
    Dw = np.zeros(P)
    Wsum = np.zeros(P)
    for lo in range(0, mx.shape[0], SPLAT_CHUNK):
        if not (T >= t_min).any():
            break
        hi = lo + SPLAT_CHUNK
        dx = px[None, :] - mx[lo:hi, 0, None]
        dy = py[None, :] - mx[lo:hi, 1, None]
        a, b, c = conic[lo:hi, 0, None], conic[lo:hi, 1, None], conic[lo:hi, 2, None]
        m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        inside = m <= SIGMA_CUTOFF ** 2
        alpha = np.where(inside, np.minimum(opa[lo:hi, None] * np.exp(-0.5 * np.where(inside, m, 0.0)), ALPHA_MAX), 0.0)
        Tc = np.cumprod(np.vstack([T[None, :], 1.0 - alpha]), axis=0)
        Tb = Tc[:-1]
        live = Tb >= t_min
        w = np.where(live, alpha * Tb, 0.0)
        ncut = live.sum(axis=0)
        T = Tc[ncut, np.arange(P)]
        C = np.cumsum(np.concatenate([C[None], w[:, :, None] * col[lo:hi, None, :]]), axis=0)[-1]
        Dw = np.cumsum(np.vstack([Dw[None, :], w * dep[lo:hi, None]]), axis=0)[-1]
        Wsum = np.cumsum(np.vstack([Wsum[None, :], w]), axis=0)[-1]
    return T, C, Dw, Wsum


def rasterize(gauss: GaussianSet, cam: CameraModel, background=(1.0, 1.0, 1.0),
              tile_size: int | None = TILE, min_transmittance: float = MIN_TRANSMITTANCE,
              splats: Splats | None = None) -> RenderTarget:
    """Render color, alpha and expected depth.

    ``tile_size=None`` evaluates every splat at every pixel (reference path);
    tiled rendering gives bit-identical output.  Set ``min_transmittance=0``
    to disable early termination.
    """
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    W, H = cam.width, cam.height
    spl = project(gauss, cam) if splats is None else splats
    order = np.argsort(spl.depths, kind="stable")
    spl = _take(spl, order)
    conic = spl.conics
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    Dw = np.zeros((H, W))
    Ws = np.zeros((H, W))

    if tile_size is None:
        vv, uu = np.mgrid[0:H, 0:W]
        t, c, d, ws = _composite(uu.ravel().astype(np.float64), vv.ravel().astype(np.float64),
                                 spl.means, conic, spl.colors, spl.opacities, spl.depths,
                                 min_transmittance)
        T, C, Dw, Ws = t.reshape(H, W), c.reshape(H, W, 3), d.reshape(H, W), ws.reshape(H, W)
    else:
        if tile_size < 1:
            raise ContractError("tile size must be >= 1")
        ntx = -(-W // tile_size)
        nty = -(-H // tile_size)
        r = spl.radii
        x0 = np.clip(np.floor((spl.means[:, 0] - r) / tile_size), 0, ntx - 1).astype(np.int64)
        x1 = np.clip(np.floor((spl.means[:, 0] + r) / tile_size), 0, ntx - 1).astype(np.int64)
        y0 = np.clip(np.floor((spl.means[:, 1] - r) / tile_size), 0, nty - 1).astype(np.int64)
        y1 = np.clip(np.floor((spl.means[:, 1] + r) / tile_size), 0, nty - 1).astype(np.int64)
        nx = x1 - x0 + 1
        ny = y1 - y0 + 1
        cnt = nx * ny
        sid = np.repeat(np.arange(len(spl)), cnt)
        k = np.arange(sid.size) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        tx = x0[sid] + k % nx[sid]
        ty = y0[sid] + k // nx[sid]
        tid = ty * ntx + tx
        srt = np.argsort(tid, kind="stable")  # keeps depth order within a tile
        tid, sid = tid[srt], sid[srt]
        bounds = np.searchsorted(tid, np.arange(ntx * nty + 1))

        def render_tile(t):
            ty_, tx_ = divmod(t, ntx)
            u0, v0 = tx_ * tile_size, ty_ * tile_size
            u1, v1 = min(u0 + tile_size, W), min(v0 + tile_size, H)
            vv, uu = np.mgrid[v0:v1, u0:u1]
            s = sid[bounds[t]:bounds[t + 1]]
            return (t, (v0, v1, u0, u1),
                    _composite(uu.ravel().astype(np.float64), vv.ravel().astype(np.float64),
                               spl.means[s], conic[s], spl.colors[s], spl.opacities[s],
                               spl.depths[s], min_transmittance))

        for t, (v0, v1, u0, u1), (t_, c, d, ws) in parallel.pmap(render_tile, range(ntx * nty)):
            h, w = v1 - v0, u1 - u0
            T[v0:v1, u0:u1] = t_.reshape(h, w)
            C[v0:v1, u0:u1] = c.reshape(h, w, 3)
            Dw[v0:v1, u0:u1] = d.reshape(h, w)
            Ws[v0:v1, u0:u1] = ws.reshape(h, w)

    color = C + T[..., None] * bg
    depth = np.divide(Dw, Ws, out=np.zeros_like(Dw), where=Ws > 0)
    return RenderTarget(color=color, alpha=1.0 - T, depth=depth)


def l1_loss(render, reference, lam: float = LAMBDA_L1) -> float:
    """lambda * mean absolute color difference."""
    a = render.color if isinstance(render, RenderTarget) else np.asarray(render, dtype=np.float64)
    b = reference.color if isinstance(reference, RenderTarget) else np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(lam * np.mean(np.abs(a - b)))


def save_color(rt: RenderTarget, path) -> None:
    img = np.rint(np.clip(rt.color, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path)


def save_alpha(rt: RenderTarget, path) -> None:
    img = np.rint(np.clip(rt.alpha, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(img).save(path)


def save_depth(rt: RenderTarget, path, scale: float = DEPTH_SCALE) -> None:
    """16-bit PNG of depth * ``scale`` (default 100 counts per world unit), clipped to 65535."""
    img = np.rint(np.clip(rt.depth * scale, 0.0, 65535.0)).astype(np.uint16)
    Image.fromarray(img).save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0
