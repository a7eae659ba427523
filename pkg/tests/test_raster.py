import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from bevsplat import parallel
from bevsplat.camera import CameraModel, intrinsics, look_at
from bevsplat.decoder import GaussianSet
from bevsplat.errors import ContractError
from bevsplat.raster import (
    RenderTarget, l1_loss, load_image, project, quat_to_rotmat, rasterize, save_alpha,
    save_color, save_depth,
)
from oracles import back_to_front

F = 40.0


def axis_cam(w=32, h=24, f=F):
    """Camera at the origin looking down +z, principal point on a pixel center."""
    return CameraModel(intrinsics(f, f, w // 2, h // 2), np.eye(4), w, h, near=0.1, far=100)


def gaussians(centers, colors=None, scales=None, opac=None, rots=None):
    c = np.asarray(centers, np.float32).reshape(-1, 3)
    n = len(c)
    rot = np.tile(np.float32([1, 0, 0, 0]), (n, 1)) if rots is None else np.asarray(rots, np.float32)
    return GaussianSet(
        centers=c,
        scales=np.ones((n, 3), np.float32) if scales is None else np.asarray(scales, np.float32),
        rotations=rot,
        opacities=np.ones(n, np.float32) if opac is None else np.asarray(opac, np.float32),
        colors=np.full((n, 3), 0.5, np.float32) if colors is None else np.asarray(colors, np.float32),
    )


def random_scene(seed, n=100, w=40, h=30):
    r = np.random.default_rng(seed)
    cam = axis_cam(w, h)
    z = r.uniform(2, 20, n)
    xy = (r.uniform([-0.5, -0.5], [w - 0.5, h - 0.5], (n, 2)) - [cam.cx, cam.cy]) * z[:, None] / F
    q = r.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    gs = gaussians(np.c_[xy, z], r.uniform(0, 1, (n, 3)), r.uniform(0.02, 0.5, (n, 3)),
                   r.uniform(0, 1, n), q)
    return gs, cam


@pytest.mark.parametrize("d", [2.0, 5.0, 13.0])
def test_on_axis_projection(d):
    cam = axis_cam()
    s = project(gaussians([[0, 0, d]]), cam)
    assert np.allclose(s.means[0], [cam.cx, cam.cy], atol=1e-12)
    assert np.allclose(s.covs[0], (F / d) ** 2 * np.eye(2) + 0.3 * np.eye(2), atol=1e-9)


def test_doubling_depth_quarters_covariance():
    cam = axis_cam(200, 200)
    q = np.array([0.9, 0.1, -0.3, 0.2])
    g1 = gaussians([[0.3, -0.2, 4]], scales=[[0.5, 1.2, 0.8]], rots=[q / np.linalg.norm(q)])
    g2 = gaussians([[0.6, -0.4, 8]], scales=[[0.5, 1.2, 0.8]], rots=[q / np.linalg.norm(q)])
    c1 = project(g1, cam, blur=0).covs[0]
    c2 = project(g2, cam, blur=0).covs[0]
    assert np.allclose(c2, c1 / 4, rtol=1e-12)


def test_covariance_matches_numeric_jacobian():
    cam = look_at([1, -3, 6], [2, 2, 0], 64, 48, fov_deg=55)
    q = np.array([0.7, 0.2, 0.5, -0.4])
    q /= np.linalg.norm(q)
    mu = np.array([2.4, 1.1, 0.7])
    s = np.array([0.3, 0.9, 0.2])
    spl = project(gaussians([mu], scales=[s], rots=[q]), cam)

    def proj(p):
        c = cam.world_to_camera(p[None])[0]
        return np.array([cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy])

    h = 1e-6
    J = np.stack([(proj(mu + h * e) - proj(mu - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    Rg = quat_to_rotmat(q)
    sigma = Rg @ np.diag(s ** 2) @ Rg.T
    want = J @ sigma @ J.T + 0.3 * np.eye(2)
    assert np.allclose(spl.covs[0], want, rtol=1e-6)
    assert np.allclose(spl.means[0], proj(mu), atol=1e-9)
    assert np.allclose(quat_to_rotmat(q) @ quat_to_rotmat(q).T, np.eye(3), atol=1e-12)


def test_culling_in_projection():
    cam = axis_cam()
    s = project(gaussians([[0, 0, -3], [0, 0, 0.05], [0, 0, 150], [500, 0, 50], [0, 0, 5]]), cam)
    assert s.index.tolist() == [4]
    assert np.all(np.linalg.eigvalsh(s.covs) > 0)


def test_empty_scene():
    cam = axis_cam()
    rt = rasterize(GaussianSet.empty(), cam, (0.2, 0.4, 0.6))
    assert np.all(rt.color == [0.2, 0.4, 0.6])
    assert not rt.alpha.any() and not rt.depth.any()
    assert (rt.width, rt.height) == (32, 24)


def test_alpha_peak_at_principal_point():
    cam = axis_cam(31, 27)
    rt = rasterize(gaussians([[0, 0, 10]], scales=[[0.2, 0.2, 0.2]]), cam)
    v, u = np.unravel_index(np.argmax(rt.alpha), rt.alpha.shape)
    assert (u, v) == (cam.cx, cam.cy)


def test_front_red_hides_rear_blue():
    cam = axis_cam()
    gs = gaussians([[0, 0, 10], [0, 0, 5]], colors=[[0, 0, 1], [1, 0, 0]])
    rt = rasterize(gs, cam, (0, 0, 0))
    px = rt.color[int(cam.cy), int(cam.cx)]
    assert np.max(np.abs(px - [1, 0, 0])) <= 0.011


def test_single_splat_depth():
    cam = axis_cam()
    rt = rasterize(gaussians([[0, 0, 7.25]]), cam)
    assert abs(rt.depth[int(cam.cy), int(cam.cx)] - 7.25) <= 1e-4


@given(st.integers(0, 10 ** 6))
def test_matches_back_to_front_oracle(seed):
    gs, cam = random_scene(seed)
    rt = rasterize(gs, cam, (0.3, 0.6, 0.9), min_transmittance=0.0)
    s = project(gs, cam)
    C, A, D = back_to_front(s.means, s.covs, s.depths, s.colors, s.opacities,
                            cam.width, cam.height, (0.3, 0.6, 0.9))
    assert np.max(np.abs(rt.color - C)) <= 1e-6
    assert np.max(np.abs(rt.alpha - A)) <= 1e-6
    covered = A > 1e-3
    assert np.max(np.abs(rt.depth - D)[covered], initial=0) <= 1e-6 * 20 / 1e-3
    # default early termination stays within its transmittance threshold
    rd = rasterize(gs, cam, (0.3, 0.6, 0.9))
    assert np.max(np.abs(rd.color - C)) <= 1e-4
    assert np.max(np.abs(rd.alpha - A)) <= 1e-4


@given(st.integers(0, 10 ** 6), st.sampled_from([1, 5, 16, 64]))
def test_tiled_equals_naive(seed, tile):
    gs, cam = random_scene(seed, 60)
    a = rasterize(gs, cam, tile_size=tile)
    b = rasterize(gs, cam, tile_size=None)
    for name in ("color", "alpha", "depth"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


@given(st.integers(0, 10 ** 6))
def test_adding_splat_never_lowers_alpha(seed):
    gs, cam = random_scene(seed, 30)
    extra, _ = random_scene(seed + 1, 1)
    more = GaussianSet(*(np.concatenate([getattr(gs, k), getattr(extra, k)])
                         for k in ("centers", "scales", "rotations", "opacities", "colors")))
    a = rasterize(gs, cam, min_transmittance=0.0).alpha
    b = rasterize(more, cam, min_transmittance=0.0).alpha
    assert np.all(b >= a)
    a = rasterize(gs, cam).alpha
    b = rasterize(more, cam).alpha
    assert np.all(b >= a - 1e-4)


@given(st.integers(0, 10 ** 6))
def test_permutation_invariance_with_defaults(seed):
    r = np.random.default_rng(seed)
    cam = axis_cam()
    n = 40
    z = r.uniform(3, 30, n)
    xy = r.uniform(-0.4, 0.4, (n, 2)) * z[:, None]
    gs = gaussians(np.c_[xy, z], r.uniform(0, 1, (n, 3)))
    perm = r.permutation(n)
    a, b = rasterize(gs, cam), rasterize(gs.permuted(perm), cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_equal_depth_ties_follow_input_order():
    cam = axis_cam()
    gs = gaussians([[0, 0, 5], [0, 0, 5]], colors=[[1, 0, 0], [0, 1, 0]])
    c = rasterize(gs, cam, (0, 0, 0)).color[int(cam.cy), int(cam.cx)]
    assert c[0] > c[1]
    c = rasterize(gs.permuted([1, 0]), cam, (0, 0, 0)).color[int(cam.cy), int(cam.cx)]
    assert c[1] > c[0]


def test_thread_count_does_not_change_pixels():
    gs, cam = random_scene(3, 300, 96, 80)
    a = rasterize(gs, cam)
    with parallel.threads(4):
        b = rasterize(gs, cam)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_l1_loss(rng):
    cam = axis_cam()
    rt = rasterize(random_scene(1)[0], cam)
    assert l1_loss(rt, rt) == 0
    assert l1_loss(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 10
    a, b = rng.uniform(0, 1, (5, 6, 3)), rng.uniform(0, 1, (5, 6, 3))
    want = 10 * sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(l1_loss(a, b) - want) <= 1e-12
    assert l1_loss(a, b, lam=1) == pytest.approx(want / 10, abs=1e-12)
    with pytest.raises(ContractError):
        l1_loss(a, b[:4])


def test_image_outputs(tmp_path):
    rt = RenderTarget(color=np.full((2, 3, 3), 0.5), alpha=np.array([[0, 0.5, 1]] * 2),
                      depth=np.array([[0, 1.5, 700.0]] * 2))
    save_color(rt, tmp_path / "c.png")
    save_alpha(rt, tmp_path / "a.png")
    save_depth(rt, tmp_path / "d.png")
    c = np.array(Image.open(tmp_path / "c.png"))
    a = np.array(Image.open(tmp_path / "a.png"))
    d = np.array(Image.open(tmp_path / "d.png"))
    assert c.dtype == np.uint8 and c.shape == (2, 3, 3) and np.all(c == 128)
    assert a[0].tolist() == [0, 32768, 65535]
    assert d[0].tolist() == [0, 150, 65535]
    assert np.allclose(load_image(tmp_path / "c.png"), 128 / 255)


def test_bad_tile_size():
    with pytest.raises(ContractError):
        rasterize(gaussians([[0, 0, 5]]), axis_cam(), tile_size=0)
