import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bevsplat.bev_core import make_patch
from bevsplat.errors import ContractError
from bevsplat.features import (
    StyleTable, dump_style_matrix, encode_values, gather_scene_feats, interpolate_styles,
    load_features, load_style_matrix, load_style_table, positional_encode, save_features,
    save_style_table, scene_encode, style_lookup,
)
from bevsplat.pointgen import BevPointCloud, extrude, patch_relative_coords
from oracles import positional_encoding_direct


def cloud_at(xyz, labels=None):
    xyz = np.asarray(xyz, np.float32).reshape(-1, 3)
    labels = np.zeros(len(xyz), int) if labels is None else np.asarray(labels)
    return BevPointCloud(coords_abs=xyz, labels=labels, coords_rel=np.zeros_like(xyz))


def test_scene_encode_shape_and_determinism(city):
    a, b = scene_encode(city, 5), scene_encode(city, 5)
    assert a.G.shape == (city.height_cells, city.width, 61)
    assert np.array_equal(a.G, b.G)
    assert np.all(np.isfinite(a.G))
    assert not np.array_equal(a.G, scene_encode(city, 6).G)
    assert scene_encode(city, 5, c_fs=8).channels == 8


def test_scene_encode_translation_equivariance(rng):
    H = rng.integers(0, 30, (20, 24))
    S = rng.integers(0, 8, (20, 24))
    H2, S2 = np.zeros_like(H), np.zeros_like(S)
    H2[:, 1:], S2[:, 1:] = H[:, :-1], S[:, :-1]  # shift by one cell in x
    G = scene_encode(make_patch(H, S), 0).G
    G2 = scene_encode(make_patch(H2, S2), 0).G
    # 9x9 pooling reaches 4 cells; stay clear of both borders
    assert np.allclose(G2[4:-4, 5:-4], G[4:-4, 4:-5], rtol=0, atol=1e-6)


def test_gather():
    p = make_patch(np.arange(80).reshape(8, 10) % 7, np.ones((8, 10)))
    fmap = scene_encode(p, 0)
    c = gather_scene_feats(cloud_at([[5.5, 7.5, 0], [2.5, 3.5, 0], [2.5, 3.5, 4]]), fmap)
    assert np.array_equal(c.scene_feats[0], fmap.G[7, 5])
    assert np.array_equal(c.scene_feats[1], c.scene_feats[2])
    empty = gather_scene_feats(cloud_at(np.zeros((0, 3))), fmap)
    assert empty.scene_feats.shape == (0, 61)
    with pytest.raises(ContractError):
        gather_scene_feats(cloud_at([[10.5, 0.5, 0]]), fmap)


def test_gather_commutes_with_permutation(city, rng):
    cloud = extrude(city).subset(np.arange(0, 500))
    fmap = scene_encode(city, 0)
    perm = rng.permutation(len(cloud))
    a = gather_scene_feats(cloud, fmap).scene_feats[perm]
    b = gather_scene_feats(cloud.subset(perm), fmap).scene_feats
    assert np.array_equal(a, b)


def test_encoding_analytic_values():
    e = encode_values(np.array([[0.0, 1.0]]), 3)
    assert np.array_equal(e[0, :6], [0, 1, 0, 1, 0, 1])
    assert abs(e[0, 6]) < 1e-12 and abs(e[0, 7] + 1) < 1e-12
    with pytest.raises(ContractError):
        encode_values(np.zeros((1, 1)), 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
              elements=st.floats(-4, 4)), st.integers(1, 8))
def test_encoding_matches_direct(vals, n_pe):
    got = encode_values(vals, n_pe)
    assert got.shape == (vals.shape[0], 2 * n_pe * vals.shape[1])
    assert np.max(np.abs(got - positional_encoding_direct(vals, n_pe))) <= 1e-12
    assert np.all(np.abs(got) <= 1)


def test_positional_width_is_1280(city):
    cloud = patch_relative_coords(extrude(city).subset(np.arange(50)), city)
    cloud = gather_scene_feats(cloud, scene_encode(city, 0))
    FP = positional_encode(cloud, 10)
    assert FP.shape == (50, 2 * 10 * (3 + 61)) == (50, 1280)
    with pytest.raises(ContractError):
        positional_encode(cloud_at([[0.5, 0.5, 0]]))


def test_style_lookup_rows():
    t = StyleTable(seed=9, n_ins=3)
    Z = t.codes
    assert Z.shape == (4, 256)
    got = style_lookup(t, np.array([1, 2, 3, 2]))
    assert np.array_equal(got[:3], Z[1:4])
    assert np.array_equal(got[1], got[3])
    assert len({tuple(r) for r in got[:3]}) == 3
    with pytest.raises(ContractError):
        style_lookup(t, np.array([4]))


def test_style_statistics():
    Z = StyleTable(seed=0, n_ins=39).codes  # 40 x 256 = 10240 samples
    assert abs(Z.mean()) < 0.05 and abs(Z.var() - 1) < 0.05


def test_style_prefix_property():
    small, big = StyleTable(4, 5).codes, StyleTable(4, 50).codes
    assert np.array_equal(small, big[:6])


def test_style_table_json(tmp_path):
    t = StyleTable(seed=42, n_ins=17)
    assert t.to_json() == '{"seed":42,"n_ins":17,"c_z":256}'
    save_style_table(t, tmp_path / "s.json")
    back = load_style_table(tmp_path / "s.json")
    assert np.array_equal(back.codes, t.codes)


def test_style_edits_and_matrix_dump(tmp_path):
    t = StyleTable(seed=1, n_ins=2, c_z=4).with_code(2, [1, 2, 3, 4])
    assert t.codes[2].tolist() == [1, 2, 3, 4]
    with pytest.raises(ContractError):
        t.to_json()
    with pytest.raises(ContractError):
        t.with_code(0, [1, 2])
    with pytest.raises(ContractError):
        t.with_code(3, [1, 2, 3, 4])
    dump_style_matrix(t, tmp_path / "z.bin")
    assert np.array_equal(load_style_matrix(tmp_path / "z.bin"), t.codes)
    assert np.array_equal(style_lookup(load_style_matrix(tmp_path / "z.bin"), [2]), t.codes[[2]])


def test_interpolation(rng):
    za, zb = rng.standard_normal(256), rng.standard_normal(256)
    assert np.array_equal(interpolate_styles(za, zb, 0.0), za)
    assert np.array_equal(interpolate_styles(za, zb, 1.0), zb)
    assert not np.any(interpolate_styles(za, -za, 0.5))
    for bad in (-0.1, 1.1):
        with pytest.raises(ContractError):
            interpolate_styles(za, zb, bad)
    with pytest.raises(ContractError):
        interpolate_styles(za, zb[:3], 0.5)


def test_features_file_round_trip(tmp_path, city):
    cloud = patch_relative_coords(extrude(city).subset(np.arange(100)), city)
    cloud = gather_scene_feats(cloud, scene_encode(city, 0))
    save_features(cloud, tmp_path / "f.bvf")
    back = load_features(tmp_path / "f.bvf")
    for name in ("coords_abs", "labels", "coords_rel", "scene_feats"):
        assert np.array_equal(getattr(back, name), getattr(cloud, name))
    with pytest.raises(ContractError):
        save_features(cloud_at([[0.5, 0.5, 0]]), tmp_path / "g.bvf")
