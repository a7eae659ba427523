"""Scene features, positional encoding and the per-instance style table."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bev_core import NUM_CLASSES, BevPatch
from .errors import ContractError
from .pointgen import POINT_RECORD, BevPointCloud

C_FS = 61
C_Z = 256
N_PE = 10
HEIGHT_SCALE = 32.0
FEATS_MAGIC = b"BVF1"


@dataclass(frozen=True, eq=False)
class SceneFeatureMap:
    G: np.ndarray  # (height_cells, width, C_FS) float32, indexed [y, x]

    @property
    def channels(self) -> int:
        return int(self.G.shape[2])


def _mean_pool(H: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    padded = np.pad(H, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return win.mean(axis=(2, 3))


def cell_descriptors(patch: BevPatch, height_scale: float = HEIGHT_SCALE) -> np.ndarray:
    """Per-cell [height, one-hot class, 3x3 and 9x9 mean height] descriptor."""
    H = patch.H.astype(np.float64) / height_scale
    onehot = np.eye(NUM_CLASSES)[patch.S]
    return np.concatenate(
        [H[..., None], onehot, _mean_pool(H, 3)[..., None], _mean_pool(H, 9)[..., None]],
        axis=-1,
    )


def encoder_weights(seed: int, c_fs: int = C_FS) -> np.ndarray:
    d_in = NUM_CLASSES + 3
    rng = np.random.default_rng([seed, 0x5CE])
    return rng.standard_normal((d_in, c_fs)) / np.sqrt(d_in)


def scene_encode(patch: BevPatch, seed: int = 0, c_fs: int = C_FS) -> SceneFeatureMap:
    """Fixed random projection of local height/class descriptors to ``c_fs`` channels."""
    desc = cell_descriptors(patch)
    G = desc @ encoder_weights(seed, c_fs)
    return SceneFeatureMap(G=G.astype(np.float32))


def gather_scene_feats(cloud: BevPointCloud, fmap: SceneFeatureMap) -> BevPointCloud:
    """Look up each point's feature by its (x, y) cell; z is ignored."""
    c = cloud.coords_abs.astype(np.float64)
    x = np.floor(c[:, 0]).astype(np.int64)
    y = np.floor(c[:, 1]).astype(np.int64)
    h, w = fmap.G.shape[:2]
    if len(x) and (x.min() < 0 or y.min() < 0 or x.max() >= w or y.max() >= h):
        raise ContractError("point cell outside the scene feature map")
    return replace(cloud, scene_feats=fmap.G[y, x])


def encode_values(values: np.ndarray, n_pe: int = N_PE) -> np.ndarray:
    """sin/cos(2^i pi x) for i < n_pe; columns ordered (value, frequency, [sin, cos])."""
    if n_pe < 1:
        raise ContractError("n_pe must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    freq = (2.0 ** np.arange(n_pe)) * np.pi
    arg = v[:, :, None] * freq
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(v.shape[0], -1)


def positional_encode(cloud: BevPointCloud, n_pe: int = N_PE) -> np.ndarray:
    """Encode concat(relative coords, scene features); width 2 n_pe (3 + C_FS)."""
    if cloud.scene_feats is None:
        raise ContractError("scene features not gathered")
    vals = np.concatenate(
        [cloud.coords_rel.astype(np.float64), cloud.scene_feats.astype(np.float64)], axis=1
    )
    return encode_values(vals, n_pe)


@dataclass(frozen=True, eq=False)
class StyleTable:
    """Style codes for labels 0..n_ins, regenerated from ``seed``.

    Row 0 is the shared code of stuff points.  Rows are a prefix of one
    normal stream, so a label's code does not depend on ``n_ins``.
    """

    seed: int
    n_ins: int
    c_z: int = C_Z
    overrides: tuple = ()  # ((label, code), ...) for local edits

    @property
    def codes(self) -> np.ndarray:
        Z = np.random.default_rng(self.seed).standard_normal((self.n_ins + 1, self.c_z))
        for label, code in self.overrides:
            Z[label] = code
        return Z

    def with_code(self, label: int, code) -> "StyleTable":
        code = np.asarray(code, dtype=np.float64)
        if code.shape != (self.c_z,):
            raise ContractError(f"style code must have width {self.c_z}")
        if not 0 <= label <= self.n_ins:
            raise ContractError(f"label {label} outside table")
        kept = tuple((l, c) for l, c in self.overrides if l != label)
        return replace(self, overrides=kept + ((label, code),))

    def to_json(self) -> str:
        if self.overrides:
            raise ContractError("edited tables need the explicit matrix dump")
        return json.dumps({"seed": self.seed, "n_ins": self.n_ins, "c_z": self.c_z},
                          separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "StyleTable":
        d = json.loads(text)
        return cls(seed=int(d["seed"]), n_ins=int(d["n_ins"]), c_z=int(d["c_z"]))


def save_style_table(table: StyleTable, path) -> None:
    Path(path).write_text(table.to_json() + "\n")


def load_style_table(path) -> StyleTable:
    return StyleTable.from_json(Path(path).read_text())


def dump_style_matrix(table: StyleTable, path) -> None:
    """Explicit little-endian f64 matrix with a (rows, cols) u32 header."""
    Z = table.codes
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *Z.shape))
        f.write(Z.astype("<f8").tobytes())


def load_style_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<II", data, 0)
    return np.frombuffer(data, "<f8", rows * cols, 8).reshape(rows, cols).copy()


def style_lookup(table: StyleTable | np.ndarray, labels: np.ndarray) -> np.ndarray:
    Z = table.codes if isinstance(table, StyleTable) else np.asarray(table)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= Z.shape[0]):
        raise ContractError("label outside style table")
    return Z[labels]


def interpolate_styles(z_a, z_b, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ContractError("interpolation weight must lie in [0, 1]")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ContractError("style codes differ in width")
    return (1.0 - t) * z_a + t * z_b


def save_features(cloud: BevPointCloud, path) -> None:
    """``BVF1``: u32 count, u32 channels, the point records, then f32 features."""
    if cloud.scene_feats is None:
        raise ContractError("cloud has no scene features")
    n, c = cloud.scene_feats.shape
    rec = np.empty(n, dtype=POINT_RECORD)
    rec["abs"] = cloud.coords_abs
    rec["label"] = cloud.labels
    rec["rel"] = cloud.coords_rel
    with open(path, "wb") as f:
        f.write(FEATS_MAGIC)
        f.write(struct.pack("<II", n, c))
        f.write(rec.tobytes())
        f.write(cloud.scene_feats.astype("<f4").tobytes())


def load_features(path) -> BevPointCloud:
    data = Path(path).read_bytes()
    if data[:4] != FEATS_MAGIC:
        raise ContractError(f"{path}: not a feature container")
    n, c = struct.unpack_from("<II", data, 4)
    rec = np.frombuffer(data, POINT_RECORD, n, 12)
    off = 12 + n * POINT_RECORD.itemsize
    if len(data) != off + 4 * n * c:
        raise ContractError(f"{path}: truncated feature container")
    feats = np.frombuffer(data, "<f4", n * c, off).reshape(n, c).astype(np.float32)
    return BevPointCloud(
        coords_abs=rec["abs"].astype(np.float32),
        labels=rec["label"].astype(np.int64),
        coords_rel=rec["rel"].astype(np.float32),
        scene_feats=feats,
    )
