"""Point features -> Gaussian attributes.

A single windowed self-attention block runs over the serialized points, and
style-modulated MLP layers turn (positional features, attention features,
style code) into raw attributes.  All weights are seeded, not trained.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import parallel
from .errors import ContractError
from .features import C_FS, C_Z, N_PE, StyleTable, positional_encode, style_lookup
from .pointgen import BevPointCloud
from .serialize import SerialOrder, reorder, serialize

C_FT = 256
HEADS = 8
HIDDEN = (256, 256)
WINDOW = 64
DEMOD_EPS = 1e-8
LEAKY_SLOPE = 0.2
OFFSET_LIMIT = 0.5  # cells
WINDOW_CHUNK = 64  # windows per parallel work item
POINT_CHUNK = 8192
RAW_LIMIT = 1e4
GAUSS_MAGIC = b"BVG1"

GAUSS_RECORD = np.dtype([
    ("center", "<f4", 3), ("scale", "<f4", 3), ("rotation", "<f4", 4),
    ("opacity", "<f4"), ("color", "<f4", 3),
])


@dataclass(frozen=True)
class AttributeConfig:
    generate_rgb: bool = True
    generate_xyz_offset: bool = False
    generate_opacity: bool = False
    generate_scale: bool = False

    def __post_init__(self):
        if not self.generate_rgb:
            raise ContractError("RGB is always generated")

    @property
    def width(self) -> int:
        return 3 + 3 * self.generate_xyz_offset + self.generate_opacity + 3 * self.generate_scale

    def slices(self) -> dict[str, slice]:
        out, at = {}, 0
        for name, on, w in (("rgb", True, 3), ("offset", self.generate_xyz_offset, 3),
                            ("opacity", self.generate_opacity, 1),
                            ("scale", self.generate_scale, 3)):
            if on:
                out[name] = slice(at, at + w)
                at += w
        return out

    @classmethod
    def parse(cls, spec: str) -> "AttributeConfig":
        names = {s.strip() for s in spec.split(",") if s.strip()}
        unknown = names - {"rgb", "offset", "opacity", "scale"}
        if unknown:
            raise ContractError(f"unknown attributes: {sorted(unknown)}")
        return cls(generate_rgb="rgb" in names or not names,
                   generate_xyz_offset="offset" in names,
                   generate_opacity="opacity" in names,
                   generate_scale="scale" in names)

    def to_spec(self) -> str:
        return ",".join(self.slices())


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    wq: np.ndarray  # (C_in, C_FT)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (C_FT, C_FT)
    heads: int

    @property
    def c_in(self) -> int:
        return self.wq.shape[0]

    @property
    def c_out(self) -> int:
        return self.wo.shape[1]


@dataclass(frozen=True, eq=False)
class ModulatedLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    affine: np.ndarray  # (C_Z, in): style -> per-input-channel scale
    affine_bias: np.ndarray  # (in,)

    def scales(self, z: np.ndarray) -> np.ndarray:
        return z @ self.affine + self.affine_bias


@dataclass(frozen=True, eq=False)
class DecoderWeights:
    seed: int
    attention: AttentionWeights
    layers: list = field(default_factory=list)

    @property
    def c_fp(self) -> int:
        return self.layers[0].weight.shape[1] - self.attention.c_out


def make_weights(seed: int, c_fp: int = 2 * N_PE * (3 + C_FS), c_ft: int = C_FT,
                 c_z: int = C_Z, heads: int = HEADS, hidden=HIDDEN,
                 config: AttributeConfig = AttributeConfig()) -> DecoderWeights:
    """Deterministic weights; each tensor has its own seeded stream."""
    if c_ft % heads:
        raise ContractError("C_FT must be divisible by the head count")

    def normal(tag, shape, fan_in):
        rng = np.random.default_rng([seed, tag])
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    att = AttentionWeights(
        wq=normal(1, (c_fp, c_ft), c_fp), wk=normal(2, (c_fp, c_ft), c_fp),
        wv=normal(3, (c_fp, c_ft), c_fp), wo=normal(4, (c_ft, c_ft), c_ft), heads=heads,
    )
    widths = [c_fp + c_ft, *hidden, config.width]
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        tag = 100 + 10 * i
        # the output layer is keyed by its width so hidden layers stay fixed across configs
        if i == len(widths) - 2:
            tag += 1000 * w_out
        layers.append(ModulatedLayer(
            weight=normal(tag, (w_out, w_in), w_in),
            bias=np.zeros(w_out),
            affine=normal(tag + 1, (c_z, w_in), c_z),
            affine_bias=np.ones(w_in),
        ))
    return DecoderWeights(seed=seed, attention=att, layers=layers)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _attend_windows(X: np.ndarray, w: AttentionWeights, window: int):
    """Attention over rows of X split into consecutive windows; X rows are a whole number of windows, except possibly the last."""
    n = X.shape[0]
    h = w.heads
    dh = w.c_out // h
    q, k, v = X @ w.wq, X @ w.wk, X @ w.wv
    out = np.empty((n, w.c_out))
    probs = []
    full = (n // window) * window
    for lo, hi, m in ((0, full, window), (full, n, n - full)):
        if hi <= lo:
            continue
        nw = (hi - lo) // m

        def split(a):
            return a[lo:hi].reshape(nw, m, h, dh).transpose(0, 2, 1, 3)

        qs, ks, vs = split(q), split(k), split(v)
        p = _softmax(qs @ ks.transpose(0, 1, 3, 2) / np.sqrt(dh))
        o = (p @ vs).transpose(0, 2, 1, 3).reshape(hi - lo, w.c_out)
        out[lo:hi] = o
        probs.append(p)
    return out @ w.wo, probs


def window_attention(F: np.ndarray, weights: DecoderWeights | AttentionWeights,
                     window: int = WINDOW, return_probs: bool = False):
    """Multi-head self-attention inside consecutive windows of ``window`` rows.

    No positional bias is used within a window.  With ``return_probs`` the
    per-window attention matrices (windows, heads, W, W) are also returned.
    """
    w = weights.attention if isinstance(weights, DecoderWeights) else weights
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 1:
        raise ContractError("attention needs at least one point")
    if window < 1:
        raise ContractError("window must be >= 1")
    if F.shape[1] != w.c_in:
        raise ContractError(f"feature width {F.shape[1]} != attention input {w.c_in}")
    span = window * WINDOW_CHUNK
    chunks = [F[i:i + span] for i in range(0, F.shape[0], span)]
    res = parallel.pmap(lambda c: _attend_windows(c, w, window), chunks)
    out = np.concatenate([r[0] for r in res])
    if return_probs:
        return out, [p for r in res for p in r[1]]
    return out


def effective_weight(layer: ModulatedLayer, z: np.ndarray) -> np.ndarray:
    """Modulated then demodulated weight matrix for one style code."""
    wm = layer.weight * layer.scales(z)[None, :]
    return wm * (1.0 / np.sqrt((wm * wm).sum(axis=1) + DEMOD_EPS))[:, None]


def _leaky(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def modulated_mlp(F_P: np.ndarray, F_T: np.ndarray, Z_P: np.ndarray, labels: np.ndarray,
                  weights: DecoderWeights, config: AttributeConfig = AttributeConfig()) -> np.ndarray:
    """Raw attributes from concat(F_P, F_T) through style-modulated layers.

    Each layer scales its inputs by affine(z) and rescales each output by
    the demodulation factor, which equals multiplying by the unit-norm
    effective weight.  Styles are resolved once per label.
    """
    n = F_P.shape[0]
    if F_T.shape[0] != n or Z_P.shape[0] != n or len(labels) != n:
        raise ContractError("row counts of F_P, F_T, Z_P and labels disagree")
    if F_P.shape[1] + F_T.shape[1] != weights.layers[0].weight.shape[1]:
        raise ContractError("input width does not match decoder weights")
    if weights.layers[-1].weight.shape[0] != config.width:
        raise ContractError(f"decoder output width {weights.layers[-1].weight.shape[0]} != C_A {config.width}")
    labels = np.asarray(labels, dtype=np.int64)
    uniq, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    Z_u = np.asarray(Z_P, dtype=np.float64)[first]
    if not np.array_equal(Z_u[inv], Z_P):
        raise ContractError("style codes must agree within each label")
    per_layer = []
    for layer in weights.layers:
        s = layer.scales(Z_u)  # (U, in)
        wsq = layer.weight * layer.weight
        demod = 1.0 / np.sqrt((s * s) @ wsq.T + DEMOD_EPS)  # (U, out)
        per_layer.append((s, demod))

    def run(lo):
        hi = min(lo + POINT_CHUNK, n)
        x = np.concatenate([F_P[lo:hi], F_T[lo:hi]], axis=1).astype(np.float64)
        g = inv[lo:hi]
        for i, (layer, (s, demod)) in enumerate(zip(weights.layers, per_layer)):
            x = ((x * s[g]) @ layer.weight.T) * demod[g] + layer.bias
            if i < len(weights.layers) - 1:
                x = _leaky(x)
        return x

    parts = parallel.pmap(run, range(0, n, POINT_CHUNK))
    if not parts:
        return np.zeros((0, config.width))
    return np.concatenate(parts)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    centers: np.ndarray  # (N, 3) float32
    scales: np.ndarray  # (N, 3) float32
    rotations: np.ndarray  # (N, 4) float32, [w, x, y, z]
    opacities: np.ndarray  # (N,) float32
    colors: np.ndarray  # (N, 3) float32

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    def permuted(self, idx) -> "GaussianSet":
        return GaussianSet(self.centers[idx], self.scales[idx], self.rotations[idx],
                           self.opacities[idx], self.colors[idx])

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3), np.float32), np.zeros((0, 3), np.float32),
                   np.zeros((0, 4), np.float32), np.zeros(0, np.float32),
                   np.zeros((0, 3), np.float32))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def assemble_gaussians(cloud: BevPointCloud, A: np.ndarray,
                       config: AttributeConfig = AttributeConfig()) -> GaussianSet:
    """Squash raw attributes into valid ranges and fill defaults for the rest.

    Defaults: scale 1, rotation [1, 0, 0, 0], opacity 1.
    """
    A = np.asarray(A, dtype=np.float64)
    n = len(cloud)
    if A.shape != (n, config.width):
        raise ContractError(f"raw attributes {A.shape} != ({n}, {config.width})")
    # every squash saturates long before this bound; it keeps softplus finite in f32
    A = np.clip(np.nan_to_num(A, nan=0.0), -RAW_LIMIT, RAW_LIMIT)
    sl = config.slices()
    centers = cloud.coords_abs.astype(np.float64)
    if "offset" in sl:
        centers = centers + OFFSET_LIMIT * np.tanh(A[:, sl["offset"]])
    colors = np.clip(_sigmoid(A[:, sl["rgb"]]), 0.0, 1.0)
    opac = np.clip(_sigmoid(A[:, sl["opacity"]][:, 0]), 0.0, 1.0) if "opacity" in sl else np.ones(n)
    scales = np.logaddexp(0.0, A[:, sl["scale"]]) if "scale" in sl else np.ones((n, 3))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianSet(
        centers=centers.astype(np.float32), scales=scales.astype(np.float32),
        rotations=rot.astype(np.float32), opacities=opac.astype(np.float32),
        colors=colors.astype(np.float32),
    )


def decode(cloud: BevPointCloud, table: StyleTable | np.ndarray, weights: DecoderWeights,
           config: AttributeConfig = AttributeConfig(), method: str = "linear",
           g: float = 0.01, bit_depth: int = 10, window: int = WINDOW, n_pe: int = N_PE,
           orders: list[SerialOrder] | None = None) -> tuple[GaussianSet, np.ndarray]:
    """Full decoder; returns the Gaussians and the raw attribute matrix.

    With several orders (``both``) the attention features of each ordering
    are mapped back to point order and averaged.
    """
    n = len(cloud)
    if n == 0:
        return GaussianSet.empty(), np.zeros((0, config.width))
    F_P = positional_encode(cloud, n_pe)
    if orders is None:
        orders = serialize(cloud.coords_abs, method, g, bit_depth)
    F_T = np.zeros((n, weights.attention.c_out))
    for order in orders:
        out = window_attention(reorder(F_P, order), weights, window)
        F_T[order.perm] += out
    if len(orders) > 1:
        F_T /= len(orders)
    Z_P = style_lookup(table, cloud.labels)
    A = modulated_mlp(F_P, F_T, Z_P, cloud.labels, weights, config)
    return assemble_gaussians(cloud, A, config), A


def save_gaussians(gs: GaussianSet, path) -> None:
    """``BVG1``: u32 count then (center, scale, rotation, opacity, color) f32 records."""
    rec = np.empty(len(gs), dtype=GAUSS_RECORD)
    rec["center"], rec["scale"], rec["rotation"] = gs.centers, gs.scales, gs.rotations
    rec["opacity"], rec["color"] = gs.opacities, gs.colors
    with open(path, "wb") as f:
        f.write(GAUSS_MAGIC)
        f.write(struct.pack("<I", len(gs)))
        f.write(rec.tobytes())


def load_gaussians(path) -> GaussianSet:
    data = Path(path).read_bytes()
    if data[:4] != GAUSS_MAGIC:
        raise ContractError(f"{path}: not a Gaussian container")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + n * GAUSS_RECORD.itemsize:
        raise ContractError(f"{path}: truncated Gaussian container")
    rec = np.frombuffer(data, GAUSS_RECORD, n, 8)
    return GaussianSet(
        centers=rec["center"].astype(np.float32), scales=rec["scale"].astype(np.float32),
        rotations=rec["rotation"].astype(np.float32), opacities=rec["opacity"].astype(np.float32),
        colors=rec["color"].astype(np.float32),
    )


def save_weights(weights: DecoderWeights, path) -> None:
    """Binary dump: ``BVW1``, u32 seed, u32 tensor count, then (ndim, dims..., f64 data) per tensor."""
    tensors = [weights.attention.wq, weights.attention.wk, weights.attention.wv,
               weights.attention.wo]
    for layer in weights.layers:
        tensors += [layer.weight, layer.bias, layer.affine, layer.affine_bias]
    with open(path, "wb") as f:
        f.write(b"BVW1")
        f.write(struct.pack("<III", weights.seed, weights.attention.heads, len(tensors)))
        for t in tensors:
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_weights(path) -> DecoderWeights:
    data = Path(path).read_bytes()
    if data[:4] != b"BVW1":
        raise ContractError(f"{path}: not a weights file")
    seed, heads, count = struct.unpack_from("<III", data, 4)
    off = 16
    tensors = []
    for _ in range(count):
        (nd,) = struct.unpack_from("<I", data, off)
        shape = struct.unpack_from(f"<{nd}I", data, off + 4)
        off += 4 + 4 * nd
        size = int(np.prod(shape))
        tensors.append(np.frombuffer(data, "<f8", size, off).reshape(shape).copy())
        off += 8 * size
    att = AttentionWeights(*tensors[:4], heads=heads)
    rest = tensors[4:]
    layers = [ModulatedLayer(*rest[i:i + 4]) for i in range(0, len(rest), 4)]
    return DecoderWeights(seed=seed, attention=att, layers=layers)
