"""Point serialization: linear grid keys and a 3D Hilbert curve."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

KEY_LIMIT = float(2 ** 63 - 1024)
METHODS = ("linear", "hilbert", "both")


@dataclass(frozen=True, eq=False)
class SerialOrder:
    method: str
    grid: float  # grid size g (linear) or bit depth (hilbert)
    perm: np.ndarray  # int64, output position -> input row
    keys: np.ndarray  # int64, per input point

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv


def linear_keys(coords: np.ndarray, g: float) -> np.ndarray:
    """floor(x / g^2 + y / g + z) per point.

    x / g^2 is evaluated as (x / g) / g: squaring a decimal g such as 0.1
    rounds up and would push exact integer keys just below the boundary.
    """
    if not g > 0:
        raise ContractError("grid size g must be positive")
    c = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ContractError("coordinates must be finite")
    val = c[:, 0] / g / g + c[:, 1] / g + c[:, 2]
    if val.size and np.abs(val).max() >= KEY_LIMIT:
        amax = float(np.abs(c).max())
        g_min = np.sqrt(3 * amax / KEY_LIMIT)
        raise ContractError(f"serialization key overflows int64; use g >= {g_min:.3g}")
    return np.floor(val).astype(np.int64)


def serialize_linear(coords: np.ndarray, g: float = 0.01) -> SerialOrder:
    keys = linear_keys(coords, g)
    return SerialOrder("linear", float(g), np.argsort(keys, kind="stable"), keys)


def _check_bits(b: int) -> None:
    if not 1 <= b <= 20:
        raise ContractError("Hilbert bit depth must be in 1..20")


def hilbert_encode(cells: np.ndarray, b: int) -> np.ndarray:
    """Hilbert index of integer cells in [0, 2^b)^3 (Skilling's transpose method)."""
    _check_bits(b)
    X = [np.asarray(cells[:, i], dtype=np.int64).copy() for i in range(3)]
    M = 1 << (b - 1)
    Q = M
    while Q > 1:
        P = Q - 1
        for i in range(3):
            hit = (X[i] & Q) != 0
            X[0] = np.where(hit, X[0] ^ P, X[0])
            t = np.where(hit, 0, (X[0] ^ X[i]) & P)
            X[0] ^= t
            X[i] ^= t
        Q >>= 1
    for i in range(1, 3):
        X[i] ^= X[i - 1]
    t = np.zeros_like(X[0])
    Q = M
    while Q > 1:
        t = np.where((X[2] & Q) != 0, t ^ (Q - 1), t)
        Q >>= 1
    for i in range(3):
        X[i] ^= t
    h = np.zeros_like(X[0])
    for j in range(b - 1, -1, -1):
        for i in range(3):
            h = (h << 1) | ((X[i] >> j) & 1)
    return h


def hilbert_decode(h: np.ndarray, b: int) -> np.ndarray:
    """Inverse of :func:`hilbert_encode`."""
    _check_bits(b)
    h = np.asarray(h, dtype=np.int64)
    X = [np.zeros_like(h) for _ in range(3)]
    bit = 3 * b - 1
    for j in range(b - 1, -1, -1):
        for i in range(3):
            X[i] |= ((h >> bit) & 1) << j
            bit -= 1
    N = 2 << (b - 1)
    t = X[2] >> 1
    for i in range(2, 0, -1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    Q = 2
    while Q != N:
        P = Q - 1
        for i in range(2, -1, -1):
            hit = (X[i] & Q) != 0
            X[0] = np.where(hit, X[0] ^ P, X[0])
            t = np.where(hit, 0, (X[0] ^ X[i]) & P)
            X[0] ^= t
            X[i] ^= t
        Q <<= 1
    return np.stack(X, axis=1)


def quantize(coords: np.ndarray, b: int) -> np.ndarray:
    """Min-max scale into [0, 2^b)^3 with one scale for all axes."""
    c = np.asarray(coords, dtype=np.float64)
    if len(c) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    lo = c.min(axis=0)
    span = float((c.max(axis=0) - lo).max())
    n = 1 << b
    if span == 0:
        return np.zeros(c.shape, dtype=np.int64)
    q = np.floor((c - lo) / span * n).astype(np.int64)
    return np.clip(q, 0, n - 1)


def serialize_hilbert(coords: np.ndarray, bit_depth: int = 10) -> SerialOrder:
    _check_bits(bit_depth)
    keys = hilbert_encode(quantize(coords, bit_depth), bit_depth)
    return SerialOrder("hilbert", float(bit_depth), np.argsort(keys, kind="stable"), keys)


def serialize(coords: np.ndarray, method: str = "linear", g: float = 0.01,
              bit_depth: int = 10) -> list[SerialOrder]:
    """Orders for ``method``; ``both`` yields the linear then the Hilbert order."""
    if method == "linear":
        return [serialize_linear(coords, g)]
    if method == "hilbert":
        return [serialize_hilbert(coords, bit_depth)]
    if method == "both":
        return [serialize_linear(coords, g), serialize_hilbert(coords, bit_depth)]
    raise ContractError(f"unknown serialization method {method!r}")


def reorder(F: np.ndarray, order: SerialOrder) -> np.ndarray:
    """Row i of the result is row ``perm[i]`` of ``F``."""
    F = np.asarray(F)
    if F.shape[0] != order.perm.size:
        raise ContractError(f"row count {F.shape[0]} != permutation length {order.perm.size}")
    return F[order.perm]


def save_perm(order: SerialOrder, path) -> None:
    """Little-endian u32 array of the permutation."""
    with open(path, "wb") as f:
        f.write(order.perm.astype("<u4").tobytes())


def load_perm(path) -> np.ndarray:
    return np.fromfile(path, dtype="<u4").astype(np.int64)
