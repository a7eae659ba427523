"""Pinhole camera model.

OpenCV conventions: camera x right, y down, z forward; pixel ``(u, v)`` has
its center at integer coordinates and covers ``[u-0.5, u+0.5)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass(frozen=True, eq=False)
class CameraModel:
    K: np.ndarray  # (3, 3)
    T: np.ndarray  # (4, 4) world -> camera
    width: int
    height: int
    near: float = 0.1
    far: float = 1000.0

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64).reshape(4, 4))
        self.validate()

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ContractError("degenerate camera: zero-area image")
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("degenerate camera: focal lengths must be positive")
        if not (0 <= self.near < self.far):
            raise ContractError("degenerate camera: need 0 <= near < far")
        R = self.R
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ContractError("extrinsic rotation is not orthonormal with det +1")
        if not np.allclose(self.T[3], [0, 0, 0, 1]):
            raise ContractError("extrinsic bottom row must be [0, 0, 0, 1]")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def to_dict(self) -> dict:
        return {
            "K": [float(v) for v in self.K.ravel()],
            "T": [float(v) for v in self.T.ravel()],
            "width": int(self.width),
            "height": int(self.height),
            "near": float(self.near),
            "far": float(self.far),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            K, T = d["K"], d["T"]
            if len(K) != 9 or len(T) != 16:
                raise ContractError("camera K needs 9 values and T needs 16")
            return cls(K=K, T=T, width=int(d["width"]), height=int(d["height"]),
                       near=float(d["near"]), far=float(d["far"]))
        except KeyError as e:
            raise ContractError(f"camera missing field {e}") from None


def load_camera(path) -> CameraModel:
    return CameraModel.from_dict(json.loads(Path(path).read_text()))


def save_camera(cam: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(cam.to_dict(), indent=2) + "\n")


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def look_at(eye, target, width: int, height: int, fov_deg: float = 60.0,
            near: float = 0.1, far: float = 1000.0, up=(0.0, 0.0, 1.0)) -> CameraModel:
    """Camera at ``eye`` looking at ``target`` with a horizontal field of view."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ eye
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    K = intrinsics(f, f, width / 2, height / 2)
    return CameraModel(K=K, T=T, width=width, height=height, near=near, far=far)


def camera_rays(cam: CameraModel, supersample: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """World-space rays through ``supersample``^2 sub-pixel samples per pixel.

    Directions are scaled so that the ray parameter equals camera depth.
    Rays are ordered row-major by (v, u, sub-row, sub-col).
    """
    if supersample < 1:
        raise ContractError("supersample must be >= 1")
    ss = supersample
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    us = (np.arange(cam.width)[:, None] + sub[None, :]).ravel()
    vs = (np.arange(cam.height)[:, None] + sub[None, :]).ravel()
    # (v, sub_v) outer, (u, sub_u) inner
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    vv = vv.reshape(cam.height, ss, cam.width, ss).transpose(0, 2, 1, 3).ravel()
    uu = uu.reshape(cam.height, ss, cam.width, ss).transpose(0, 2, 1, 3).ravel()
    dx = (uu - cam.cx) / cam.fx
    dy = (vv - cam.cy) / cam.fy
    d_cam = np.stack([dx, dy, np.ones_like(dx)], axis=1)
    dirs = d_cam @ cam.R  # R^T applied to row vectors
    return cam.center, dirs
