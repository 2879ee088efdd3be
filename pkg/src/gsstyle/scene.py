"""Domain types for Gaussian splat scenes, cameras, and float images.

A scene is stored struct-of-arrays (float32, matching the interchange PLY)
so rendering and optimization stay vectorized; ``GaussianPrimitive`` is the
per-element view used for construction and inspection. All math downstream
promotes to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

# Degree-0 spherical harmonic constant; base color = 0.5 + C0 * sh_coeffs[0].
SH_C0 = 0.28209479177387814

_SH_DEGREE_TO_COEFFS = {0: 1, 1: 4, 2: 9, 3: 16}


def logistic(x):
    """Numerically stable logistic: maps opacity logits into (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of :func:`logistic` on (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit-normalize quaternions (..., 4); zero quaternions become identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    safe = np.where(norm > 1e-12, norm, 1.0)
    out = q / safe
    identity = np.zeros_like(out)
    identity[..., 0] = 1.0
    return np.where(norm > 1e-12, out, identity)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from (w, x, y, z) quaternions.

    Quaternions are normalized here; storage stays unnormalized so PLY
    round-trips are bit-exact.
    """
    q = normalize_quaternion(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - z * w)
    m[..., 0, 2] = 2 * (x * z + y * w)
    m[..., 1, 0] = 2 * (x * y + z * w)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - x * w)
    m[..., 2, 0] = 2 * (x * z - y * w)
    m[..., 2, 1] = 2 * (y * z + x * w)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian: center, log-scales, quaternion, opacity logit, SH colors."""

    position: np.ndarray      # (3,)
    log_scale: np.ndarray     # (3,)
    rotation: np.ndarray      # (4,) quaternion (w, x, y, z), stored unnormalized
    opacity_logit: float
    sh_coeffs: np.ndarray     # (B, 3), B in {1, 4, 9, 16}

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float32).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float32).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float32).reshape(4)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float32)
        if self.sh_coeffs.ndim != 2 or self.sh_coeffs.shape[1] != 3:
            raise ValueError(f"sh_coeffs must be (B, 3), got {self.sh_coeffs.shape}")
        if self.sh_coeffs.shape[0] not in _SH_DEGREE_TO_COEFFS.values():
            raise ValueError(f"B must be a perfect square <= 16, got {self.sh_coeffs.shape[0]}")

    @property
    def opacity(self) -> float:
        return float(logistic(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.astype(np.float64))


class GaussianScene:
    """Ordered set of Gaussian primitives with shared SH degree and background.

    Array fields are the single source of truth; the optimizer is the only
    writer (of ``sh_coeffs`` / ``opacity_logits``) and renders only read.
    Index order is identity: gradients are accumulated by primitive index.
    """

    def __init__(
        self,
        positions: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        opacity_logits: np.ndarray,
        sh_coeffs: np.ndarray,
        sh_degree: int,
        background_color: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        if sh_degree not in _SH_DEGREE_TO_COEFFS:
            raise ValueError(f"sh_degree must be 0..3, got {sh_degree}")
        n = len(positions)
        self.positions = np.asarray(positions, dtype=np.float32).reshape(n, 3)
        self.log_scales = np.asarray(log_scales, dtype=np.float32).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float32).reshape(n, 4)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float32).reshape(n)
        self.sh_coeffs = np.asarray(sh_coeffs, dtype=np.float32)
        self.sh_degree = int(sh_degree)
        b = _SH_DEGREE_TO_COEFFS[self.sh_degree]
        if self.sh_coeffs.shape != (n, b, 3):
            raise ValueError(
                f"sh_coeffs shape {self.sh_coeffs.shape} does not match "
                f"{n} primitives at sh_degree {sh_degree} (expected {(n, b, 3)})"
            )
        self.background_color = np.asarray(background_color, dtype=np.float32).reshape(3)
        if np.any(self.background_color < 0) or np.any(self.background_color > 1):
            raise ValueError("background_color must lie in [0, 1]")

    @classmethod
    def from_primitives(
        cls,
        primitives: Sequence[GaussianPrimitive],
        background_color: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> "GaussianScene":
        if not primitives:
            raise ValueError("scene must contain at least one primitive")
        b = primitives[0].sh_coeffs.shape[0]
        for i, p in enumerate(primitives):
            if p.sh_coeffs.shape[0] != b:
                raise ValueError(f"primitive {i} has {p.sh_coeffs.shape[0]} SH rows, expected {b}")
        degree = {v: k for k, v in _SH_DEGREE_TO_COEFFS.items()}[b]
        return cls(
            positions=np.stack([p.position for p in primitives]),
            log_scales=np.stack([p.log_scale for p in primitives]),
            rotations=np.stack([p.rotation for p in primitives]),
            opacity_logits=np.array([p.opacity_logit for p in primitives], dtype=np.float32),
            sh_coeffs=np.stack([p.sh_coeffs for p in primitives]),
            sh_degree=degree,
            background_color=background_color,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i],
        )

    @property
    def primitives(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self.primitive(i)

    @property
    def num_sh_coeffs(self) -> int:
        return self.sh_coeffs.shape[1]

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(),
            sh_degree=self.sh_degree,
            background_color=self.background_color.copy(),
        )


@dataclass
class CameraView:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera transform.

    Convention: right-handed, camera looks down +z; pixel (row r, col c) has
    center (c + 0.5, r + 0.5). Mismatched third-party scenes need an
    axis-flip at dataset load.
    """

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) row-major rigid transform
    image_path: str | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"view {self.id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"view {self.id}: principal point outside image")
        r = self.world_to_camera[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise ValueError(f"view {self.id}: rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam_points(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into camera coordinates."""
        return points @ self.rotation.T + self.translation


@dataclass
class ImageBuffer:
    """Row-major H x W x C float raster, nominal range [0, 1]."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"image data must be HxWxC, got shape {self.data.shape}")
        if self.data.shape[2] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.data.shape[2]}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 3) -> "ImageBuffer":
        return cls(np.zeros((height, width, channels), dtype=np.float64))

    @classmethod
    def full(cls, height: int, width: int, value, channels: int = 3) -> "ImageBuffer":
        data = np.empty((height, width, channels), dtype=np.float64)
        data[:] = value
        return cls(data)

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data.copy())
