"""Camera, render options and gradient containers for the splat rasterizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument

# Images are plain (H, W, 3) float arrays with channels in [0, 1].
ImageBuffer = np.ndarray


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: 3x3 intrinsics, 4x4 world-to-camera extrinsics."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        p = np.asarray(self.extrinsics, dtype=np.float64)
        if k.shape != (3, 3):
            raise InvalidArgument(f"intrinsics must be 3x3, got {k.shape}")
        if p.shape != (4, 4):
            raise InvalidArgument(f"extrinsics must be 4x4, got {p.shape}")
        r = p[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-6:
            raise InvalidArgument("extrinsic rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise InvalidArgument("extrinsic rotation must have det +1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise InvalidArgument("focal lengths must be positive")
        if not self.near > 0:
            raise InvalidArgument("near plane must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", p)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:3, 3]

    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class RenderOptions:
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    transmittance_floor: float = 1e-4
    alpha_clamp_max: float = 0.999
    lowpass_sigma: float = 0.7  # pixels
    tile_size: int = 16

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(bg < 0) or np.any(bg > 1):
            raise InvalidArgument("background rgb must lie in [0,1]")
        if not (0.0 < self.alpha_clamp_max < 1.0):
            raise InvalidArgument("alpha_clamp_max must lie in (0,1)")
        if not (0.0 < self.transmittance_floor < 0.1):
            raise InvalidArgument("transmittance_floor must lie in (0, 0.1)")
        if self.lowpass_sigma <= 0:
            raise InvalidArgument("lowpass_sigma must be positive")
        if self.tile_size < 1:
            raise InvalidArgument("tile_size must be >= 1")
        object.__setattr__(self, "background", bg)


@dataclass
class GaussianGradients:
    """Partials of a scalar image loss w.r.t. every splat parameter."""

    position: np.ndarray   # (M, 3)
    scale: np.ndarray      # (M, 2)
    opacity: np.ndarray    # (M,)
    sh_colors: np.ndarray  # (M, 27)
    normal: np.ndarray     # (M, 3)
    angle: np.ndarray      # (M,)

    @staticmethod
    def zeros(m: int, dtype=np.float64) -> "GaussianGradients":
        return GaussianGradients(
            position=np.zeros((m, 3), dtype=dtype),
            scale=np.zeros((m, 2), dtype=dtype),
            opacity=np.zeros(m, dtype=dtype),
            sh_colors=np.zeros((m, 27), dtype=dtype),
            normal=np.zeros((m, 3), dtype=dtype),
            angle=np.zeros(m, dtype=dtype),
        )

    def scaled(self, factor: float) -> "GaussianGradients":
        return GaussianGradients(
            self.position * factor,
            self.scale * factor,
            self.opacity * factor,
            self.sh_colors * factor,
            self.normal * factor,
            self.angle * factor,
        )

    def add_(self, other: "GaussianGradients") -> "GaussianGradients":
        self.position += other.position
        self.scale += other.scale
        self.opacity += other.opacity
        self.sh_colors += other.sh_colors
        self.normal += other.normal
        self.angle += other.angle
        return self

    def finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (
                self.position,
                self.scale,
                self.opacity,
                self.sh_colors,
                self.normal,
                self.angle,
            )
        )
