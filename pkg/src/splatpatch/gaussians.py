"""2D Gaussian surfel set: initialization, orientation handling, SH color."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidState, MissingNormals
from .geometry import NormalizationTransform, PointCloud

# Real spherical harmonics constants, degree <= 2 (graphics convention).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_DIM = 27  # 9 coefficients per rgb channel
_DC_IDX = (0, 9, 18)


@dataclass
class Gaussian2DSet:
    """Parallel arrays of M oriented elliptical splats.

    sh_colors rows are [r0..r8, g0..g8, b0..b8]; index 0 of each channel is
    the view-independent DC term. space_tag records whether positions/scales
    live in normalized [-1,1] units or world units.
    """

    positions: np.ndarray   # (M, 3)
    scales: np.ndarray      # (M, 2) strictly positive
    opacities: np.ndarray   # (M,) in [0, 1]
    sh_colors: np.ndarray   # (M, 27)
    normals: np.ndarray     # (M, 3) unit
    angles: np.ndarray      # (M,) radians, unwrapped
    space_tag: str = "normalized"

    def __post_init__(self):
        m = self.positions.shape[0]
        shapes = {
            "positions": (m, 3),
            "scales": (m, 2),
            "opacities": (m,),
            "sh_colors": (m, SH_DIM),
            "normals": (m, 3),
            "angles": (m,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise InvalidArgument(f"{name} has shape {got}, expected {want}")
        if self.space_tag not in ("normalized", "world"):
            raise InvalidArgument(f"unknown space_tag {self.space_tag!r}")
        if m > 0:
            if np.any(self.scales <= 0.0):
                raise InvalidArgument("scales must be strictly positive")
            if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
                raise InvalidArgument("opacities must lie in [0,1]")
            lens = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lens - 1.0) > 1e-6):
                raise InvalidArgument("normals must be unit length within 1e-6")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def take(self, rows) -> "Gaussian2DSet":
        return Gaussian2DSet(
            self.positions[rows],
            self.scales[rows],
            self.opacities[rows],
            self.sh_colors[rows],
            self.normals[rows],
            self.angles[rows],
            self.space_tag,
        )

    def astype(self, dtype) -> "Gaussian2DSet":
        return Gaussian2DSet(
            self.positions.astype(dtype),
            self.scales.astype(dtype),
            self.opacities.astype(dtype),
            self.sh_colors.astype(dtype),
            self.normals.astype(dtype),
            self.angles.astype(dtype),
            self.space_tag,
        )

    def copy(self) -> "Gaussian2DSet":
        return self.take(slice(None))

    @staticmethod
    def empty(space_tag: str = "normalized", dtype=np.float64) -> "Gaussian2DSet":
        z = lambda *s: np.zeros(s, dtype=dtype)
        return Gaussian2DSet(z(0, 3), z(0, 2), z(0), z(0, SH_DIM), z(0, 3), z(0), space_tag)


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z)."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if abs(n - 1.0) > 1e-9:
            raise InvalidArgument(f"quaternion norm {n} not unit within 1e-9")

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass(frozen=True)
class SplatFrame:
    """Orthonormal tangent frame of one splat: n = t_u x t_v."""

    t_u: np.ndarray
    t_v: np.ndarray
    n: np.ndarray


def dc_from_rgb(colors: np.ndarray) -> np.ndarray:
    """DC SH coefficient whose view-independent evaluation reproduces rgb."""
    return (np.asarray(colors) - 0.5) / SH_C0


def initialize_gaussians(
    normalized_cloud: PointCloud, min_dists: np.ndarray
) -> Gaussian2DSet:
    """One splat per normalized point: isotropic disk of the nearest-neighbor
    distance, full opacity, zero rotation angle, DC-only color."""
    if normalized_cloud.normals is None:
        raise MissingNormals("initialization requires estimated normals")
    min_dists = np.asarray(min_dists, dtype=np.float64)
    if min_dists.shape != (len(normalized_cloud),):
        raise InvalidArgument("min_dists length must match cloud size")
    if np.any(min_dists <= 0.0):
        raise InvalidArgument("min_dists must be strictly positive")
    n = len(normalized_cloud)
    sh = np.zeros((n, SH_DIM), dtype=np.float64)
    sh[:, _DC_IDX] = dc_from_rgb(normalized_cloud.colors)
    return Gaussian2DSet(
        positions=normalized_cloud.positions.copy(),
        scales=np.stack([min_dists, min_dists], axis=1),
        opacities=np.ones(n, dtype=np.float64),
        sh_colors=sh,
        normals=normalized_cloud.normals.copy(),
        angles=np.zeros(n, dtype=np.float64),
        space_tag="normalized",
    )


def _matrix_to_quaternion(m: np.ndarray) -> Quaternion:
    # Shepperd-style branch on the largest diagonal term for stability.
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    return Quaternion(*q)


def _align_z_matrix(n: np.ndarray) -> np.ndarray:
    """Rotation taking (0,0,1) onto unit n, about the axis (0,0,1) x n."""
    nx, ny, nz = n
    if 1.0 + nz < 1e-8:
        # antiparallel: fixed 180 degree rotation about (1,0,0)
        return np.diag([1.0, -1.0, -1.0])
    w = 1.0 / (1.0 + nz)
    return np.array(
        [
            [1.0 - nx * nx * w, -nx * ny * w, nx],
            [-nx * ny * w, 1.0 - ny * ny * w, ny],
            [-nx, -ny, nz],
        ]
    )


def normal_angle_to_quaternion(n: np.ndarray, alpha: float) -> Quaternion:
    """Quaternion of the rotation taking the z-axis onto n, then spinning by
    alpha about n. Built as rotation matrices and converted."""
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        raise InvalidArgument("zero-length normal")
    if abs(norm - 1.0) > 1e-6:
        raise InvalidArgument(f"normal must be unit within 1e-6, |n|={norm}")
    n = n / norm
    alpha = float(alpha) % (2.0 * np.pi)
    ca, sa = np.cos(alpha), np.sin(alpha)
    rot_z = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    m = _align_z_matrix(n) @ rot_z
    return _matrix_to_quaternion(m)


def quaternion_to_frame(q: Quaternion) -> SplatFrame:
    """Images of the standard basis under q: columns of its rotation matrix."""
    m = q.rotation_matrix()
    return SplatFrame(t_u=m[:, 0].copy(), t_v=m[:, 1].copy(), n=m[:, 2].copy())


def frames_from_normals_angles(normals: np.ndarray, angles: np.ndarray):
    """Vectorized tangent frames for M splats.

    Normals are normalized defensively; returns (t_u, t_v, n_hat), each (M,3).
    Identical to the quaternion path but in closed form.
    """
    normals = np.asarray(normals, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(lens < 1e-12):
        raise InvalidArgument("zero-length normal in frame construction")
    nh = normals / lens
    nx, ny, nz = nh[:, 0], nh[:, 1], nh[:, 2]
    u = np.empty_like(nh)
    v = np.empty_like(nh)
    flip = 1.0 + nz < 1e-8
    reg = ~flip
    w = np.zeros_like(nz)
    w[reg] = 1.0 / (1.0 + nz[reg])
    u[:, 0] = 1.0 - nx * nx * w
    u[:, 1] = -nx * ny * w
    u[:, 2] = -nx
    v[:, 0] = -nx * ny * w
    v[:, 1] = 1.0 - ny * ny * w
    v[:, 2] = -ny
    if np.any(flip):
        u[flip] = (1.0, 0.0, 0.0)
        v[flip] = (0.0, -1.0, 0.0)
    ca = np.cos(angles)[:, None]
    sa = np.sin(angles)[:, None]
    t_u = ca * u + sa * v
    t_v = -sa * u + ca * v
    return t_u, t_v, nh


def frames_backward(
    normals: np.ndarray,
    angles: np.ndarray,
    d_tu: np.ndarray,
    d_tv: np.ndarray,
    d_nhat: np.ndarray,
):
    """Chain gradients on the frame vectors back to raw (normal, angle).

    d_nhat carries any gradient that reached the unit normal directly (e.g.
    through the splat plane equation); the t_u/t_v dependency on the normal is
    added here. Returns (d_normal, d_angle).
    """
    normals = np.asarray(normals, dtype=np.float64)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    nh = normals / lens
    nx, ny, nz = nh[:, 0], nh[:, 1], nh[:, 2]
    flip = 1.0 + nz < 1e-8
    w = np.where(flip, 0.0, 1.0 / np.where(flip, 1.0, 1.0 + nz))
    u = np.stack([1.0 - nx * nx * w, -nx * ny * w, -nx], axis=1)
    v = np.stack([-nx * ny * w, 1.0 - ny * ny * w, -ny], axis=1)
    if np.any(flip):
        u[flip] = (1.0, 0.0, 0.0)
        v[flip] = (0.0, -1.0, 0.0)
    ca = np.cos(angles)[:, None]
    sa = np.sin(angles)[:, None]
    t_u = ca * u + sa * v
    t_v = -sa * u + ca * v

    d_angle = np.einsum("mi,mi->m", d_tu, t_v) - np.einsum("mi,mi->m", d_tv, t_u)
    du = ca * d_tu - sa * d_tv
    dv = sa * d_tu + ca * d_tv

    w2 = w * w
    dn = np.array(d_nhat, dtype=np.float64, copy=True)
    # transpose-Jacobian of u(n_hat) and v(n_hat); zero on the flipped branch
    dn[:, 0] += du[:, 0] * (-2 * nx * w) + du[:, 1] * (-ny * w) + du[:, 2] * (-1.0)
    dn[:, 1] += du[:, 1] * (-nx * w)
    dn[:, 2] += du[:, 0] * (nx * nx * w2) + du[:, 1] * (nx * ny * w2)
    dn[:, 0] += dv[:, 0] * (-ny * w)
    dn[:, 1] += dv[:, 0] * (-nx * w) + dv[:, 1] * (-2 * ny * w) + dv[:, 2] * (-1.0)
    dn[:, 2] += dv[:, 0] * (nx * ny * w2) + dv[:, 1] * (ny * ny * w2)
    if np.any(flip):
        dn[flip] = d_nhat[flip]

    # through the defensive normalization n_hat = n / |n|
    proj = np.einsum("mi,mi->m", dn, nh)[:, None]
    d_normal = (dn - proj * nh) / lens
    return d_normal, d_angle


def denormalize_gaussians(
    g: Gaussian2DSet, t: NormalizationTransform
) -> Gaussian2DSet:
    """Map a normalized-space set into world units: x*s + c, scales*s."""
    if g.space_tag != "normalized":
        raise InvalidState("set is already in world space")
    out = g.copy()
    out.positions = g.positions * t.scale + np.asarray(t.center, dtype=g.positions.dtype)
    out.scales = g.scales * t.scale
    out.space_tag = "world"
    return out


def merge_sets(a: Gaussian2DSet, b: Gaussian2DSet) -> Gaussian2DSet:
    """Concatenate two sets, a first; both must live in the same space."""
    if a.space_tag != b.space_tag:
        raise InvalidState(
            f"cannot merge space_tag {a.space_tag!r} with {b.space_tag!r}"
        )
    return Gaussian2DSet(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.scales, b.scales]),
        np.concatenate([a.opacities, b.opacities]),
        np.concatenate([a.sh_colors, b.sh_colors]),
        np.concatenate([a.normals, b.normals]),
        np.concatenate([a.angles, b.angles]),
        a.space_tag,
    )


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-2 real SH basis values for unit directions; shape (..., 9)."""
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (9,), dtype=dirs.dtype)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (x * x - y * y)
    return out


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Evaluate 27 SH coefficients along a unit direction: rgb in [0,1]."""
    coeffs = np.asarray(coeffs)
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise InvalidArgument("direction must be unit length")
    basis = sh_basis(direction)
    per_channel = coeffs.reshape(coeffs.shape[:-1] + (3, 9))
    rgb = per_channel @ basis + 0.5
    return np.clip(rgb, 0.0, 1.0)
