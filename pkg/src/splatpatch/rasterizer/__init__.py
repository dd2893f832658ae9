"""Differentiable CPU splatting of 2D Gaussian surfel sets.

Forward: ray-plane intersection in object space, Gaussian falloff in the
tangent frame, front-to-back alpha compositing over a global center-depth
sort, tile-parallel. Backward: exact reverse-mode partials for every splat
parameter, accumulated per tile and reduced in fixed tile order so results
are independent of the worker count. Precision follows the dtype of the
input set (float32 for speed, float64 for gradient checks).
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument, NonFiniteInput
from ..gaussians import Gaussian2DSet, frames_backward, frames_from_normals_angles, sh_basis
from . import kernels
from .types import Camera, GaussianGradients, ImageBuffer, RenderOptions

__all__ = [
    "Camera",
    "RenderOptions",
    "GaussianGradients",
    "ImageBuffer",
    "render",
    "render_backward",
    "project_center",
]

_R2_CUTOFF = 50.0    # exp(-25) ~ 1.4e-11, below any gradient tolerance
_DN_EPS = 1e-8
_ALPHA_MIN = 1e-12


def project_center(cam: Camera, x: np.ndarray):
    """Pinhole projection of one world point: ((u, v), camera depth)."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    xc = cam.rotation @ x + cam.translation
    depth = xc[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.array(
            [cam.fx * xc[0] / depth + cam.cx, cam.fy * xc[1] / depth + cam.cy]
        )
    return uv, float(depth)


def _check_finite(g: Gaussian2DSet):
    for name in ("positions", "scales", "opacities", "sh_colors", "normals", "angles"):
        if not np.all(np.isfinite(getattr(g, name))):
            raise NonFiniteInput(f"non-finite values in gaussian {name}")


def _params_vector(opts: RenderOptions, dtype) -> np.ndarray:
    p = np.empty(kernels.N_PARAMS, dtype=dtype)
    p[kernels.P_FLOOR] = opts.transmittance_floor
    p[kernels.P_CLAMP] = opts.alpha_clamp_max
    p[kernels.P_INV2SIG2] = 1.0 / (2.0 * opts.lowpass_sigma**2)
    p[kernels.P_R2CUT] = _R2_CUTOFF
    p[kernels.P_DNEPS] = _DN_EPS
    p[kernels.P_ONE] = 1.0
    p[kernels.P_HALF] = 0.5
    p[kernels.P_ALPHAMIN] = _ALPHA_MIN
    return p


def _pixel_rays(cam: Camera, dtype):
    """World-space ray directions through pixel centers plus their SH basis."""
    xs = (np.arange(cam.width, dtype=np.float64) + 0.5 - cam.cx) / cam.fx
    ys = (np.arange(cam.height, dtype=np.float64) + 0.5 - cam.cy) / cam.fy
    dirs_cam = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    dirs_cam[..., 0] = xs[None, :]
    dirs_cam[..., 1] = ys[:, None]
    dirs_cam[..., 2] = 1.0
    dirs_world = dirs_cam @ cam.rotation  # row-vector form of R^T d
    unit = dirs_world / np.linalg.norm(dirs_world, axis=2, keepdims=True)
    return (
        np.ascontiguousarray(dirs_world.astype(dtype)),
        np.ascontiguousarray(sh_basis(unit).astype(dtype)),
    )


class _Prepared:
    """Culled, depth-sorted, tile-binned splat arrays for one (set, camera)."""

    __slots__ = (
        "order", "pos", "su", "sv", "opa", "tu", "tv", "nh", "sh",
        "ucs", "vcs", "lp_active", "offsets", "entries", "ntx", "nty",
        "origin", "dirs", "shb", "params", "bg", "x_cam",
    )

    def __init__(self, g: Gaussian2DSet, cam: Camera, opts: RenderOptions, dtype):
        rot = cam.rotation
        x_cam = g.positions.astype(np.float64) @ rot.T + cam.translation
        depth = x_cam[:, 2]
        visible = depth > cam.near
        u = np.full(len(g), np.inf)
        v = np.full(len(g), np.inf)
        dz = np.where(visible, depth, 1.0)
        u[visible] = (cam.fx * x_cam[:, 0] / dz + cam.cx)[visible]
        v[visible] = (cam.fy * x_cam[:, 1] / dz + cam.cy)[visible]
        diag = np.hypot(cam.width, cam.height)
        off_center = np.hypot(u - cam.width / 2.0, v - cam.height / 2.0)
        visible &= off_center <= 1.5 * diag

        idx = np.flatnonzero(visible)
        order = idx[np.argsort(depth[idx], kind="stable")]
        self.order = order
        self.x_cam = x_cam[order]

        t_u, t_v, n_hat = frames_from_normals_angles(
            g.normals[order], g.angles[order]
        )
        self.pos = np.ascontiguousarray(g.positions[order].astype(dtype))
        self.su = np.ascontiguousarray(g.scales[order, 0].astype(dtype))
        self.sv = np.ascontiguousarray(g.scales[order, 1].astype(dtype))
        self.opa = np.ascontiguousarray(g.opacities[order].astype(dtype))
        self.tu = np.ascontiguousarray(t_u.astype(dtype))
        self.tv = np.ascontiguousarray(t_v.astype(dtype))
        self.nh = np.ascontiguousarray(n_hat.astype(dtype))
        self.sh = np.ascontiguousarray(g.sh_colors[order].astype(dtype))
        self.ucs = np.ascontiguousarray(u[order].astype(dtype))
        self.vcs = np.ascontiguousarray(v[order].astype(dtype))

        maxf = max(cam.fx, cam.fy)
        footprint_px = (
            np.maximum(g.scales[order, 0], g.scales[order, 1]) * maxf / depth[order]
        )
        lp = footprint_px < 1.0
        self.lp_active = lp.astype(np.uint8)
        radius = 3.0 * footprint_px + 0.5
        radius[lp] = np.maximum(radius[lp], 3.0 * opts.lowpass_sigma + 0.5)

        self.ntx = (cam.width + opts.tile_size - 1) // opts.tile_size
        self.nty = (cam.height + opts.tile_size - 1) // opts.tile_size
        self.offsets, self.entries = kernels.bin_tiles(
            u[order], v[order], radius,
            float(cam.width), float(cam.height),
            opts.tile_size, self.ntx, self.nty,
        )
        self.origin = np.ascontiguousarray(cam.center().astype(dtype))
        self.dirs, self.shb = _pixel_rays(cam, dtype)
        self.params = _params_vector(opts, dtype)
        self.bg = np.ascontiguousarray(opts.background.astype(dtype))


def render(
    g: Gaussian2DSet, cam: Camera, opts: RenderOptions | None = None
) -> ImageBuffer:
    """Composite the set through the camera; returns an (H, W, 3) image."""
    opts = opts or RenderOptions()
    if g.space_tag != "world":
        raise InvalidArgument("render expects a world-space set")
    _check_finite(g)
    dtype = g.dtype if g.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.dtype(np.float64)
    out = np.empty((cam.height, cam.width, 3), dtype=dtype)
    if len(g) == 0:
        out[:] = opts.background.astype(dtype)
        return out
    prep = _Prepared(g, cam, opts, dtype)
    if prep.order.size == 0:
        out[:] = opts.background.astype(dtype)
        return out
    kernels.forward_kernel(
        cam.width, cam.height, opts.tile_size, prep.ntx, prep.nty,
        prep.offsets, prep.entries,
        prep.origin, prep.dirs, prep.shb,
        prep.pos, prep.su, prep.sv, prep.opa, prep.tu, prep.tv, prep.nh,
        prep.sh, prep.ucs, prep.vcs, prep.lp_active,
        prep.bg, prep.params, out,
    )
    return out


def render_backward(
    g: Gaussian2DSet,
    cam: Camera,
    opts: RenderOptions | None,
    dL_dimage: np.ndarray,
) -> GaussianGradients:
    """Partials of L = sum(dL_dimage * image) w.r.t. every splat parameter.

    Stateless: re-runs the forward bookkeeping internally. Splats culled or
    behind the early-stop point receive zero gradient.
    """
    opts = opts or RenderOptions()
    if g.space_tag != "world":
        raise InvalidArgument("render_backward expects a world-space set")
    _check_finite(g)
    dL = np.asarray(dL_dimage)
    if dL.shape != (cam.height, cam.width, 3):
        raise InvalidArgument(
            f"dL_dimage shape {dL.shape} does not match camera "
            f"({cam.height}, {cam.width}, 3)"
        )
    grads = GaussianGradients.zeros(len(g), dtype=g.dtype)
    if len(g) == 0:
        return grads
    dtype = g.dtype if g.dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.dtype(np.float64)
    prep = _Prepared(g, cam, opts, dtype)
    s = prep.order.size
    if s == 0:
        return grads
    gbuf = np.zeros((prep.entries.shape[0], kernels.N_GRAD), dtype=dtype)
    kernels.backward_kernel(
        cam.width, cam.height, opts.tile_size, prep.ntx, prep.nty,
        prep.offsets, prep.entries,
        prep.origin, prep.dirs, prep.shb,
        prep.pos, prep.su, prep.sv, prep.opa, prep.tu, prep.tv, prep.nh,
        prep.sh, prep.ucs, prep.vcs, prep.lp_active,
        prep.bg, prep.params, np.ascontiguousarray(dL.astype(dtype)), gbuf,
    )
    # fixed-order reduction: entries are laid out tile by tile
    slot = np.zeros((s, kernels.N_GRAD), dtype=np.float64)
    np.add.at(slot, prep.entries, gbuf.astype(np.float64))

    d_pos = slot[:, kernels.G_POS : kernels.G_POS + 3]
    # low-pass branch reached the projected center: chain through projection
    duv = slot[:, kernels.G_UC : kernels.G_UC + 2]
    if np.any(duv):
        xc = prep.x_cam
        z = xc[:, 2]
        dxc = np.zeros_like(xc)
        dxc[:, 0] = duv[:, 0] * cam.fx / z
        dxc[:, 1] = duv[:, 1] * cam.fy / z
        dxc[:, 2] = -(
            duv[:, 0] * cam.fx * xc[:, 0] + duv[:, 1] * cam.fy * xc[:, 1]
        ) / (z * z)
        d_pos = d_pos + dxc @ cam.rotation

    d_normal, d_angle = frames_backward(
        g.normals[prep.order],
        g.angles[prep.order],
        slot[:, kernels.G_TU : kernels.G_TU + 3],
        slot[:, kernels.G_TV : kernels.G_TV + 3],
        slot[:, kernels.G_NH : kernels.G_NH + 3],
    )

    grads.position[prep.order] = d_pos.astype(g.dtype)
    grads.scale[prep.order, 0] = slot[:, kernels.G_SU].astype(g.dtype)
    grads.scale[prep.order, 1] = slot[:, kernels.G_SV].astype(g.dtype)
    grads.opacity[prep.order] = slot[:, kernels.G_OPA].astype(g.dtype)
    grads.sh_colors[prep.order] = slot[:, kernels.G_SH : kernels.G_SH + 27].astype(g.dtype)
    grads.normal[prep.order] = d_normal.astype(g.dtype)
    grads.angle[prep.order] = d_angle.astype(g.dtype)
    return grads
