"""Finite-difference verification of every analytic gradient path.

Shared by the `gradcheck` CLI subcommand and the acceptance suite. All checks
run in double precision. Scene generators keep parameters away from the
non-smooth points (alpha clamp, grazing incidence, tile-binning boundaries,
depth-order ties), which the analytic gradients deliberately treat as
constant-branch regions.
"""

from __future__ import annotations

import numpy as np

from .gaussians import Gaussian2DSet, dc_from_rgb
from .geometry import PointCloud, build_index
from .metrics import combined_loss, mse, ssim
from .network import backward_from_cache, forward_with_cache, make_module_params, named_params
from .pipeline import prepare_cloud
from .rasterizer import Camera, RenderOptions, render, render_backward
from .gaussians import denormalize_gaussians

REL_TOL = 1e-3
ABS_TOL = 1e-6


def _report(name, worst_rel, worst_abs, n_checked, n_failed, extras=None):
    out = {
        "module": name,
        "checked": int(n_checked),
        "failed": int(n_failed),
        "worst_rel": float(worst_rel),
        "worst_abs": float(worst_abs),
        "passed": n_failed == 0,
    }
    if extras:
        out.update(extras)
    return out


class _Tally:
    def __init__(self, rel_tol=REL_TOL, abs_tol=ABS_TOL):
        self.rel_tol = rel_tol
        self.abs_tol = abs_tol
        self.worst_rel = 0.0
        self.worst_abs = 0.0
        self.checked = 0
        self.failed = 0

    def add(self, fd, an):
        self.checked += 1
        err = abs(fd - an)
        scale = max(abs(fd), abs(an))
        rel = err / scale if scale > 0 else 0.0
        if err > max(self.rel_tol * scale, self.abs_tol):
            self.failed += 1
            self.worst_rel = max(self.worst_rel, rel)
            self.worst_abs = max(self.worst_abs, err)


def random_splat_scene(rng, n_splats: int, image_size: int = 12):
    """A gradient-friendly random scene: on-screen splats, separated depths,
    opacities below clamp, normals away from grazing."""
    depths = 1.5 + np.arange(n_splats) * 0.4 + rng.uniform(0.0, 0.15, n_splats)
    rng.shuffle(depths)
    pos = np.stack(
        [
            rng.uniform(-0.4, 0.4, n_splats) * depths,
            rng.uniform(-0.4, 0.4, n_splats) * depths,
            depths,
        ],
        axis=1,
    )
    theta = rng.uniform(0.0, 0.9, n_splats)
    phi = rng.uniform(0.0, 2 * np.pi, n_splats)
    normals = np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)],
        axis=1,
    )
    sh = rng.uniform(-0.15, 0.15, (n_splats, 27))
    sh[:, (0, 9, 18)] = rng.uniform(-0.7, 0.7, (n_splats, 3))
    g = Gaussian2DSet(
        positions=pos,
        scales=rng.uniform(0.15, 0.6, (n_splats, 2)),
        opacities=rng.uniform(0.2, 0.9, n_splats),
        sh_colors=sh,
        normals=normals,
        angles=rng.uniform(-4.0, 4.0, n_splats),
        space_tag="world",
    )
    f = image_size * 1.25
    cam = Camera(
        intrinsics=np.array(
            [[f, 0, image_size / 2.0], [0, f, image_size / 2.0], [0, 0, 1.0]]
        ),
        extrinsics=np.eye(4),
        width=image_size,
        height=image_size,
    )
    opts = RenderOptions(
        background=np.array([0.35, 0.5, 0.65]),
        transmittance_floor=1e-15,
        tile_size=max(image_size, 16),
    )
    return g, cam, opts


_FIELDS = ("positions", "scales", "opacities", "sh_colors", "normals", "angles")
_GRAD_ATTR = {
    "positions": "position",
    "scales": "scale",
    "opacities": "opacity",
    "sh_colors": "sh_colors",
    "normals": "normal",
    "angles": "angle",
}


def rasterizer_gradcheck(trials: int = 200, seed: int = 0, max_splats: int = 10):
    """FD-check every splat parameter over randomized scenes."""
    rng = np.random.default_rng(seed)
    tally = _Tally()
    for trial in range(trials):
        n = 1 + trial % max_splats
        g, cam, opts = random_splat_scene(rng, n)
        dL = rng.standard_normal((cam.height, cam.width, 3))
        grads = render_backward(g, cam, opts, dL)

        def loss():
            return float(np.sum(render(g, cam, opts) * dL))

        for fname in _FIELDS:
            arr = getattr(g, fname)
            gval = getattr(grads, _GRAD_ATTR[fname])
            for idx in np.ndindex(arr.shape):
                h = 1e-5 * max(1.0, abs(arr[idx]))
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss()
                arr[idx] = orig - h
                lm = loss()
                arr[idx] = orig
                tally.add((lp - lm) / (2.0 * h), float(gval[idx]))
    return _report("rasterizer", tally.worst_rel, tally.worst_abs, tally.checked, tally.failed)


def _micro_pipeline(seed: int):
    """N=16 points, K=2, narrow widths, 16x16 views: the end-to-end loss."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.8, 0.8, (16, 3))
    cols = rng.uniform(0.25, 0.75, (16, 3))
    cloud = PointCloud(pts, cols)
    ncloud, transform, index, init = prepare_cloud(cloud, neighbor_k=6)
    module = make_module_params(
        rng, k_split=2, encoder_widths=(8, 16), decoder_hiddens=(16, 16),
        neighbor_k=6, dtype=np.float64,
    )
    # nudge the zero final layers so gradients flow through live branches
    for name, arr in named_params(module):
        if arr.size and name.endswith("weights"):
            arr += rng.uniform(-0.02, 0.02, arr.shape)
    f = 20.0
    cams = []
    for az in (0.3, 2.4):
        eye = 2.2 * np.array([np.cos(az), np.sin(az), 0.45])
        fwd = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up); right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        ext = np.eye(4)
        ext[:3, :3] = np.stack([right, down, fwd])
        ext[:3, 3] = -ext[:3, :3] @ eye
        cams.append(Camera(np.array([[f, 0, 8.0], [0, f, 8.0], [0, 0, 1]]), ext, 16, 16))
    gts = [rng.uniform(0.2, 0.8, (16, 16, 3)) for _ in cams]
    opts = RenderOptions(
        background=np.array([0.4, 0.45, 0.5]), transmittance_floor=1e-15, tile_size=16
    )
    return module, init, index, transform, cams, gts, opts


def _micro_loss(module, init, index, transform, cams, gts, opts, beta=0.8):
    out_set, cache = forward_with_cache(module, init, index)
    world = denormalize_gaussians(out_set, transform)
    preds = [render(world, cam, opts) for cam in cams]
    per_view, agg = combined_loss(preds, gts, beta)
    return agg.total, (cache, world, per_view)


def network_gradcheck(seed: int = 0, rel_tol: float = REL_TOL):
    """End-to-end FD over every network weight at micro configuration."""
    module, init, index, transform, cams, gts, opts = _micro_pipeline(seed)
    total, (cache, world, per_view) = _micro_loss(
        module, init, index, transform, cams, gts, opts
    )
    from .rasterizer import GaussianGradients

    ggrads = GaussianGradients.zeros(len(world), dtype=world.dtype)
    for lv, cam in zip(per_view, cams):
        ggrads.add_(render_backward(world, cam, opts, lv.dL_dimage))
    ggrads.position *= transform.scale
    ggrads.scale *= transform.scale
    pgrads, _ = backward_from_cache(module, init, cache, ggrads)

    tally = _Tally(rel_tol=rel_tol, abs_tol=1e-8)
    for name, arr in named_params(module):
        flat = arr.ravel()
        gflat = pgrads[name].ravel()
        for j in range(flat.size):
            h = 2e-6 * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + h
            lp, _ = _micro_loss(module, init, index, transform, cams, gts, opts)
            flat[j] = orig - h
            lm, _ = _micro_loss(module, init, index, transform, cams, gts, opts)
            flat[j] = orig
            tally.add((lp - lm) / (2.0 * h), float(gflat[j]))
    return _report("network", tally.worst_rel, tally.worst_abs, tally.checked, tally.failed)


def metrics_gradcheck(trials: int = 5, seed: int = 0, samples_per_pair: int = 60):
    """FD over MSE and SSIM gradients on random image pairs."""
    rng = np.random.default_rng(seed)
    tally = _Tally(rel_tol=1e-4, abs_tol=1e-9)
    for _ in range(trials):
        h_px, w_px = int(rng.integers(12, 24)), int(rng.integers(12, 24))
        a = rng.uniform(0.0, 1.0, (h_px, w_px, 3))
        b = rng.uniform(0.0, 1.0, (h_px, w_px, 3))
        _, gm = mse(a, b)
        _, gs = ssim(a, b)
        for _ in range(samples_per_pair):
            i, j, c = rng.integers(h_px), rng.integers(w_px), rng.integers(3)
            h = 1e-5
            orig = a[i, j, c]
            a[i, j, c] = orig + h
            mp, _ = mse(a, b)
            sp, _ = ssim(a, b)
            a[i, j, c] = orig - h
            mm, _ = mse(a, b)
            sm, _ = ssim(a, b)
            a[i, j, c] = orig
            tally.add((mp - mm) / (2 * h), gm[i, j, c])
            tally.add((sp - sm) / (2 * h), gs[i, j, c])
    return _report("metrics", tally.worst_rel, tally.worst_abs, tally.checked, tally.failed)
