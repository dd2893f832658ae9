"""Entire-patch architecture: patch extraction and coverage, background
composition, the two-stage training loop and both inference modes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientPoints, InvalidArgument, InvalidState, NonFiniteGradient
from .gaussians import (
    Gaussian2DSet,
    denormalize_gaussians,
    initialize_gaussians,
    merge_sets,
)
from .geometry import (
    NeighborIndex,
    PointCloud,
    build_index,
    estimate_normals,
    k_nearest,
    min_neighbor_distance,
    normalize_cloud,
)
from .io_formats import SceneManifest, load_manifest, read_image, read_ply, save_network_checkpoint
from .metrics import combined_loss, psnr
from .network import (
    AdamState,
    ModuleParams,
    adam_step,
    backward_from_cache,
    forward_with_cache,
    make_module_params,
    named_params,
    zero_like_params,
)
from .rasterizer import Camera, GaussianGradients, RenderOptions, render, render_backward

log = logging.getLogger("splatpatch")


@dataclass
class Patch:
    """N_p nearest points around a center, plus a whole-cloud membership mask."""

    center_index: int
    member_indices: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not self.mask[self.center_index]:
            raise InvalidArgument("patch center must be a member")
        if self.mask.sum() != len(self.member_indices):
            raise InvalidArgument("mask must be true exactly at member indices")


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults follow the published recipe."""

    k_split: int = 4
    n_patch: int = 2048
    beta: float = 0.8
    n_views: int = 8
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 480
    resolution: int = 256
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    # artifact plumbing, not part of the published recipe
    max_steps: int | None = None
    encoder_widths: tuple = (64, 128, 256, 640)
    decoder_hiddens: tuple = (512, 512, 512, 256, 128)
    neighbor_k: int = 16
    dtype: str = "float32"
    patch_own_transform: bool = True
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        for name in ("k_split", "n_patch", "n_views", "batch_size", "max_epochs", "resolution"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")
        if not (0.0 <= self.beta <= 1.0):
            raise InvalidArgument("beta must lie in [0,1]")
        if self.lr < 0:
            raise InvalidArgument("lr must be non-negative")


@dataclass
class ModulePair:
    entire: ModuleParams
    patch: ModuleParams
    entire_frozen: bool = True


@dataclass
class Scene:
    """In-memory training scene: cloud, posed cameras and ground-truth views."""

    cloud: PointCloud
    cameras: list
    images: list
    background: np.ndarray
    name: str = ""


@dataclass
class PreparedScene:
    scene: Scene
    normalized: PointCloud      # with normals
    transform: object
    index: NeighborIndex
    init: Gaussian2DSet


@dataclass
class TrainResult:
    params: ModuleParams
    history: list
    steps: int


def load_scene(manifest: SceneManifest | str | Path) -> Scene:
    if not isinstance(manifest, SceneManifest):
        manifest = load_manifest(manifest)
    cloud = read_ply(manifest.cloud_path)
    w, h = manifest.resolution
    cams = [
        Camera(v.intrinsics, v.extrinsics, w, h, manifest.near) for v in manifest.views
    ]
    images = [read_image(v.image_path) for v in manifest.views]
    return Scene(
        cloud=cloud,
        cameras=cams,
        images=images,
        background=np.asarray(manifest.background, dtype=np.float64),
        name=str(manifest.cloud_path.parent.name),
    )


def prepare_cloud(cloud: PointCloud, neighbor_k: int = 16):
    """The shared module front end: normalize, estimate normals (unless the
    cloud carries them), measure neighbor distances, initialize splats."""
    ncloud, transform = normalize_cloud(cloud)
    index = build_index(ncloud)
    if ncloud.normals is None:
        k = min(max(neighbor_k, 3), len(ncloud))
        normals = estimate_normals(ncloud, index, k=k)
        ncloud = ncloud.with_normals(normals)
    min_dists = min_neighbor_distance(ncloud, index)
    init = initialize_gaussians(ncloud, min_dists)
    return ncloud, transform, index, init


def prepare_scene(scene: Scene, neighbor_k: int = 16) -> PreparedScene:
    ncloud, transform, index, init = prepare_cloud(scene.cloud, neighbor_k)
    return PreparedScene(scene, ncloud, transform, index, init)


# ---------------------------------------------------------------------------
# Patches

def extract_random_patch(
    cloud: PointCloud, index: NeighborIndex, n_patch: int, rng
) -> Patch:
    """Uniform random center, N_p nearest points (center included)."""
    n = len(cloud)
    if n < n_patch:
        raise InsufficientPoints(f"cloud has {n} points, patch needs {n_patch}")
    center = int(rng.integers(n))
    return patch_around(cloud, index, center, n_patch)


def patch_around(
    cloud: PointCloud, index: NeighborIndex, center: int, n_patch: int
) -> Patch:
    n = len(cloud)
    if n < n_patch:
        raise InsufficientPoints(f"cloud has {n} points, patch needs {n_patch}")
    ids, _ = k_nearest(index, cloud.positions[center], n_patch)
    if center not in ids:
        # duplicate-position ties can displace the center; force it in
        ids[-1] = center
    ids = np.sort(ids)
    mask = np.zeros(n, dtype=bool)
    mask[ids] = True
    return Patch(center_index=center, member_indices=ids, mask=mask)


def cover_with_patches(
    cloud: PointCloud, index: NeighborIndex, n_patch: int, rng
) -> list:
    """Random-center patches until every point is covered. Each round removes
    at least its center from the uncovered set, so this terminates in <= N
    iterations."""
    n = len(cloud)
    if n < n_patch:
        raise InsufficientPoints(f"cloud has {n} points, patch needs {n_patch}")
    uncovered = np.ones(n, dtype=bool)
    patches = []
    while uncovered.any():
        candidates = np.flatnonzero(uncovered)
        center = int(candidates[rng.integers(candidates.size)])
        patch = patch_around(cloud, index, center, n_patch)
        uncovered[patch.member_indices] = False
        patches.append(patch)
    return patches


def compose_entire_patch(
    g_e: Gaussian2DSet, g_p: Gaussian2DSet, patch: Patch, k_split: int
) -> Gaussian2DSet:
    """Background rows of the entire prediction (split provenance: point j
    owns rows j*K..j*K+K-1) followed by the whole patch prediction."""
    n = patch.mask.shape[0]
    if len(g_e) != k_split * n:
        raise InvalidState(
            f"entire set has {len(g_e)} rows, provenance expects {k_split * n}"
        )
    if len(g_p) != k_split * len(patch.member_indices):
        raise InvalidState(
            f"patch set has {len(g_p)} rows, provenance expects "
            f"{k_split * len(patch.member_indices)}"
        )
    background_rows = np.repeat(~patch.mask, k_split)
    return merge_sets(g_e.take(background_rows), g_p)


# ---------------------------------------------------------------------------
# Rendering + loss plumbing

def _render_options(cfg: TrainConfig, background) -> RenderOptions:
    return RenderOptions(background=np.asarray(background, dtype=np.float64))


def _render_views(world: Gaussian2DSet, scene: Scene, view_ids, opts: RenderOptions):
    return [render(world, scene.cameras[i], opts) for i in view_ids]


def _loss_and_image_grads(preds, scene, view_ids, beta):
    gts = [scene.images[i] for i in view_ids]
    per_view, agg = combined_loss(preds, gts, beta)
    return per_view, agg


def _backprop_views(world, scene, view_ids, per_view, opts):
    grads = GaussianGradients.zeros(len(world), dtype=world.dtype)
    for lv, vid in zip(per_view, view_ids):
        grads.add_(render_backward(world, scene.cameras[vid], opts, lv.dL_dimage))
    return grads


def _chain_denormalize(grads: GaussianGradients, transform) -> GaussianGradients:
    # world = normalized * s + c  =>  d/d(normalized) = s * d/d(world)
    grads.position = grads.position * transform.scale
    grads.scale = grads.scale * transform.scale
    return grads


def _select_views(rng, n_available: int, n_views: int):
    take = min(n_views, n_available)
    return rng.choice(n_available, size=take, replace=False)


# ---------------------------------------------------------------------------
# Training

def _history_row(step, epoch, scene_name, loss):
    return {
        "step": step,
        "epoch": epoch,
        "scene": scene_name,
        "loss": loss.total,
        "mse": loss.mse,
        "ssim": loss.ssim,
    }


def _write_history(path, history):
    if path is None or not history:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def _checkpoint(cfg, module, step, rng, best):
    if cfg.checkpoint_dir is None:
        return
    d = Path(cfg.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_network_checkpoint(d / "last.ckpt", module, step, rng.bit_generator.state)
    if best:
        save_network_checkpoint(d / "best.ckpt", module, step, rng.bit_generator.state)


def _resolve_scenes(dataset):
    scenes = []
    for item in dataset:
        scenes.append(item if isinstance(item, Scene) else load_scene(item))
    return scenes


def train_entire(dataset, cfg: TrainConfig) -> TrainResult:
    """Stage one: train the entire-cloud prediction module."""
    scenes = _resolve_scenes(dataset)
    if not scenes:
        raise InvalidArgument("empty dataset")
    for s in scenes:
        if len(s.cameras) < 1:
            raise InvalidArgument(f"scene {s.name!r} has no views")
    rng = np.random.default_rng(cfg.seed)
    module = make_module_params(
        rng,
        k_split=cfg.k_split,
        encoder_widths=cfg.encoder_widths,
        decoder_hiddens=cfg.decoder_hiddens,
        neighbor_k=cfg.neighbor_k,
        dtype=np.dtype(cfg.dtype),
    )
    adam = AdamState(lr=cfg.lr)
    preps = [prepare_scene(s, cfg.neighbor_k) for s in scenes]
    history = []
    step = 0
    best_loss = math.inf
    done = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(scenes))
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            total = zero_like_params(module)
            batch_loss = 0.0
            for si in batch:
                prep = preps[si]
                scene = prep.scene
                opts = _render_options(cfg, scene.background)
                view_ids = _select_views(rng, len(scene.cameras), cfg.n_views)
                out_set, cache = forward_with_cache(module, prep.init, prep.index)
                world = denormalize_gaussians(out_set, prep.transform)
                preds = _render_views(world, scene, view_ids, opts)
                per_view, agg = _loss_and_image_grads(preds, scene, view_ids, cfg.beta)
                ggrads = _backprop_views(world, scene, view_ids, per_view, opts)
                ggrads = _chain_denormalize(ggrads, prep.transform)
                pgrads, _ = backward_from_cache(module, prep.init, cache, ggrads)
                for name in total:
                    total[name] += pgrads[name] / len(batch)
                batch_loss += agg.total / len(batch)
                history.append(_history_row(step, epoch, scene.name, agg))
            if not math.isfinite(batch_loss):
                log.warning("step %d: non-finite loss, skipping update", step)
                step += 1
                continue
            try:
                adam_step(adam, module, total)
            except NonFiniteGradient as exc:
                log.warning("step %d rejected: %s", step, exc)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        is_best = batch_loss < best_loss
        best_loss = min(best_loss, batch_loss)
        _checkpoint(cfg, module, step, rng, is_best)
        if done:
            break
    _write_history(cfg.log_path, history)
    return TrainResult(params=module, history=history, steps=step)


def _patch_subcloud(cloud: PointCloud, patch: Patch) -> PointCloud:
    normals = cloud.normals[patch.member_indices] if cloud.normals is not None else None
    return PointCloud(
        cloud.positions[patch.member_indices],
        cloud.colors[patch.member_indices],
        normals,
    )


def _predict_world_from_cloud(module, cloud, neighbor_k, want_cache=False):
    ncloud, transform, index, init = prepare_cloud(cloud, neighbor_k)
    out_set, cache = forward_with_cache(module, init, index)
    world = denormalize_gaussians(out_set, transform)
    if want_cache:
        return world, (init, index, transform, cache)
    return world


def train_patch(dataset, frozen_entire: ModuleParams, cfg: TrainConfig) -> TrainResult:
    """Stage two: freeze the entire module, train the patch module on
    background-completed renders."""
    scenes = _resolve_scenes(dataset)
    if not scenes:
        raise InvalidArgument("empty dataset")
    rng = np.random.default_rng(cfg.seed + 1)
    module = make_module_params(
        rng,
        k_split=cfg.k_split,
        encoder_widths=cfg.encoder_widths,
        decoder_hiddens=cfg.decoder_hiddens,
        neighbor_k=cfg.neighbor_k,
        dtype=np.dtype(cfg.dtype),
    )
    adam = AdamState(lr=cfg.lr)
    preps = [prepare_scene(s, cfg.neighbor_k) for s in scenes]
    # the frozen module is deterministic per scene: cache its world-space
    # prediction once (recomputing every step gives bit-identical sets)
    backgrounds = []
    for prep in preps:
        out_set, _ = forward_with_cache(frozen_entire, prep.init, prep.index)
        backgrounds.append(denormalize_gaussians(out_set, prep.transform))
    history = []
    step = 0
    best_loss = math.inf
    done = False
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(scenes))
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            total = zero_like_params(module)
            batch_loss = 0.0
            for si in batch:
                prep = preps[si]
                scene = prep.scene
                opts = _render_options(cfg, scene.background)
                patch = extract_random_patch(scene.cloud, prep.index, cfg.n_patch, rng)
                if cfg.patch_own_transform:
                    sub = _patch_subcloud(scene.cloud, patch)
                    ncloud, transform, index, init = prepare_cloud(sub, cfg.neighbor_k)
                else:
                    sub = _patch_subcloud(prep.normalized, patch)
                    transform = prep.transform
                    index = build_index(sub)
                    md = min_neighbor_distance(sub, index)
                    init = initialize_gaussians(sub, md)
                out_set, cache = forward_with_cache(module, init, index)
                g_p = denormalize_gaussians(out_set, transform)
                composed = compose_entire_patch(backgrounds[si], g_p, patch, cfg.k_split)
                view_ids = _select_views(rng, len(scene.cameras), cfg.n_views)
                preds = _render_views(composed, scene, view_ids, opts)
                per_view, agg = _loss_and_image_grads(preds, scene, view_ids, cfg.beta)
                all_grads = _backprop_views(composed, scene, view_ids, per_view, opts)
                # only the trailing K*N_p rows belong to the patch module;
                # background rows carry no trainable parameters here
                n_bg = len(composed) - len(g_p)
                pg = GaussianGradients(
                    position=all_grads.position[n_bg:],
                    scale=all_grads.scale[n_bg:],
                    opacity=all_grads.opacity[n_bg:],
                    sh_colors=all_grads.sh_colors[n_bg:],
                    normal=all_grads.normal[n_bg:],
                    angle=all_grads.angle[n_bg:],
                )
                pg = _chain_denormalize(pg, transform)
                pgrads, _ = backward_from_cache(module, init, cache, pg)
                for name in total:
                    total[name] += pgrads[name] / len(batch)
                batch_loss += agg.total / len(batch)
                history.append(_history_row(step, epoch, scene.name, agg))
            if not math.isfinite(batch_loss):
                log.warning("step %d: non-finite loss, skipping update", step)
                step += 1
                continue
            try:
                adam_step(adam, module, total)
            except NonFiniteGradient as exc:
                log.warning("step %d rejected: %s", step, exc)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        is_best = batch_loss < best_loss
        best_loss = min(best_loss, batch_loss)
        _checkpoint(cfg, module, step, rng, is_best)
        if done:
            break
    _write_history(cfg.log_path, history)
    return TrainResult(params=module, history=history, steps=step)


# ---------------------------------------------------------------------------
# Inference

def infer_entire(
    params: ModuleParams,
    cloud: PointCloud,
    cams,
    opts: RenderOptions | None = None,
    neighbor_k: int = 16,
):
    """One pass of the entire-cloud module; returns (world set, images)."""
    opts = opts or RenderOptions()
    world = _predict_world_from_cloud(params, cloud, neighbor_k)
    images = [render(world, cam, opts) for cam in cams]
    return world, images


def infer_patchwise(
    params_patch: ModuleParams,
    cloud: PointCloud,
    cams,
    n_patch: int = 2048,
    seed: int = 0,
    opts: RenderOptions | None = None,
    neighbor_k: int = 16,
):
    """Cover the cloud with patches, predict each with its own normalization,
    combine every patch's splats, render. Falls back to entire-cloud
    semantics when the cloud is smaller than one patch."""
    opts = opts or RenderOptions()
    if len(cloud) < n_patch:
        log.warning(
            "cloud of %d points is smaller than patch size %d; "
            "falling back to entire-cloud inference with the patch module",
            len(cloud), n_patch,
        )
        return infer_entire(params_patch, cloud, cams, opts, neighbor_k)
    rng = np.random.default_rng(seed)
    index = build_index(cloud)
    patches = cover_with_patches(cloud, index, n_patch, rng)
    combined = None
    for patch in patches:
        sub = _patch_subcloud(cloud, patch)
        world = _predict_world_from_cloud(params_patch, sub, neighbor_k)
        combined = world if combined is None else merge_sets(combined, world)
    images = [render(combined, cam, opts) for cam in cams]
    return combined, images


def evaluate_views(world: Gaussian2DSet, scene: Scene, opts: RenderOptions | None = None):
    """Per-view PSNR/SSIM of a splat set against a scene's ground truth."""
    from .metrics import ssim as ssim_fn

    opts = opts or RenderOptions(background=scene.background)
    rows = []
    for cam, gt in zip(scene.cameras, scene.images):
        img = render(world, cam, opts)
        s, _ = ssim_fn(img, gt)
        rows.append({"psnr": psnr(img, gt), "ssim": s})
    return rows
