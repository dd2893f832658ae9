"""Deterministic desk-scale datasets: colored meshes, surface-sampled point
clouds and z-buffered flat-shaded ground-truth views."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .geometry import PointCloud
from .io_formats import SceneManifest, ViewSpec, save_manifest, write_image, write_ply
from .rasterizer import Camera

SCENE_KINDS = ("cube", "sphere", "checker_plane", "two_spheres")


@dataclass
class Mesh:
    vertices: np.ndarray     # (V, 3)
    faces: np.ndarray        # (F, 3) int
    face_colors: np.ndarray  # (F, 3) in [0,1]

    def __post_init__(self):
        if len(self.faces) != len(self.face_colors):
            raise InvalidArgument("faces and face_colors must align")


def _palette(rng, base_colors):
    cols = np.asarray(base_colors, dtype=np.float64)
    jitter = rng.uniform(-0.08, 0.08, cols.shape)
    return np.clip(cols + jitter, 0.05, 0.95)


_CUBE_BASE = [
    (0.85, 0.25, 0.25), (0.25, 0.75, 0.30), (0.25, 0.35, 0.85),
    (0.90, 0.80, 0.25), (0.80, 0.30, 0.80), (0.25, 0.80, 0.80),
]
_OCTANT_BASE = [
    (0.85, 0.30, 0.30), (0.30, 0.75, 0.35), (0.30, 0.40, 0.85), (0.88, 0.78, 0.30),
    (0.75, 0.35, 0.78), (0.32, 0.78, 0.78), (0.85, 0.55, 0.25), (0.55, 0.55, 0.60),
]


def _cube_mesh(size: float, rng) -> Mesh:
    h = size / 2.0
    v = np.array(
        [[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)]
    )
    # two triangles per face, 6 faces
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # -x, +x
        (0, 4, 5, 1), (2, 3, 7, 6),  # -y, +y
        (0, 2, 6, 4), (1, 5, 7, 3),  # -z, +z
    ]
    faces = []
    colors = []
    pal = _palette(rng, _CUBE_BASE)
    for fi, (a, b, c, d) in enumerate(quads):
        faces.append((a, b, c))
        faces.append((a, c, d))
        colors += [pal[fi], pal[fi]]
    return Mesh(v, np.array(faces, dtype=np.int64), np.array(colors))


def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return v, f


def _icosphere(subdiv: int, radius: float):
    v, f = _icosahedron()
    for _ in range(subdiv):
        edge_mid = {}
        verts = list(v)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in edge_mid:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                edge_mid[key] = len(verts)
                verts.append(m)
            return edge_mid[key]

        new_f = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_f += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        v = np.array(verts)
        f = np.array(new_f, dtype=np.int64)
    return v * radius, f


def _sphere_mesh(radius: float, subdiv: int, rng, center=(0.0, 0.0, 0.0)) -> Mesh:
    v, f = _icosphere(subdiv, radius)
    v = v + np.asarray(center)
    centroids = v[f].mean(axis=1) - np.asarray(center)
    octant = (
        (centroids[:, 0] > 0).astype(int)
        + 2 * (centroids[:, 1] > 0).astype(int)
        + 4 * (centroids[:, 2] > 0).astype(int)
    )
    pal = _palette(rng, _OCTANT_BASE)
    return Mesh(v, f, pal[octant])


def _checker_plane_mesh(size: float, cells: int, rng) -> Mesh:
    pal = _palette(rng, [(0.9, 0.9, 0.9), (0.15, 0.15, 0.2)])
    step = size / cells
    verts = []
    faces = []
    colors = []
    for iy in range(cells):
        for ix in range(cells):
            x0 = -size / 2 + ix * step
            y0 = -size / 2 + iy * step
            base = len(verts)
            verts += [
                (x0, y0, 0.0), (x0 + step, y0, 0.0),
                (x0 + step, y0 + step, 0.0), (x0, y0 + step, 0.0),
            ]
            col = pal[(ix + iy) % 2]
            faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
            colors += [col, col]
    return Mesh(np.array(verts), np.array(faces, dtype=np.int64), np.array(colors))


def make_scene(kind: str, params: dict | None = None, seed: int = 0) -> Mesh:
    """Colored triangle mesh for one synthetic scene; deterministic per seed."""
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    size = float(params.get("size", 1.0))
    if size <= 0:
        raise InvalidArgument("scene size must be positive")
    if kind == "cube":
        return _cube_mesh(size, rng)
    if kind == "sphere":
        subdiv = int(params.get("subdivisions", 3))
        if subdiv < 0:
            raise InvalidArgument("subdivisions must be >= 0")
        return _sphere_mesh(size / 2.0, subdiv, rng)
    if kind == "checker_plane":
        cells = int(params.get("cells", 4))
        if cells < 1:
            raise InvalidArgument("cells must be >= 1")
        return _checker_plane_mesh(size, cells, rng)
    if kind == "two_spheres":
        subdiv = int(params.get("subdivisions", 2))
        a = _sphere_mesh(size * 0.32, subdiv, rng, center=(-size * 0.28, 0.0, 0.0))
        b = _sphere_mesh(size * 0.40, subdiv, rng, center=(size * 0.30, 0.05 * size, 0.0))
        faces_b = b.faces + len(a.vertices)
        return Mesh(
            np.concatenate([a.vertices, b.vertices]),
            np.concatenate([a.faces, faces_b]),
            np.concatenate([a.face_colors, b.face_colors]),
        )
    raise InvalidArgument(f"unknown scene kind {kind!r}")


def _face_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    a = v[mesh.faces[:, 1]] - v[mesh.faces[:, 0]]
    b = v[mesh.faces[:, 2]] - v[mesh.faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def sample_points(mesh: Mesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform surface samples; color = face color."""
    if n < 1:
        raise InvalidArgument("sample count must be >= 1")
    areas = _face_areas(mesh)
    total = areas.sum()
    if total <= 0:
        raise InvalidArgument("mesh is degenerate (zero surface area)")
    rng = np.random.default_rng(seed)
    face_ids = rng.choice(len(mesh.faces), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(0, 1, n))
    r2 = rng.uniform(0, 1, n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    tri = mesh.vertices[mesh.faces[face_ids]]  # (n, 3, 3)
    pts = w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1] + w2[:, None] * tri[:, 2]
    return PointCloud(pts, mesh.face_colors[face_ids].copy())


def render_gt(mesh: Mesh, cam: Camera, background) -> np.ndarray:
    """Z-buffered flat-shaded rasterization of the mesh; deterministic."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = bg
    if len(mesh.faces) == 0:
        return img
    zbuf = np.full((h, w), np.inf)
    xc = mesh.vertices @ cam.rotation.T + cam.translation
    z = xc[:, 2]
    us = cam.fx * xc[:, 0] / z + cam.cx
    vs = cam.fy * xc[:, 1] / z + cam.cy
    for fi, (i0, i1, i2) in enumerate(mesh.faces):
        if z[i0] <= cam.near or z[i1] <= cam.near or z[i2] <= cam.near:
            continue
        x0, y0, x1, y1, x2, y2 = us[i0], vs[i0], us[i1], vs[i1], us[i2], vs[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        px0 = max(int(np.floor(min(x0, x1, x2) - 0.5)), 0)
        px1 = min(int(np.ceil(max(x0, x1, x2) + 0.5)), w - 1)
        py0 = max(int(np.floor(min(y0, y1, y2) - 0.5)), 0)
        py1 = min(int(np.ceil(max(y0, y1, y2) + 0.5)), h - 1)
        if px1 < px0 or py1 < py0:
            continue
        gx = np.arange(px0, px1 + 1) + 0.5
        gy = np.arange(py0, py1 + 1) + 0.5
        pxg, pyg = np.meshgrid(gx, gy)
        w0 = (x1 - pxg) * (y2 - pyg) - (x2 - pxg) * (y1 - pyg)
        w1 = (x2 - pxg) * (y0 - pyg) - (x0 - pxg) * (y2 - pyg)
        w2 = (x0 - pxg) * (y1 - pyg) - (x1 - pxg) * (y0 - pyg)
        inside = (
            ((w0 >= 0) & (w1 >= 0) & (w2 >= 0))
            | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        )
        if not np.any(inside):
            continue
        l0 = w0 / area
        l1 = w1 / area
        l2 = w2 / area
        inv_depth = l0 / z[i0] + l1 / z[i1] + l2 / z[i2]
        with np.errstate(divide="ignore"):
            depth = 1.0 / inv_depth
        tile_z = zbuf[py0 : py1 + 1, px0 : px1 + 1]
        win = inside & (depth > cam.near) & (depth < tile_z)
        if not np.any(win):
            continue
        tile_z[win] = depth[win]
        img[py0 : py1 + 1, px0 : px1 + 1][win] = mesh.face_colors[fi]
    return img


def look_at_camera(
    eye, target, width: int, height: int, fov_deg: float = 50.0, near: float = 0.01
) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)  # image y grows downward
    rot = np.stack([right, down, fwd])
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    k = np.array([[f, 0, width / 2.0], [0, f, height / 2.0], [0, 0, 1.0]])
    return Camera(k, ext, width, height, near)


def view_sphere_cameras(
    center, radius: float, n_views: int, width: int, height: int, fov_deg: float = 50.0
):
    """Cameras evenly spread in azimuth, cycling three elevation bands."""
    cams = []
    elevations = (-25.0, 10.0, 35.0)
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        el = np.radians(elevations[i % len(elevations)])
        eye = np.asarray(center) + radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(look_at_camera(eye, center, width, height, fov_deg))
    return cams


def scene_bound_radius(mesh: Mesh) -> float:
    center = (mesh.vertices.max(axis=0) + mesh.vertices.min(axis=0)) / 2.0
    return float(np.max(np.linalg.norm(mesh.vertices - center, axis=1)))


def emit_dataset(
    kinds,
    n_scenes: int,
    n_views: int,
    resolution: int,
    out_dir,
    seed: int = 0,
    points: int = 4096,
    background=(1.0, 1.0, 1.0),
):
    """Write PLY clouds, ground-truth images and manifests; returns manifest
    paths. Deterministic for a fixed seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = list(kinds)
    for kind in kinds:
        if kind not in SCENE_KINDS:
            raise InvalidArgument(f"unknown scene kind {kind!r}")
    manifests = []
    bg = np.asarray(background, dtype=np.float64)
    for si in range(n_scenes):
        kind = kinds[si % len(kinds)]
        scene_seed = seed * 100003 + si
        mesh = make_scene(kind, None, seed=scene_seed)
        cloud = sample_points(mesh, points, seed=scene_seed + 1)
        center = (mesh.vertices.max(axis=0) + mesh.vertices.min(axis=0)) / 2.0
        radius = 2.5 * scene_bound_radius(mesh)
        cams = view_sphere_cameras(center, radius, n_views, resolution, resolution)
        sdir = out_dir / f"scene_{si:03d}_{kind}"
        sdir.mkdir(parents=True, exist_ok=True)
        ply_path = sdir / "cloud.ply"
        write_ply(cloud, ply_path)
        views = []
        for vi, cam in enumerate(cams):
            img = render_gt(mesh, cam, bg)
            img_path = sdir / f"view_{vi:03d}.ppm"
            write_image(img, img_path)
            views.append(ViewSpec(cam.intrinsics, cam.extrinsics, img_path))
        manifest = SceneManifest(
            cloud_path=ply_path,
            background=bg,
            resolution=(resolution, resolution),
            views=views,
        )
        mpath = sdir / "scene.txt"
        save_manifest(manifest, mpath)
        manifests.append(mpath)
    return manifests
