"""Persistence: PLY point clouds, PPM/PNG images, scene manifests and
versioned binary checkpoints. All round trips are bit- or ulp-exact."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    FormatError,
    InvalidArgument,
    UnexpectedEof,
    VersionMismatch,
)
from .gaussians import Gaussian2DSet
from .geometry import PointCloud
from .network import (
    DecoderParams,
    EncoderBlockParams,
    EncoderParams,
    LinearLayerParams,
    ModuleParams,
    make_module_params,
    named_params,
)

# ---------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "float": ("<f4", float),
    "float32": ("<f4", float),
    "double": ("<f8", float),
    "float64": ("<f8", float),
    "uchar": ("u1", int),
    "uint8": ("u1", int),
    "char": ("i1", int),
    "int8": ("i1", int),
    "short": ("<i2", int),
    "ushort": ("<u2", int),
    "int": ("<i4", int),
    "int32": ("<i4", int),
    "uint": ("<u4", int),
    "uint32": ("<u4", int),
}


def read_ply(path) -> PointCloud:
    """Read an ASCII or binary-little-endian PLY with xyz + byte rgb
    (normals optional)."""
    path = Path(path)
    data = path.read_bytes()
    lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: header has no end_header")
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        lines.append(line)
        pos = nl + 1
        if line == "end_header":
            break
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: line 1: not a PLY file")
    fmt = None
    n_vertex = None
    props = []  # (type, name) of the vertex element
    in_vertex = False
    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{path}: line {ln}: unsupported format {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"{path}: line {ln}: malformed element")
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is None:
                raise FormatError(f"{path}: line {ln}: vertex element must come first")
        elif tok[0] == "property":
            if not in_vertex:
                continue
            if tok[1] == "list":
                raise FormatError(f"{path}: line {ln}: list property in vertex element")
            if len(tok) != 3:
                raise FormatError(f"{path}: line {ln}: malformed property")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: line {ln}: unsupported type {tok[1]!r}")
            props.append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            break
    if fmt is None:
        raise FormatError(f"{path}: missing format line")
    if n_vertex is None:
        raise FormatError(f"{path}: missing vertex element")
    names = [name for _, name in props]
    for required in ("x", "y", "z", "red", "green", "blue"):
        if required not in names:
            raise FormatError(f"{path}: missing vertex property {required!r}")
    for cname in ("red", "green", "blue"):
        ctype = props[names.index(cname)][0]
        if _PLY_TYPES[ctype][0] != "u1":
            raise FormatError(f"{path}: color property {cname!r} must be uchar, got {ctype}")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, _PLY_TYPES[t][0]) for t, name in props])
        need = dtype.itemsize * n_vertex
        if len(data) - pos < need:
            raise UnexpectedEof(f"{path}: vertex data truncated ({len(data)-pos} of {need} bytes)")
        table = np.frombuffer(data, dtype=dtype, count=n_vertex, offset=pos)
    else:
        text = data[pos:].decode("ascii", errors="replace").split("\n")
        rows = [r.split() for r in text if r.strip()]
        if len(rows) < n_vertex:
            raise UnexpectedEof(f"{path}: expected {n_vertex} vertex rows, found {len(rows)}")
        arr = np.array([[float(v) for v in r[: len(props)]] for r in rows[:n_vertex]])
        if arr.shape[1] != len(props):
            raise FormatError(f"{path}: vertex row width does not match header")
        table = {name: arr[:, i] for i, (_, name) in enumerate(props)}

    get = lambda name: np.asarray(table[name], dtype=np.float64)
    positions = np.stack([get("x"), get("y"), get("z")], axis=1)
    colors = np.stack([get("red"), get("green"), get("blue")], axis=1) / 255.0
    normals = None
    if all(n in names for n in ("nx", "ny", "nz")):
        normals = np.stack([get("nx"), get("ny"), get("nz")], axis=1)
        lens = np.linalg.norm(normals, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        normals = normals / lens
    return PointCloud(positions, colors, normals)


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write positions as double (ulp-exact round trip), colors as bytes."""
    path = Path(path)
    n = len(cloud)
    has_n = cloud.normals is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += [f"property double {ax}" for ax in "xyz"]
    if has_n:
        header += [f"property double n{ax}" for ax in "xyz"]
    header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")
    cols = np.floor(cloud.colors * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if has_n:
                fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=np.dtype(fields))
            for i, ax in enumerate("xyz"):
                rec[ax] = cloud.positions[:, i]
                if has_n:
                    rec["n" + ax] = cloud.normals[:, i]
            for i, c in enumerate(("red", "green", "blue")):
                rec[c] = cols[:, i]
            fh.write(rec.tobytes())
        else:
            for i in range(n):
                row = [repr(v) for v in cloud.positions[i]]
                if has_n:
                    row += [repr(v) for v in cloud.normals[i]]
                row += [str(int(v)) for v in cols[i]]
                fh.write((" ".join(row) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Images

def _quantize(img: np.ndarray) -> np.ndarray:
    # round-half-up to 8 bit
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    path = Path(path)
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgument(f"expected (H, W, 3) image, got {img.shape}")
    q = _quantize(img)
    if path.suffix.lower() == ".ppm":
        h, w = q.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    elif path.suffix.lower() == ".png":
        Image.fromarray(q, mode="RGB").save(path, format="PNG")
    else:
        raise InvalidArgument(f"unsupported image extension {path.suffix!r}")


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        data = path.read_bytes()
        if not data.startswith(b"P6"):
            raise FormatError(f"{path}: only binary P6 PPM supported")
        # header = magic, width, height, maxval separated by whitespace/comments
        tokens = []
        i = 2
        while len(tokens) < 3:
            while i < len(data) and data[i : i + 1].isspace():
                i += 1
            if i < len(data) and data[i : i + 1] == b"#":
                while i < len(data) and data[i] != 0x0A:
                    i += 1
                continue
            start = i
            while i < len(data) and not data[i : i + 1].isspace():
                i += 1
            if start == i:
                raise UnexpectedEof(f"{path}: truncated PPM header")
            tokens.append(data[start:i])
        i += 1  # single whitespace after maxval
        w, h, maxval = (int(t) for t in tokens)
        if maxval != 255:
            raise FormatError(f"{path}: unsupported bit depth (maxval {maxval})")
        need = w * h * 3
        if len(data) - i < need:
            raise UnexpectedEof(f"{path}: pixel data truncated")
        q = np.frombuffer(data, dtype=np.uint8, count=need, offset=i).reshape(h, w, 3)
    elif path.suffix.lower() == ".png":
        try:
            im = Image.open(path)
            im.load()
        except Exception as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if im.mode != "RGB":
            raise FormatError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit RGB)")
        q = np.asarray(im)
    else:
        raise InvalidArgument(f"unsupported image extension {path.suffix!r}")
    return q.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Scene manifests

@dataclass
class ViewSpec:
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (4, 4)
    image_path: Path


@dataclass
class SceneManifest:
    cloud_path: Path
    background: np.ndarray
    resolution: tuple  # (width, height)
    views: list
    near: float = 0.01


def save_manifest(manifest: SceneManifest, path) -> None:
    import os

    path = Path(path)
    base = path.parent
    rel = lambda p: os.path.relpath(Path(p).resolve(), base.resolve())
    out = ["splatpatch-scene 1"]
    out.append(f"cloud {rel(manifest.cloud_path)}")
    out.append("background " + " ".join(repr(float(v)) for v in manifest.background))
    out.append(f"resolution {manifest.resolution[0]} {manifest.resolution[1]}")
    out.append(f"near {manifest.near!r}")
    for view in manifest.views:
        out.append("view")
        out.append("intrinsics " + " ".join(repr(float(v)) for v in np.asarray(view.intrinsics).ravel()))
        out.append("extrinsics " + " ".join(repr(float(v)) for v in np.asarray(view.extrinsics).ravel()))
        out.append(f"image {rel(view.image_path)}")
    path.write_text("\n".join(out) + "\n", encoding="ascii")


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: manifest file not found")
    base = path.parent
    lines = path.read_text(encoding="ascii").splitlines()
    if not lines or not lines[0].startswith("splatpatch-scene"):
        raise FormatError(f"{path}: line 1: not a splatpatch scene manifest")
    cloud_path = None
    background = None
    resolution = None
    near = 0.01
    views = []
    current = None  # dict under construction

    def finish_view(ln):
        if current is None:
            return
        vi = len(views)
        for key in ("intrinsics", "extrinsics", "image"):
            if key not in current:
                raise FormatError(f"{path}: view {vi}: missing {key}")
        k = current["intrinsics"]
        p = current["extrinsics"]
        if k.size != 9:
            raise FormatError(f"{path}: view {vi}: intrinsics has {k.size} values, need 9")
        if p.size != 16:
            raise FormatError(f"{path}: view {vi}: extrinsics has {p.size} values, need 16")
        img = base / current["image"]
        if not img.exists():
            raise FormatError(f"{path}: view {vi}: image not found: {img}")
        views.append(ViewSpec(k.reshape(3, 3), p.reshape(4, 4), img))

    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        key = tok[0]
        try:
            if key == "cloud":
                cloud_path = base / line.split(None, 1)[1]
            elif key == "background":
                background = np.array([float(v) for v in tok[1:4]])
            elif key == "resolution":
                resolution = (int(tok[1]), int(tok[2]))
            elif key == "near":
                near = float(tok[1])
            elif key == "view":
                finish_view(ln)
                current = {}
            elif key in ("intrinsics", "extrinsics"):
                if current is None:
                    raise FormatError(f"{path}: line {ln}: {key} outside a view block")
                current[key] = np.array([float(v) for v in tok[1:]])
            elif key == "image":
                if current is None:
                    raise FormatError(f"{path}: line {ln}: image outside a view block")
                current["image"] = line.split(None, 1)[1]
            else:
                raise FormatError(f"{path}: line {ln}: unknown key {key!r}")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: line {ln}: {exc}") from exc
    finish_view(len(lines))
    if cloud_path is None or background is None or resolution is None:
        raise FormatError(f"{path}: manifest must define cloud, background and resolution")
    if not cloud_path.exists():
        raise FormatError(f"{path}: point cloud not found: {cloud_path}")
    if not views:
        raise FormatError(f"{path}: manifest has no views")
    return SceneManifest(cloud_path, background, resolution, views, near)


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"SPTC"
_VERSION = 1


def _write_container(path, kind: str, header: dict, arrays) -> None:
    header = dict(header)
    header["kind"] = kind
    header["arrays"] = [
        {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in arrays
    ]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_container(path):
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: checkpoint file not found")
    data = path.read_bytes()
    if len(data) < 10:
        raise UnexpectedEof(f"{path}: file too short for header")
    if data[:4] != _MAGIC:
        raise BadMagic(f"{path}: bad magic {data[:4]!r}")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != _VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {_VERSION}")
    if len(data) < 10 + hlen:
        raise UnexpectedEof(f"{path}: truncated header")
    try:
        header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    offset = 10 + hlen
    arrays = {}
    for spec in header.get("arrays", []):
        dtype = np.dtype(spec["dtype"]).newbyteorder("<")
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dtype.itemsize * count
        if len(data) - offset < nbytes:
            raise UnexpectedEof(f"{path}: truncated blob for array {spec['name']!r}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(dtype.newbyteorder("="))
        offset += nbytes
    return header, arrays


def save_network_checkpoint(path, module: ModuleParams, step: int = 0, rng_state=None) -> None:
    header = {
        "spec": module.spec(),
        "step": int(step),
        "rng_state": _encode_rng(rng_state),
        "dtype": str(named_params(module)[0][1].dtype),
    }
    _write_container(path, "network", header, named_params(module))


def load_network_checkpoint(path):
    """Returns (ModuleParams, step, rng_state-or-None)."""
    header, arrays = _read_container(path)
    if header.get("kind") != "network":
        raise FormatError(f"{path}: checkpoint holds {header.get('kind')!r}, not network params")
    spec = header["spec"]
    dtype = np.dtype(header.get("dtype", "float32"))
    module = make_module_params(
        np.random.default_rng(0),
        k_split=spec["k_split"],
        encoder_widths=tuple(spec["encoder_widths"]),
        decoder_hiddens=tuple(spec["decoder_hiddens"]),
        neighbor_k=spec["neighbor_k"],
        dtype=dtype,
    )
    for name, arr in named_params(module):
        if name not in arrays:
            raise FormatError(f"{path}: missing parameter blob {name!r}")
        if arrays[name].shape != arr.shape:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, expected {arr.shape}"
            )
        arr[...] = arrays[name]
    return module, header.get("step", 0), _decode_rng(header.get("rng_state"))


def save_gaussian_checkpoint(path, g: Gaussian2DSet) -> None:
    arrays = [
        ("positions", g.positions),
        ("scales", g.scales),
        ("opacities", g.opacities),
        ("sh_colors", g.sh_colors),
        ("normals", g.normals),
        ("angles", g.angles),
    ]
    _write_container(path, "gaussians", {"space_tag": g.space_tag}, arrays)


def load_gaussian_checkpoint(path) -> Gaussian2DSet:
    header, arrays = _read_container(path)
    if header.get("kind") != "gaussians":
        raise FormatError(f"{path}: checkpoint holds {header.get('kind')!r}, not a gaussian set")
    try:
        return Gaussian2DSet(
            positions=arrays["positions"],
            scales=arrays["scales"],
            opacities=arrays["opacities"],
            sh_colors=arrays["sh_colors"],
            normals=arrays["normals"],
            angles=arrays["angles"],
            space_tag=header.get("space_tag", "world"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing gaussian array {exc}") from exc


def _encode_rng(rng_state):
    if rng_state is None:
        return None
    # PCG64 state dicts carry 128-bit ints; store them as decimal strings
    def enc(v):
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, int):
            return str(v)
        return v

    return enc(rng_state)


def _decode_rng(blob):
    if blob is None:
        return None

    def dec(v):
        if isinstance(v, dict):
            return {k: dec(x) for k, x in v.items()}
        if isinstance(v, str) and (v.isdigit() or (v.startswith("-") and v[1:].isdigit())):
            return int(v)
        return v

    return dec(blob)
