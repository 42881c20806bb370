"""Synthetic scenes, camera ingestion and file formats.

Scenes are analytic surfaces (planes, a sphere, a box) with procedural
textures, ray traced exactly into ground-truth images. Cameras follow the
engine convention (+x right, +y down, +z forward); NeRF-style
``transforms.json`` files store OpenGL camera-to-world poses and are
converted on load.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .geometry import Mesh, sample_surface
from .surfel import FLAG_CLONE, SH_C0, Camera, SurfelSet, logit, num_sh_coeffs

SCENE_KINDS = ("textured_plane", "sphere", "plane_plus_sphere", "checker_box")
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class DataIOError(ValueError):
    pass


class TransformsError(DataIOError):
    def __init__(self, message: str, frame: int | None = None, offset: int | None = None):
        self.frame = frame
        self.offset = offset
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class CheckpointError(DataIOError):
    pass


class ImageFormatError(DataIOError):
    pass


class MeshFormatError(DataIOError):
    pass


# ---------------------------------------------------------------------------
# analytic primitives


def checker(uv: np.ndarray, n: int, c0, c1) -> np.ndarray:
    cell = np.floor(uv * n).astype(np.int64)
    odd = ((cell[:, 0] + cell[:, 1]) % 2).astype(bool)
    return np.where(odd[:, None], np.asarray(c1, dtype=np.float64), np.asarray(c0, dtype=np.float64))


class Mottled:
    """Nearest-cell random colors on a fine grid; varies quickly in space."""

    def __init__(self, rng: np.random.Generator, cells: int = 24, lo: float = 0.05, hi: float = 0.95):
        self.cells = cells
        self.grid = rng.uniform(lo, hi, (cells, cells, 3))

    def __call__(self, uv: np.ndarray) -> np.ndarray:
        ij = np.clip(np.floor(uv * self.cells).astype(np.int64), 0, self.cells - 1)
        return self.grid[ij[:, 0], ij[:, 1]]


class Quad:
    """Rectangle ``center + a*e1*[-1,1] + b*e2*[-1,1]`` with a UV texture."""

    def __init__(self, center, e1, e2, a: float, b: float, texture):
        self.c = np.asarray(center, dtype=np.float64)
        self.e1 = np.asarray(e1, dtype=np.float64)
        self.e2 = np.asarray(e2, dtype=np.float64)
        self.n = np.cross(self.e1, self.e2)
        self.a, self.b = float(a), float(b)
        self.texture = texture

    def intersect(self, o, d, near):
        dn = d @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (np.asarray(self.c - o) @ self.n) / dn
        p = o + t[:, None] * d
        lu = (p - self.c) @ self.e1
        lv = (p - self.c) @ self.e2
        hit = (np.abs(dn) > 1e-12) & (t > near) & (np.abs(lu) <= self.a) & (np.abs(lv) <= self.b)
        return np.where(hit, t, np.inf)

    def shade(self, p):
        lu = (p - self.c) @ self.e1
        lv = (p - self.c) @ self.e2
        uv = np.stack([(lu + self.a) / (2 * self.a), (lv + self.b) / (2 * self.b)], axis=1)
        return self.texture(np.clip(uv, 0.0, 1.0 - 1e-12))

    def mesh(self) -> Mesh:
        c, e1, e2 = self.c, self.e1 * self.a, self.e2 * self.b
        v = np.array([c - e1 - e2, c + e1 - e2, c + e1 + e2, c - e1 + e2])
        return Mesh(v, [[0, 1, 2], [0, 2, 3]])


class Sphere:
    def __init__(self, center, radius: float, texture):
        self.c = np.asarray(center, dtype=np.float64)
        self.r = float(radius)
        self.texture = texture

    def intersect(self, o, d, near):
        oc = o - self.c
        a = np.einsum("ij,ij->i", d, d)
        b = 2.0 * np.einsum("ij,ij->i", d, oc)
        c = np.einsum("ij,ij->i", oc, oc) - self.r * self.r
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > near, t0, t1)
        return np.where((disc >= 0) & (t > near), t, np.inf)

    def shade(self, p):
        q = (p - self.c) / self.r
        lon = np.arctan2(q[:, 1], q[:, 0]) / (2 * np.pi) + 0.5
        lat = np.arccos(np.clip(q[:, 2], -1.0, 1.0)) / np.pi
        return self.texture(np.clip(np.stack([lon, lat], axis=1), 0.0, 1.0 - 1e-12))

    def mesh(self, n_lon: int = 64, n_lat: int = 32) -> Mesh:
        return uv_sphere(self.c, self.r, n_lon, n_lat)


def uv_sphere(center, radius: float, n_lon: int = 64, n_lat: int = 32) -> Mesh:
    th = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    ph = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    ring = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    verts = np.concatenate([[[0, 0, 1]], ring, [[0, 0, -1]]]) * radius + np.asarray(center, dtype=np.float64)
    faces = []
    last = len(verts) - 1
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([0, 1 + j, 1 + jn])
        base = 1 + (n_lat - 2) * n_lon
        faces.append([last, base + jn, base + j])
    for i in range(n_lat - 2):
        for j in range(n_lon):
            jn = (j + 1) % n_lon
            a, b = 1 + i * n_lon + j, 1 + i * n_lon + jn
            c, d = a + n_lon, b + n_lon
            faces += [[a, c, b], [b, c, d]]
    return Mesh(verts, faces)


def merge_meshes(meshes: list[Mesh]) -> Mesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def trace(primitives, camera: Camera, near: float = 1e-6, background=(0.0, 0.0, 0.0)):
    """Ray trace primitives; returns color (H, W, 3) and camera z-depth (0 on miss)."""
    R = camera.rotation
    # camera-frame direction has unit z, so the ray parameter is the z-depth
    d = camera.pixel_rays().reshape(-1, 3) @ R
    o = np.broadcast_to(camera.center, d.shape)
    ts = np.stack([p.intersect(o, d, near) for p in primitives], axis=0)
    which = np.argmin(ts, axis=0)
    t = ts[which, np.arange(len(which))]
    hit = np.isfinite(t)
    color = np.tile(np.asarray(background, dtype=np.float64), (len(t), 1))
    for k, prim in enumerate(primitives):
        sel = hit & (which == k)
        if sel.any():
            color[sel] = prim.shade(o[sel] + t[sel, None] * d[sel])
    depth = np.where(hit, t, 0.0)
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), depth.reshape(h, w)


# ---------------------------------------------------------------------------
# scenes


DEFAULT_SCENE_PARAMS = {
    "views": 16,
    "width": 64,
    "height": 64,
    "fov_deg": 45.0,
    "radius": 4.0,
    "elevation_deg": 35.0,
    "elevation_alt_deg": 0.0,
    "checker": 4,
    "mottled": True,
    "mottled_cells": 24,
    "sphere_radius": 0.5,
    "plane_half": 1.5,
    "background": [0.0, 0.0, 0.0],
}


@dataclass
class SceneBundle:
    cameras: list
    gt_images: list
    gt_mesh: Mesh | None = None
    extent: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds: np.ndarray = None  # (2, 3) axis-aligned box around the geometry
    gt_depths: list | None = None
    kind: str = ""
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if len(self.cameras) != len(self.gt_images):
            raise DataIOError(f"{len(self.cameras)} cameras but {len(self.gt_images)} images")
        for i, (c, im) in enumerate(zip(self.cameras, self.gt_images)):
            if im.shape != (c.height, c.width, 3):
                raise DataIOError(f"image {i} has shape {im.shape}, camera expects {(c.height, c.width, 3)}")
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.bounds is None:
            self.bounds = np.stack([self.center - self.extent, self.center + self.extent])


def camera_ring(n: int, radius: float, target, elevation_deg: float, width: int, height: int,
                fov_deg: float, elevation_alt_deg: float = 0.0) -> list[Camera]:
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n):
        az = 2 * np.pi * k / n
        el = math.radians(elevation_deg + (elevation_alt_deg if k % 2 else -elevation_alt_deg))
        eye = target + radius * np.array([math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)])
        cams.append(Camera.look_at(eye, target, width=width, height=height, fov_x_deg=fov_deg))
    return cams


def _plane_texture(p: dict, rng):
    n = int(p["checker"])
    base = lambda uv: checker(uv, n, (0.85, 0.8, 0.7), (0.2, 0.3, 0.45))  # noqa: E731
    if not p["mottled"]:
        return base
    mott = Mottled(rng, int(p["mottled_cells"]))

    def tex(uv):
        c = base(uv)
        m = (uv[:, 0] > 0.55) & (uv[:, 0] < 0.95) & (uv[:, 1] > 0.55) & (uv[:, 1] < 0.95)
        if m.any():
            c[m] = mott(uv[m])
        return c
    return tex


def _sphere_texture(p: dict, rng):
    n = max(2, int(p["checker"]))
    mott = Mottled(rng, int(p["mottled_cells"])) if p["mottled"] else None

    def tex(uv):
        c = checker(uv * [2.0, 1.0], n, (0.9, 0.35, 0.25), (0.95, 0.85, 0.3))
        if mott is not None:
            m = uv[:, 1] > 0.6
            c[m] = mott(uv[m])
        return c
    return tex


def _primitives(kind: str, p: dict, rng):
    a = float(p["plane_half"])
    r = float(p["sphere_radius"])
    ex, ey, ez = np.eye(3)
    if kind == "textured_plane":
        prims = [Quad([0, 0, 0], ex, ey, a, a, _plane_texture(p, rng))]
        return prims, np.zeros(3), np.array([[-a, -a, -0.05], [a, a, 0.05]])
    if kind == "sphere":
        prims = [Sphere([0, 0, 0], r, _sphere_texture(p, rng))]
        return prims, np.zeros(3), np.array([[-r, -r, -r], [r, r, r]])
    if kind == "plane_plus_sphere":
        prims = [Quad([0, 0, 0], ex, ey, a, a, _plane_texture(p, rng)),
                 Sphere([0, 0, r], r, _sphere_texture(p, rng))]
        return prims, np.array([0, 0, r * 0.5]), np.array([[-a, -a, -0.05], [a, a, 2 * r]])
    if kind == "checker_box":
        n = int(p["checker"])
        cols = [(0.9, 0.2, 0.2), (0.2, 0.8, 0.3), (0.25, 0.35, 0.9), (0.9, 0.8, 0.2), (0.8, 0.3, 0.8), (0.2, 0.8, 0.8)]
        prims = []
        for k, (c, e1, e2) in enumerate([(ex, ey, ez), (-ex, ez, ey), (ey, ez, ex), (-ey, ex, ez),
                                         (ez, ex, ey), (-ez, ey, ex)]):
            tex = (lambda col: lambda uv: checker(uv, n, col, (0.1, 0.1, 0.1)))(cols[k])
            prims.append(Quad(r * c, e1, e2, r, r, tex))
        return prims, np.zeros(3), np.array([[-r, -r, -r], [r, r, r]])
    raise DataIOError(f"unknown scene kind {kind!r}; expected one of {', '.join(SCENE_KINDS)}")


def make_scene(kind: str, params: dict | None = None, seed: int = 0) -> SceneBundle:
    """Analytic scene with exact ray-traced ground truth and a camera ring."""
    if kind not in SCENE_KINDS:
        raise DataIOError(f"unknown scene kind {kind!r}; expected one of {', '.join(SCENE_KINDS)}")
    unknown = set(params or {}) - set(DEFAULT_SCENE_PARAMS)
    if unknown:
        raise DataIOError(f"unknown scene parameters: {sorted(unknown)}")
    p = {**DEFAULT_SCENE_PARAMS, **(params or {})}
    if int(p["views"]) < 1 or int(p["width"]) < 1 or int(p["height"]) < 1:
        raise DataIOError("views, width and height must be positive")
    rng = np.random.default_rng(seed)
    prims, center, bounds = _primitives(kind, p, rng)
    cams = camera_ring(int(p["views"]), float(p["radius"]), center, float(p["elevation_deg"]),
                       int(p["width"]), int(p["height"]), float(p["fov_deg"]), float(p["elevation_alt_deg"]))
    images, depths = [], []
    for cam in cams:
        c, d = trace(prims, cam, background=p["background"])
        images.append(c)
        depths.append(d)
    mesh = merge_meshes([pr.mesh() for pr in prims])
    extent = float(np.linalg.norm(bounds - center, axis=1).max())
    return SceneBundle(cams, images, mesh, extent, center, bounds, depths, kind, p, seed)


# ---------------------------------------------------------------------------
# initialization


def init_surfels(bundle: SceneBundle, n_points: int = 1000, sh_degree: int = 3, seed: int = 0,
                 opacity: float = 0.1) -> SurfelSet:
    """Seed surfels on the GT mesh (or in the bounding sphere) with colors from the nearest view."""
    rng = np.random.default_rng(seed)
    if bundle.gt_mesh is not None and len(bundle.gt_mesh):
        pts = sample_surface(bundle.gt_mesh, n_points, seed)
    else:
        v = rng.normal(size=(n_points, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = bundle.center + bundle.extent * v * rng.random(n_points)[:, None] ** (1 / 3)
    k = min(4, len(pts))
    if k > 1:
        dist, _ = cKDTree(pts).query(pts, k=k)
        nn = dist[:, 1:].mean(axis=1)
    else:
        nn = np.full(len(pts), 0.01 * bundle.extent)
    nn = np.maximum(nn, 1e-7)

    colors = np.full((len(pts), 3), 0.5)
    centers = np.stack([c.center for c in bundle.cameras])
    order = np.argsort(np.linalg.norm(pts[:, None, :] - centers[None], axis=2), axis=1, kind="stable")
    assigned = np.zeros(len(pts), dtype=bool)
    for rank in range(len(bundle.cameras)):
        for v, (cam, img) in enumerate(zip(bundle.cameras, bundle.gt_images)):
            sel = ~assigned & (order[:, rank] == v)
            if not sel.any():
                continue
            px, z = cam.project(pts[sel])
            ix, iy = np.rint(px[:, 0]), np.rint(px[:, 1])
            ok = (z > 0) & (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
            idx = np.flatnonzero(sel)[ok]
            colors[idx] = img[iy[ok].astype(int), ix[ok].astype(int)]
            assigned[idx] = True

    q = rng.normal(size=(len(pts), 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((len(pts), num_sh_coeffs(sh_degree), 3))
    sh[:, 0] = (colors - 0.5) / SH_C0
    return SurfelSet(pts, q, np.log(np.repeat(nn[:, None], 2, axis=1)),
                     np.full(len(pts), logit(opacity)), sh, np.arange(len(pts)), active_degree=0)


# ---------------------------------------------------------------------------
# images


def write_png(path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None].repeat(3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got {a.shape}")
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, "RGB").save(path, format="PNG")


def read_png(path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """8-bit PNG as floats in [0, 1]; gray is replicated, alpha is composited over ``background``."""
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as e:
        raise ImageFormatError(f"cannot read image {path}: {e}") from e
    mode = im.mode
    if mode == "P":
        im = im.convert("RGBA")
        mode = "RGBA"
    if mode not in ("L", "LA", "RGB", "RGBA"):
        raise ImageFormatError(f"unsupported image mode {mode!r} in {path}; only 8-bit gray/RGB(A)")
    a = np.asarray(im, dtype=np.float64) / 255.0
    if mode == "L":
        return np.repeat(a[..., None], 3, axis=2)
    if mode == "LA":
        a = np.concatenate([np.repeat(a[..., :1], 3, axis=2), a[..., 1:]], axis=2)
    if a.shape[2] == 4:
        alpha = a[..., 3:]
        return a[..., :3] * alpha + np.asarray(background, dtype=np.float64) * (1 - alpha)
    return a


# ---------------------------------------------------------------------------
# meshes


def write_ply(path, mesh: Mesh) -> None:
    v = mesh.vertices.astype("<f4")
    f = mesh.faces.astype("<i4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    face_rec = np.empty(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face_rec["n"] = 3
    face_rec["idx"] = f
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(v.tobytes())
        fh.write(face_rec.tobytes())


def read_ply(path) -> Mesh:
    """Binary little-endian PLY with float xyz vertices and triangle faces."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MeshFormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii", "replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise MeshFormatError(f"{path}: only binary_little_endian PLY is supported")
    elements, cur = [], None
    for ln in lines:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "element":
            cur = [tok[1], int(tok[2]), []]
            elements.append(cur)
        elif tok[0] == "property" and cur is not None:
            cur[2].append(tok[1:])
    vdtype = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}
    pos = end + len(b"end_header\n")
    verts = faces = None
    for name, count, props in elements:
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                dt = np.dtype([(p[-1], vdtype[p[0]]) for p in props])
            except KeyError as e:
                raise MeshFormatError(f"{path}: unsupported vertex property type {e}") from None
            if not {"x", "y", "z"} <= set(names):
                raise MeshFormatError(f"{path}: vertex element lacks x/y/z")
            need = dt.itemsize * count
            if len(data) < pos + need:
                raise MeshFormatError(f"{path}: truncated vertex data")
            rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
            pos += need
        elif name == "face":
            if len(props) != 1 or props[0][:3] not in (["list", "uchar", "int"], ["list", "uint8", "int32"]):
                raise MeshFormatError(f"{path}: only 'list uchar int' faces are supported")
            dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            need = dt.itemsize * count
            if len(data) < pos + need:
                raise MeshFormatError(f"{path}: truncated face data")
            rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            if count and np.any(rec["n"] != 3):
                raise MeshFormatError(f"{path}: only triangle faces are supported")
            faces = rec["idx"]
            pos += need
        else:
            raise MeshFormatError(f"{path}: unsupported element {name!r}")
    if verts is None:
        raise MeshFormatError(f"{path}: no vertex element")
    mesh = Mesh(verts, faces if faces is not None else np.zeros((0, 3)))
    try:
        mesh.validate()
    except ValueError as e:
        raise MeshFormatError(f"{path}: {e}") from None
    return mesh


# ---------------------------------------------------------------------------
# transforms.json


def camera_to_c2w_gl(cam: Camera) -> np.ndarray:
    return np.linalg.inv(cam.world_to_cam) @ GL_TO_CV


def load_transforms_json(path) -> tuple[list[Camera], list[Path]]:
    """Cameras and image paths from a NeRF-Synthetic style file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise TransformsError(f"cannot read {path}: {e}") from e
    text = raw.decode("utf-8", errors="replace")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise TransformsError(f"malformed JSON in {path}: {e.msg}", offset=offset) from None
    if not isinstance(doc, dict) or "camera_angle_x" not in doc:
        raise TransformsError(f"{path}: missing 'camera_angle_x'")
    frames = doc.get("frames")
    if not isinstance(frames, list):
        raise TransformsError(f"{path}: missing 'frames' list")
    angle = float(doc["camera_angle_x"])
    cams, paths = [], []
    for i, fr in enumerate(frames):
        if not isinstance(fr, dict) or "transform_matrix" not in fr or "file_path" not in fr:
            raise TransformsError("frame lacks 'file_path' or 'transform_matrix'", frame=i)
        img_path = path.parent / fr["file_path"]
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        w, h = doc.get("w"), doc.get("h")
        if w is None or h is None:
            try:
                with Image.open(img_path) as im:
                    w, h = im.size
            except OSError as e:
                raise TransformsError(f"unreadable image {img_path}: {e}", frame=i) from None
        m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise TransformsError("transform_matrix must be a finite 4x4 matrix", frame=i)
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise TransformsError("transform_matrix is not invertible", frame=i)
        c2w_cv = m @ GL_TO_CV
        w2c = np.linalg.inv(c2w_cv)
        f = 0.5 * w / math.tan(0.5 * angle)
        cams.append(Camera(int(w), int(h), f, f, w / 2.0, h / 2.0, w2c))
        paths.append(img_path)
    return cams, paths


def export_transforms_json(cameras: list[Camera], file_paths: list[str], path) -> None:
    if not cameras:
        raise TransformsError("no cameras to export")
    c0 = cameras[0]
    doc = {
        "camera_angle_x": 2.0 * math.atan(0.5 * c0.width / c0.fx),
        "w": c0.width,
        "h": c0.height,
        "frames": [{"file_path": fp, "transform_matrix": camera_to_c2w_gl(c).tolist()}
                   for fp, c in zip(file_paths, cameras)],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def save_scene(bundle: SceneBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"r_{i:03d}.png" for i in range(len(bundle.cameras))]
    for name, img in zip(names, bundle.gt_images):
        write_png(out / name, img)
    export_transforms_json(bundle.cameras, [f"./{n}" for n in names], out / "transforms.json")
    if bundle.gt_mesh is not None:
        write_ply(out / "gt_mesh.ply", bundle.gt_mesh)
    info = {"kind": bundle.kind, "params": bundle.params, "seed": bundle.seed, "extent": bundle.extent,
            "center": bundle.center.tolist(), "bounds": bundle.bounds.tolist()}
    (out / "scene.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def load_scene(scene_dir) -> SceneBundle:
    d = Path(scene_dir)
    cams, paths = load_transforms_json(d / "transforms.json")
    images = []
    for i, p in enumerate(paths):
        try:
            images.append(read_png(p))
        except ImageFormatError as e:
            raise TransformsError(str(e), frame=i) from None
    mesh = read_ply(d / "gt_mesh.ply") if (d / "gt_mesh.ply").exists() else None
    info = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else {}
    if "extent" in info:
        center = np.asarray(info["center"])
        extent = float(info["extent"])
        bounds = np.asarray(info["bounds"])
    else:
        centers = np.stack([c.center for c in cams])
        center = centers.mean(axis=0)
        extent = 1.1 * float(np.linalg.norm(centers - center, axis=1).max())
        bounds = None
    return SceneBundle(cams, images, mesh, extent, center, bounds, None, info.get("kind", ""),
                       info.get("params", {}), int(info.get("seed", 0)))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"2GSR"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def _record_dtype(k: int) -> np.dtype:
    return np.dtype([("mu", "<f4", (3,)), ("quat", "<f4", (4,)), ("log_scale", "<f4", (2,)),
                     ("raw_opacity", "<f4"), ("sh", "<f4", (3 * k,)), ("id", "<u8"), ("flags", "u1")])


def checkpoint_bytes(surfels: SurfelSet, meta: dict | None = None) -> bytes:
    deg = surfels.max_degree
    k = num_sh_coeffs(deg)
    rec = np.empty(len(surfels), dtype=_record_dtype(k))
    rec["mu"] = surfels.mu
    rec["quat"] = surfels.quat
    rec["log_scale"] = surfels.log_scale
    rec["raw_opacity"] = surfels.raw_opacity
    rec["sh"] = surfels.sh.reshape(len(surfels), 3 * k)
    rec["id"] = surfels.ids
    rec["flags"] = surfels.flags
    full = dict(meta or {})
    full["surfels"] = {"active_degree": int(surfels.active_degree), "parent": surfels.parent.tolist()}
    blob = json.dumps(full, sort_keys=True, allow_nan=True).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, deg, len(surfels)) + rec.tobytes() + struct.pack("<I", len(blob)) + blob


def checkpoint_write(surfels: SurfelSet, meta: dict | None, path) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(surfels, meta))
    os.replace(tmp, path)


def checkpoint_read(path) -> tuple[SurfelSet, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data, str(path))


def checkpoint_from_bytes(data: bytes, name: str = "<bytes>") -> tuple[SurfelSet, dict]:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{name}: truncated header, expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, deg, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported version {version}, this reader handles {VERSION}")
    if deg > 3:
        raise CheckpointError(f"{name}: unsupported SH degree {deg}")
    k = num_sh_coeffs(deg)
    dt = _record_dtype(k)
    body = _HEADER.size + dt.itemsize * count
    if len(data) < body + 4:
        raise CheckpointError(f"{name}: truncated, expected at least {body + 4} bytes, got {len(data)}")
    (mlen,) = struct.unpack_from("<I", data, body)
    if len(data) != body + 4 + mlen:
        raise CheckpointError(f"{name}: truncated, expected {body + 4 + mlen} bytes, got {len(data)}")
    try:
        meta = json.loads(data[body + 4:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{name}: corrupt metadata block: {e}") from None
    rec = np.frombuffer(data, dtype=dt, count=count, offset=_HEADER.size)
    info = meta.pop("surfels", {})
    parent = info.get("parent")
    s = SurfelSet(
        rec["mu"].astype(np.float64), rec["quat"].astype(np.float64),
        rec["log_scale"].astype(np.float64), rec["raw_opacity"].astype(np.float64),
        rec["sh"].astype(np.float64).reshape(count, k, 3), rec["id"].astype(np.int64),
        rec["flags"].copy(), None if parent is None else np.asarray(parent, dtype=np.int64),
        int(info.get("active_degree", deg)),
    )
    return s, meta


def clone_count(surfels: SurfelSet) -> int:
    return int(np.count_nonzero(surfels.flags & FLAG_CLONE))
