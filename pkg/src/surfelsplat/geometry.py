"""Mesh extraction and evaluation metrics.

TSDF fusion of rendered depth maps, marching cubes, sampled Chamfer
distance / F-score, PSNR and SSIM, and the per-surfel coverage and
opacity statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes as _skimage_mc

from .losses import ssim as _ssim
from .surfel import Camera, SurfelSet


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def validate(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh has non-finite vertices")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


# ---------------------------------------------------------------------------
# TSDF


@dataclass
class TSDFVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float) -> "TSDFVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, float(voxel_size), tuple(dims))

    def grid_points(self) -> np.ndarray:
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1).reshape(-1, 3)

    def copy(self) -> "TSDFVolume":
        return TSDFVolume(self.origin.copy(), self.voxel_size, self.dims, self.tsdf.copy(), self.weight.copy())


def tsdf_integrate(volume: TSDFVolume, depth: np.ndarray, camera: Camera, trunc: float | None = None,
                   accum: np.ndarray | None = None, accum_threshold: float = 0.5) -> TSDFVolume:
    """Fuse one depth map (camera z-depth) into ``volume`` in place, weight 1 per observation."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (camera.height, camera.width):
        raise ValueError(f"depth map {depth.shape} does not match camera {(camera.height, camera.width)}")
    if accum is not None and np.shape(accum) != depth.shape:
        raise ValueError("accumulation map does not match depth map")
    trunc = 4.0 * volume.voxel_size if trunc is None else trunc
    pts = volume.grid_points()
    pc = camera.to_camera(pts)
    z = pc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    px = np.rint(camera.fx * pc[:, 0] / zs + camera.cx)
    py = np.rint(camera.fy * pc[:, 1] / zs + camera.cy)
    inside = front & (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    ix = np.where(inside, px, 0).astype(np.int64)
    iy = np.where(inside, py, 0).astype(np.int64)
    d = depth[iy, ix]
    ok = inside & (d > 0)
    if accum is not None:
        ok &= np.asarray(accum)[iy, ix] >= accum_threshold
    sdf = d - z
    ok &= sdf >= -trunc
    t = np.minimum(1.0, sdf / trunc)
    tsdf = volume.tsdf.reshape(-1)
    w = volume.weight.reshape(-1)
    sel = np.flatnonzero(ok)
    tsdf[sel] = (tsdf[sel] * w[sel] + t[sel]) / (w[sel] + 1.0)
    w[sel] += 1.0
    return volume


def marching_cubes(volume: TSDFVolume, iso: float = 0.0) -> Mesh:
    """Classic marching cubes on cells whose eight corners all carry weight."""
    observed = volume.weight > 0
    cell = observed.copy()
    cell[:-1, :, :] &= observed[1:, :, :]
    cell[:, :-1, :] &= cell[:, 1:, :]
    cell[:, :, :-1] &= cell[:, :, 1:]
    cell[-1, :, :] = False
    cell[:, -1, :] = False
    cell[:, :, -1] = False
    if not cell.any():
        return Mesh.empty()
    vals = volume.tsdf[observed]
    if vals.min() > iso or vals.max() < iso:
        return Mesh.empty()
    # skimage enables the cell spanning (i-1, i) for mask entry i, so shift by one
    mask = np.zeros_like(cell)
    mask[1:, 1:, 1:] = cell[:-1, :-1, :-1]
    try:
        verts, faces, _, _ = _skimage_mc(volume.tsdf, level=iso, method="lorensen", mask=mask,
                                         spacing=(volume.voxel_size,) * 3)
    except (RuntimeError, ValueError):
        return Mesh.empty()
    return Mesh(verts.astype(np.float64) + volume.origin, faces)


# ---------------------------------------------------------------------------
# surface distances


def sample_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples on the mesh surface."""
    if len(mesh) == 0:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[tri]]
    return ((1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1]
            + (r1 * r2)[:, None] * v[:, 2])


@dataclass
class ChamferResult:
    chamfer: float
    precision: float
    recall: float
    fscore: float
    tau: float
    acc: float  # mean distance pred -> gt
    comp: float  # mean distance gt -> pred


def chamfer_and_fscore(mesh_pred: Mesh, mesh_gt: Mesh, tau: float, n_samples: int = 100_000,
                       seed: int = 0) -> ChamferResult:
    if len(mesh_pred) == 0 or len(mesh_gt) == 0:
        raise ValueError("chamfer distance needs two non-empty meshes")
    pa = sample_surface(mesh_pred, n_samples, seed)
    # same seed on both sides: identical meshes give identical samples and CD = 0
    pb = sample_surface(mesh_gt, n_samples, seed)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    acc, comp = float(d_ab.mean()), float(d_ba.mean())
    precision = float(np.mean(d_ab < tau))
    recall = float(np.mean(d_ba < tau))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ChamferResult(0.5 * (acc + comp), precision, recall, f, tau, acc, comp)


# ---------------------------------------------------------------------------
# image metrics


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean windowed SSIM (11x11 Gaussian, sigma 1.5), averaged over channels."""
    return _ssim(img_a, img_b)


# ---------------------------------------------------------------------------
# attribute statistics


@dataclass
class AttributeStats:
    ka: np.ndarray
    alpha: np.ndarray
    mean_ka: float
    median_ka: float
    std_ka: float
    mean_alpha: float
    median_alpha: float
    ka_hist: tuple
    alpha_hist: tuple

    def summary(self) -> dict:
        return {"mean_Ka": self.mean_ka, "median_Ka": self.median_ka, "std_Ka": self.std_ka,
                "mean_alpha": self.mean_alpha, "median_alpha": self.median_alpha}


def attribute_stats(surfels: SurfelSet, bins: int = 20) -> AttributeStats:
    """Spatial coverage K_a = s_u * s_v and opacity of every surfel."""
    if len(surfels) == 0:
        raise ValueError("attribute statistics need at least one surfel")
    s = surfels.scales
    ka = s[:, 0] * s[:, 1]
    alpha = surfels.opacities
    return AttributeStats(
        ka, alpha, float(ka.mean()), float(np.median(ka)), float(ka.std()),
        float(alpha.mean()), float(np.median(alpha)),
        np.histogram(np.log10(ka), bins=bins), np.histogram(alpha, bins=bins, range=(0.0, 1.0)),
    )
