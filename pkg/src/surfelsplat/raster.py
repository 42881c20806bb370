"""Tile-based forward rasterizer and the opacity-free footprint pass.

Surfels are globally sorted by the camera depth of their centers (ties by
id), binned into 16x16 tiles by a conservative screen-space bound, and
composited front to back per pixel.  Every pixel's contribution list is
kept so losses and the backward pass can replay it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .surfel import (
    HIT,
    Camera,
    SurfelSet,
    build_h_matrices,
    filtered_gaussian,
    intersect_core,
    rigid_apply,
    screen_matrices,
    sh_basis,
    sh_raw,
)


@dataclass
class RasterOptions:
    near: float = 0.01
    cutoff: float = 3.0
    lowpass_sigma: float | None = 0.7071
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4  # early termination threshold, 0 disables
    max_contrib: int = 64
    tile_size: int = 16
    depth_eps: float = 1e-6
    background: tuple = (0.0, 0.0, 0.0)
    tiled: bool = True

    @property
    def lp_inv_var(self) -> float:
        return 1.0 / self.lowpass_sigma**2 if self.lowpass_sigma else 0.0


@dataclass
class ViewData:
    """Per-view, per-surfel quantities shared by forward and backward."""

    order: np.ndarray  # sorted position -> surfel index
    M: np.ndarray  # (N, 4, 4) screen matrices, surfel order
    center_px: np.ndarray  # (N, 2)
    center_cam: np.ndarray  # (N, 3)
    center_ok: np.ndarray  # (N,) bool
    alpha: np.ndarray
    color_raw: np.ndarray  # (N, 3) before clamping
    colors: np.ndarray
    basis: np.ndarray  # (N, K)
    view_dirs: np.ndarray  # (N, 3) unit, camera center -> mu
    view_dist: np.ndarray
    normals: np.ndarray  # (N, 3) camera-frame, camera-facing
    normal_sign: np.ndarray  # (N,) +1/-1 applied to t_w
    bbox: np.ndarray  # (N, 4) inclusive pixel bounds x0, y0, x1, y1; x1 < x0 means culled
    degree: int


@dataclass
class RenderOutputs:
    color: np.ndarray
    depth_mean: np.ndarray
    depth_median: np.ndarray
    accum: np.ndarray
    normal_splat: np.ndarray
    t_final: np.ndarray
    count: np.ndarray  # (H, W) number of contributions kept
    overflow: np.ndarray  # (H, W) 1 where the per-pixel cap was hit
    idx: np.ndarray  # (H, W, cap) surfel index
    weight: np.ndarray
    trans: np.ndarray
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray  # alpha * ghat
    ghat: np.ndarray
    lowpass: np.ndarray  # bool, screen-space branch active
    view: ViewData = field(repr=False)
    ids: np.ndarray = field(repr=False)
    camera: Camera = field(repr=False)
    options: RasterOptions = field(repr=False)

    @property
    def overflow_count(self) -> int:
        return int(self.overflow.sum())

    def per_pixel(self, x: int, y: int) -> list[tuple]:
        """(surfel_id, weight, T, z, u, v) for pixel column x, row y."""
        n = self.count[y, x]
        return [
            (int(self.ids[self.idx[y, x, k]]), float(self.weight[y, x, k]), float(self.trans[y, x, k]),
             float(self.z[y, x, k]), float(self.u[y, x, k]), float(self.v[y, x, k]))
            for k in range(n)
        ]


def prepare_view(surfels: SurfelSet, camera: Camera, options: RasterOptions,
                 degree: int | None = None) -> ViewData:
    n = len(surfels)
    deg = surfels.active_degree if degree is None else degree
    R = surfels.rotations
    H = build_h_matrices(surfels)
    M = screen_matrices(camera, H)
    cam_c = camera.center
    center_cam = rigid_apply(camera.rotation, camera.translation, surfels.mu)
    center_ok = center_cam[:, 2] > options.near
    zc = np.where(center_ok, center_cam[:, 2], 1.0)
    center_px = np.stack([camera.fx * center_cam[:, 0] / zc + camera.cx,
                          camera.fy * center_cam[:, 1] / zc + camera.cy], axis=1)
    order = np.lexsort((surfels.ids, center_cam[:, 2])) if n else np.zeros(0, dtype=np.int64)

    d = surfels.mu - cam_c
    dist = np.sqrt(np.sum(d * d, axis=1))
    dist = np.where(dist > 0, dist, 1.0)
    dirs = d / dist[:, None]
    basis = sh_basis(dirs, deg)
    color_raw = sh_raw(surfels.sh, basis)
    colors = np.maximum(color_raw, 0.0)

    tw_cam = rigid_apply(camera.rotation, np.zeros(3), R[:, :, 2])
    facing = np.sum(tw_cam * center_cam, axis=1)
    sign = np.where(facing > 0, -1.0, 1.0)
    normals = tw_cam * sign[:, None]

    bbox = _screen_bounds(surfels, R, camera, options)
    return ViewData(order, M, center_px, center_cam, center_ok, surfels.opacities, color_raw, colors,
                    basis, dirs, dist, normals, sign, bbox, deg)


def _screen_bounds(surfels, R, camera, options) -> np.ndarray:
    """Conservative pixel bounds of the cutoff square of every surfel."""
    n = len(surfels)
    s = surfels.scales * options.cutoff
    corners = np.empty((n, 4, 3))
    for k, (a, b) in enumerate(((-1, -1), (-1, 1), (1, -1), (1, 1))):
        corners[:, k] = surfels.mu + a * s[:, 0:1] * R[:, :, 0] + b * s[:, 1:2] * R[:, :, 1]
    pc = rigid_apply(camera.rotation, camera.translation, corners.reshape(-1, 3)).reshape(n, 4, 3)
    z = pc[..., 2]
    bbox = np.empty((n, 4), dtype=np.int64)
    all_front = np.all(z > options.near, axis=1)
    any_front = np.any(z > options.near, axis=1)
    zs = np.where(z > options.near, z, 1.0)
    px = camera.fx * pc[..., 0] / zs + camera.cx
    py = camera.fy * pc[..., 1] / zs + camera.cy
    with np.errstate(invalid="ignore"):
        x0 = np.floor(px.min(axis=1)) - 1
        x1 = np.ceil(px.max(axis=1)) + 1
        y0 = np.floor(py.min(axis=1)) - 1
        y1 = np.ceil(py.max(axis=1)) + 1
    big = 1 << 30
    x0 = np.clip(np.nan_to_num(x0, nan=-big, posinf=big, neginf=-big), -big, big)
    x1 = np.clip(np.nan_to_num(x1, nan=big, posinf=big, neginf=-big), -big, big)
    y0 = np.clip(np.nan_to_num(y0, nan=-big, posinf=big, neginf=-big), -big, big)
    y1 = np.clip(np.nan_to_num(y1, nan=big, posinf=big, neginf=-big), -big, big)
    bbox[:, 0] = np.maximum(x0, 0)
    bbox[:, 1] = np.maximum(y0, 0)
    bbox[:, 2] = np.minimum(x1, camera.width - 1)
    bbox[:, 3] = np.minimum(y1, camera.height - 1)
    partial = any_front & ~all_front
    bbox[partial] = (0, 0, camera.width - 1, camera.height - 1)
    bbox[~any_front] = (1, 1, 0, 0)
    return bbox


@njit(cache=True)
def _bin_tiles(order, bbox, ntx, nty, tile):
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for j in order:
        x0, y0, x1, y1 = bbox[j, 0], bbox[j, 1], bbox[j, 2], bbox[j, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * ntx + tx + 1] += 1
    start = np.cumsum(counts)
    items = np.empty(start[-1], dtype=np.int64)
    fill = start[:-1].copy()
    for j in order:
        x0, y0, x1, y1 = bbox[j, 0], bbox[j, 1], bbox[j, 2], bbox[j, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * ntx + tx
                items[fill[t]] = j
                fill[t] += 1
    return start, items


@njit(parallel=True, cache=True)
def _render_kernel(M, cpx, cok, alpha, colors, normals, bbox, tile_start, tile_items, ntx, tile,
                   height, width, near, cutoff2, lp_inv_var, alpha_min, t_min, cap, bg, eps,
                   color, depth_mean, depth_median, accum, normal, t_final, count, overflow,
                   idx, weight, trans, zz, uu, vv, aa, gg, lp):
    ntiles = len(tile_start) - 1
    for t in prange(ntiles):
        tx0 = (t % ntx) * tile
        ty0 = (t // ntx) * tile
        for py in range(ty0, min(ty0 + tile, height)):
            for px in range(tx0, min(tx0 + tile, width)):
                x = float(px)
                y = float(py)
                T = 1.0
                n = 0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                ws = 0.0
                wz = 0.0
                nx = 0.0
                ny = 0.0
                nz = 0.0
                med = 0.0
                have_med = False
                last_z = 0.0
                for q in range(tile_start[t], tile_start[t + 1]):
                    j = tile_items[q]
                    if px < bbox[j, 0] or px > bbox[j, 2] or py < bbox[j, 1] or py > bbox[j, 3]:
                        continue
                    status, u, v, z = intersect_core(M[j], x, y, near, cutoff2)
                    if status != HIT:
                        continue
                    g, br = filtered_gaussian(u, v, x, y, cpx[j, 0], cpx[j, 1], lp_inv_var, cok[j])
                    a = alpha[j] * g
                    if a < alpha_min:
                        continue
                    if n == cap:
                        overflow[py, px] = 1
                        break
                    w = T * a
                    idx[py, px, n] = j
                    weight[py, px, n] = w
                    trans[py, px, n] = T
                    zz[py, px, n] = z
                    uu[py, px, n] = u
                    vv[py, px, n] = v
                    aa[py, px, n] = a
                    gg[py, px, n] = g
                    lp[py, px, n] = br
                    cr += w * colors[j, 0]
                    cg += w * colors[j, 1]
                    cb += w * colors[j, 2]
                    ws += w
                    wz += w * z
                    nx += w * normals[j, 0]
                    ny += w * normals[j, 1]
                    nz += w * normals[j, 2]
                    if T > 0.5 and (not have_med or z > med):
                        med = z
                        have_med = True
                    last_z = z
                    T = T * (1.0 - a)
                    n += 1
                    if T < t_min:
                        break
                color[py, px, 0] = cr + T * bg[0]
                color[py, px, 1] = cg + T * bg[1]
                color[py, px, 2] = cb + T * bg[2]
                accum[py, px] = ws
                depth_mean[py, px] = wz / (ws + eps) if n > 0 else 0.0
                if n > 0:
                    depth_median[py, px] = med if have_med else last_z
                else:
                    depth_median[py, px] = 0.0
                normal[py, px, 0] = nx
                normal[py, px, 1] = ny
                normal[py, px, 2] = nz
                t_final[py, px] = T
                count[py, px] = n


def render(surfels: SurfelSet, camera: Camera, options: RasterOptions | None = None,
           view: ViewData | None = None) -> RenderOutputs:
    """Composite ``surfels`` into ``camera``; see RenderOutputs for the maps produced."""
    options = options or RasterOptions()
    if view is None:
        view = prepare_view(surfels, camera, options)
    h, w, cap = camera.height, camera.width, options.max_contrib
    if options.tiled:
        tile = options.tile_size
        ntx = (w + tile - 1) // tile
        nty = (h + tile - 1) // tile
        bbox = view.bbox
    else:
        # one tile covering the image, no screen-space culling
        tile = max(w, h)
        ntx = nty = 1
        bbox = np.tile(np.array([0, 0, w - 1, h - 1], dtype=np.int64), (len(surfels), 1))
    tile_start, tile_items = _bin_tiles(view.order.astype(np.int64), bbox, ntx, nty, tile)

    out = dict(
        color=np.zeros((h, w, 3)), depth_mean=np.zeros((h, w)), depth_median=np.zeros((h, w)),
        accum=np.zeros((h, w)), normal_splat=np.zeros((h, w, 3)), t_final=np.ones((h, w)),
        count=np.zeros((h, w), dtype=np.int64), overflow=np.zeros((h, w), dtype=np.int64),
        idx=np.zeros((h, w, cap), dtype=np.int64), weight=np.zeros((h, w, cap)),
        trans=np.zeros((h, w, cap)), z=np.zeros((h, w, cap)), u=np.zeros((h, w, cap)),
        v=np.zeros((h, w, cap)), a=np.zeros((h, w, cap)), ghat=np.zeros((h, w, cap)),
        lowpass=np.zeros((h, w, cap), dtype=np.bool_),
    )
    if len(surfels):
        _render_kernel(
            view.M, view.center_px, view.center_ok, view.alpha, view.colors, view.normals, bbox,
            tile_start, tile_items, ntx, tile, h, w, options.near, options.cutoff**2,
            options.lp_inv_var, options.alpha_min, options.t_min, cap,
            np.asarray(options.background, dtype=np.float64), options.depth_eps,
            out["color"], out["depth_mean"], out["depth_median"], out["accum"], out["normal_splat"],
            out["t_final"], out["count"], out["overflow"], out["idx"], out["weight"], out["trans"],
            out["z"], out["u"], out["v"], out["a"], out["ghat"], out["lowpass"],
        )
    else:
        out["color"][:] = np.asarray(options.background, dtype=np.float64)
    return RenderOutputs(**out, view=view, ids=surfels.ids.copy(), camera=camera, options=options)


# ---------------------------------------------------------------------------
# footprint pass


@dataclass
class FootprintRecords:
    """Occupied pixels of every surfel in one view, CSR layout.

    Pixels of surfel ``i`` are ``pixels[offsets[i]:offsets[i+1]]`` as
    (x, y) pairs in row-major order; ``colors[i]`` is its SH color.
    """

    view_id: int
    offsets: np.ndarray
    pixels: np.ndarray
    colors: np.ndarray

    def pixels_of(self, i: int) -> np.ndarray:
        return self.pixels[self.offsets[i]:self.offsets[i + 1]]

    def visible(self) -> np.ndarray:
        return np.diff(self.offsets) > 0


@njit(parallel=True, cache=True)
def _footprint_count(M, bbox, near, cutoff2):
    n = M.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        c = 0
        for py in range(bbox[i, 1], bbox[i, 3] + 1):
            for px in range(bbox[i, 0], bbox[i, 2] + 1):
                status, u, v, z = intersect_core(M[i], float(px), float(py), near, cutoff2)
                if status == HIT:
                    c += 1
        counts[i] = c
    return counts


@njit(parallel=True, cache=True)
def _footprint_fill(M, bbox, near, cutoff2, offsets, pixels):
    n = M.shape[0]
    for i in prange(n):
        k = offsets[i]
        for py in range(bbox[i, 1], bbox[i, 3] + 1):
            for px in range(bbox[i, 0], bbox[i, 2] + 1):
                status, u, v, z = intersect_core(M[i], float(px), float(py), near, cutoff2)
                if status == HIT:
                    pixels[k, 0] = px
                    pixels[k, 1] = py
                    k += 1


def footprint_pass(surfels: SurfelSet, cameras: list[Camera], gt_images=None,
                   options: RasterOptions | None = None) -> list[FootprintRecords]:
    """Pixels each surfel's splat covers in each view, ignoring opacity and occlusion."""
    options = options or RasterOptions()
    if gt_images is not None:
        if len(gt_images) != len(cameras):
            raise ValueError("one ground-truth image per camera is required")
        for cam, img in zip(cameras, gt_images):
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("ground-truth image does not match camera dimensions")
    records = []
    for v, cam in enumerate(cameras):
        view = prepare_view(surfels, cam, options)
        cutoff2 = options.cutoff**2
        counts = _footprint_count(view.M, view.bbox, options.near, cutoff2)
        offsets = np.zeros(len(surfels) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        pixels = np.zeros((offsets[-1], 2), dtype=np.int64)
        _footprint_fill(view.M, view.bbox, options.near, cutoff2, offsets, pixels)
        records.append(FootprintRecords(v, offsets, pixels, view.colors))
    return records


@njit(cache=True)
def _accumulate_error(offsets, pixels, colors, gt, out):
    for i in range(len(offsets) - 1):
        e = out[i]
        for k in range(offsets[i], offsets[i + 1]):
            px = pixels[k, 0]
            py = pixels[k, 1]
            d = (abs(colors[i, 0] - gt[py, px, 0]) + abs(colors[i, 1] - gt[py, px, 1])
                 + abs(colors[i, 2] - gt[py, px, 2]))
            e += d
        out[i] = e


def footprint_errors(records: list[FootprintRecords], gt_images) -> np.ndarray:
    """Per-surfel sum over views and occupied pixels of the RGB L1 color error."""
    n = len(records[0].offsets) - 1 if records else 0
    err = np.zeros(n)
    for rec in records:
        _accumulate_error(rec.offsets, rec.pixels, rec.colors,
                          np.asarray(gt_images[rec.view_id], dtype=np.float64), err)
    return err


def tile_grid(camera: Camera, tile: int = 16) -> tuple[int, int]:
    return math.ceil(camera.width / tile), math.ceil(camera.height / tile)
