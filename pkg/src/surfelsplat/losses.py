"""Training objective: photometric, depth-distortion and normal-consistency terms.

Each term returns its value together with the gradient w.r.t. the render
outputs it reads, so the rasterizer backward can chain them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .raster import RenderOutputs
from .surfel import Camera

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    alpha_dd: float = 0.0
    beta_nc: float = 0.05
    lambda_ssim: float = 0.2

    def __post_init__(self):
        if min(self.alpha_dd, self.beta_nc, self.lambda_ssim) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossGrads:
    """Gradient of the total loss w.r.t. each differentiable render output."""

    color: np.ndarray
    depth_mean: np.ndarray
    accum: np.ndarray
    normal_splat: np.ndarray
    weight: np.ndarray | None = None  # per contribution, (H, W, cap)
    z: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, render: RenderOutputs) -> "LossGrads":
        h, w = render.accum.shape
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)), np.zeros((h, w, 3)))

    def add(self, other: "LossGrads", scale: float = 1.0) -> None:
        self.color += scale * other.color
        self.depth_mean += scale * other.depth_mean
        self.accum += scale * other.accum
        self.normal_splat += scale * other.normal_splat
        for name in ("weight", "z"):
            g = getattr(other, name)
            if g is None:
                continue
            mine = getattr(self, name)
            setattr(self, name, scale * g if mine is None else mine + scale * g)


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # zero-padded 'same' filtering; self-adjoint because the window is symmetric
    out = correlate1d(img, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, win, axis=1, mode="constant", cval=0.0)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


def ssim_with_grad(img: np.ndarray, ref: np.ndarray, window: int = 11, sigma: float = 1.5):
    """Mean SSIM of ``img`` against ``ref`` and its gradient w.r.t. ``img``."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_dims(img, ref)
    win = gaussian_window(window, sigma)
    mx, my = _blur(img, win), _blur(ref, win)
    exx, eyy, exy = _blur(img * img, win), _blur(ref * ref, win), _blur(img * ref, win)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())

    gs = 1.0 / smap.size
    d_a1 = gs * a2 / (b1 * b2)
    d_a2 = gs * a1 / (b1 * b2)
    d_b1 = -gs * smap / b1
    d_b2 = -gs * smap / b2
    g_mx = d_a1 * 2 * my - d_a2 * 2 * my + d_b1 * 2 * mx - d_b2 * 2 * mx
    g_exy = 2 * d_a2
    g_exx = d_b2
    grad = _blur(g_mx, win) + 2 * img * _blur(g_exx, win) + ref * _blur(g_exy, win)
    return value, grad


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    return ssim_with_grad(img_a, img_b)[0]


# ---------------------------------------------------------------------------
# photometric


def photometric_loss(color: np.ndarray, gt: np.ndarray, lambda_ssim: float = 0.2):
    """(1 - lambda) * L1 + lambda * (1 - SSIM); returns (value, d value / d color)."""
    color = np.asarray(color, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_dims(color, gt)
    diff = color - gt
    l1 = float(np.abs(diff).mean())
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size
    value = (1 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, gs = ssim_with_grad(color, gt)
        value += lambda_ssim * (1 - s)
        grad = grad - lambda_ssim * gs
    return value, grad


# ---------------------------------------------------------------------------
# depth distortion


def depth_distortion_direct(w, z) -> float:
    """sum_i sum_j w_i w_j |z_i - z_j| by brute force."""
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return float(np.sum(w[:, None] * w[None, :] * np.abs(z[:, None] - z[None, :])))


def depth_distortion_pixel(w, z) -> float:
    """Same double sum via one pass over the depth-sorted contributions."""
    w = np.asarray(w, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    order = np.argsort(z, kind="stable")
    acc_w = 0.0
    acc_wz = 0.0
    total = 0.0
    for i in order:
        total += w[i] * (z[i] * acc_w - acc_wz)
        acc_w += w[i]
        acc_wz += w[i] * z[i]
    return 2.0 * total


def depth_distortion_loss(render: RenderOutputs):
    """Mean per-pixel distortion over pixels with a contribution.

    Returns (value, d/d weight, d/d z), the gradients shaped like the
    per-pixel contribution arrays.
    """
    cap = render.weight.shape[-1]
    valid = np.arange(cap)[None, None, :] < render.count[..., None]
    w = np.where(valid, render.weight, 0.0)
    z = np.where(valid, render.z, 0.0)
    key = np.where(valid, render.z, np.inf)
    order = np.argsort(key, axis=-1, kind="stable")
    ws = np.take_along_axis(w, order, axis=-1)
    zs = np.take_along_axis(z, order, axis=-1)
    wz = ws * zs
    w_lt = np.cumsum(ws, axis=-1) - ws
    s_lt = np.cumsum(wz, axis=-1) - wz
    w_tot = w_lt[..., -1:] + ws[..., -1:]
    s_tot = s_lt[..., -1:] + wz[..., -1:]
    w_gt = w_tot - w_lt - ws
    s_gt = s_tot - s_lt - wz
    per_pixel = 2.0 * np.sum(ws * (zs * w_lt - s_lt), axis=-1)
    npix = int(np.count_nonzero(render.count > 0))
    if npix == 0:
        return 0.0, np.zeros_like(w), np.zeros_like(w)
    value = float(per_pixel.sum() / npix)
    gw_sorted = 2.0 * (zs * w_lt - s_lt + s_gt - zs * w_gt) / npix
    gz_sorted = 2.0 * ws * (w_lt - w_gt) / npix
    gw = np.zeros_like(w)
    gz = np.zeros_like(w)
    np.put_along_axis(gw, order, gw_sorted, axis=-1)
    np.put_along_axis(gz, order, gz_sorted, axis=-1)
    gw[~valid] = 0.0
    gz[~valid] = 0.0
    return value, gw, gz


# ---------------------------------------------------------------------------
# normals from depth


def unproject_depth(depth: np.ndarray, camera: Camera) -> np.ndarray:
    return depth[..., None] * camera.pixel_rays()


def _diff_x(P):
    d = np.empty_like(P)
    d[:, 1:-1] = 0.5 * (P[:, 2:] - P[:, :-2])
    d[:, 0] = P[:, 1] - P[:, 0]
    d[:, -1] = P[:, -1] - P[:, -2]
    return d


def _diff_x_adjoint(g):
    out = np.zeros_like(g)
    out[:, 2:] += 0.5 * g[:, 1:-1]
    out[:, :-2] -= 0.5 * g[:, 1:-1]
    out[:, 1] += g[:, 0]
    out[:, 0] -= g[:, 0]
    out[:, -1] += g[:, -1]
    out[:, -2] -= g[:, -1]
    return out


def _neighbors_valid(valid: np.ndarray) -> np.ndarray:
    ok = valid.copy()
    ok[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    ok[:, 0] &= valid[:, 1]
    ok[:, -1] &= valid[:, -2]
    ok[1:-1, :] &= valid[2:, :] & valid[:-2, :]
    ok[0, :] &= valid[1, :]
    ok[-1, :] &= valid[-2, :]
    return ok


@dataclass
class DepthNormals:
    normal: np.ndarray  # (H, W, 3) unit, camera frame, zero where masked
    mask: np.ndarray
    # cached for the backward pass
    cross: np.ndarray
    cross_norm: np.ndarray
    sign: np.ndarray
    dx: np.ndarray
    dy: np.ndarray


def normal_from_depth(depth: np.ndarray, accum: np.ndarray, camera: Camera,
                      accum_threshold: float = 0.5) -> DepthNormals:
    """Unit normals of the surface traced by the depth map, oriented toward the camera."""
    P = unproject_depth(np.asarray(depth, dtype=np.float64), camera)
    dx = _diff_x(P)
    dy = np.swapaxes(_diff_x(np.swapaxes(P, 0, 1)), 0, 1)
    c = np.cross(dx, dy)
    cn = np.linalg.norm(c, axis=-1)
    mask = _neighbors_valid(np.asarray(accum) >= accum_threshold) & (cn > 1e-20)
    safe = np.where(cn > 0, cn, 1.0)
    n = c / safe[..., None]
    sign = np.where(np.sum(n * P, axis=-1) > 0, -1.0, 1.0)
    N = n * sign[..., None]
    N[~mask] = 0.0
    return DepthNormals(N, mask, c, safe, sign, dx, dy)


def normal_from_depth_vjp(dn: DepthNormals, g_normal: np.ndarray, camera: Camera) -> np.ndarray:
    """Gradient w.r.t. the depth map given d L / d N."""
    g = np.where(dn.mask[..., None], g_normal, 0.0)
    chat = dn.cross / dn.cross_norm[..., None]
    g_c = dn.sign[..., None] * (g - chat * np.sum(chat * g, axis=-1, keepdims=True)) / dn.cross_norm[..., None]
    g_dx = np.cross(dn.dy, g_c)
    g_dy = np.cross(g_c, dn.dx)
    g_P = _diff_x_adjoint(g_dx) + np.swapaxes(_diff_x_adjoint(np.swapaxes(g_dy, 0, 1)), 0, 1)
    return np.sum(g_P * camera.pixel_rays(), axis=-1)


def normal_consistency_loss(render: RenderOutputs, dn: DepthNormals):
    """Mean over unmasked pixels of sum_i w_i (1 - n_i . N).

    Since sum_i w_i n_i is the splat-normal map and sum_i w_i the
    accumulation, the per-pixel term equals accum - normal_splat . N.
    Returns (value, d/d accum, d/d normal_splat, d/d N).
    """
    m = dn.mask
    count = int(m.sum())
    h, w = m.shape
    if count == 0:
        return 0.0, np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w, 3))
    per_pixel = render.accum - np.sum(render.normal_splat * dn.normal, axis=-1)
    value = float(per_pixel[m].sum() / count)
    g_accum = m / count
    g_ns = -dn.normal * (m / count)[..., None]
    g_N = -render.normal_splat * (m / count)[..., None]
    return value, g_accum.astype(np.float64), g_ns, g_N


# ---------------------------------------------------------------------------
# total


def total_loss(l_c: float, l_d: float, l_n: float, weights: LossWeights) -> float:
    return l_c + weights.alpha_dd * l_d + weights.beta_nc * l_n


def compute_losses(render: RenderOutputs, gt: np.ndarray, weights: LossWeights,
                   terms: tuple[str, ...] = ("c", "d", "n")):
    """Evaluate the enabled terms; returns (total, parts, LossGrads).

    Terms with zero weight are skipped entirely.
    """
    grads = LossGrads.zeros_like(render)
    parts = {"l_c": 0.0, "l_d": 0.0, "l_n": 0.0}
    total = 0.0
    if "c" in terms:
        lc, gc = photometric_loss(render.color, gt, weights.lambda_ssim)
        parts["l_c"] = lc
        total += lc
        grads.color += gc
    if "d" in terms and weights.alpha_dd > 0:
        ld, gw, gz = depth_distortion_loss(render)
        parts["l_d"] = ld
        total += weights.alpha_dd * ld
        grads.weight = weights.alpha_dd * gw
        grads.z = weights.alpha_dd * gz
    if "n" in terms and weights.beta_nc > 0:
        dn = normal_from_depth(render.depth_mean, render.accum, render.camera)
        ln, g_acc, g_ns, g_N = normal_consistency_loss(render, dn)
        parts["l_n"] = ln
        total += weights.beta_nc * ln
        grads.accum += weights.beta_nc * g_acc
        grads.normal_splat += weights.beta_nc * g_ns
        grads.depth_mean += weights.beta_nc * normal_from_depth_vjp(dn, g_N, render.camera)
    return total, parts, grads
