"""Analytic backward pass from render-output gradients to raw surfel parameters.

The per-pixel stage replays each pixel's contribution list back to front
and writes one gradient record per contribution into a flat buffer; a
serial reduction then scatters the records into per-surfel buffers in
pixel-major order, so the result does not depend on the worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .losses import LossGrads
from .raster import RenderOutputs
from .surfel import Camera, SurfelSet, quat_to_rotmat_vjp, sh_basis_jacobian, num_sh_coeffs

PARAM_CLASSES = ("mu", "quat", "log_scale", "raw_opacity", "sh")


@dataclass
class FreezeMask:
    """Per-surfel trainability of each parameter class (True = trainable)."""

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    raw_opacity: np.ndarray
    sh: np.ndarray

    @classmethod
    def all_trainable(cls, n: int) -> "FreezeMask":
        return cls(*(np.ones(n, dtype=bool) for _ in PARAM_CLASSES))

    @classmethod
    def all_frozen(cls, n: int) -> "FreezeMask":
        return cls(*(np.zeros(n, dtype=bool) for _ in PARAM_CLASSES))

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __len__(self) -> int:
        return len(self.mu)

    def select(self, idx) -> "FreezeMask":
        return FreezeMask(*(getattr(self, c)[idx] for c in PARAM_CLASSES))

    def concat(self, other: "FreezeMask") -> "FreezeMask":
        return FreezeMask(*(np.concatenate([getattr(self, c), getattr(other, c)]) for c in PARAM_CLASSES))


@dataclass
class ParamGrads:
    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    raw_opacity: np.ndarray
    sh: np.ndarray
    screen_grad: np.ndarray  # (N,) norm of the view-space positional gradient, NDC units
    radii: np.ndarray  # (N,) max screen-space half extent in pixels
    visible: np.ndarray  # (N,) bool

    @classmethod
    def zeros(cls, surfels: SurfelSet) -> "ParamGrads":
        n = len(surfels)
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 2)), np.zeros(n),
                   np.zeros_like(surfels.sh), np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool))

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def add(self, other: "ParamGrads") -> None:
        for c in PARAM_CLASSES:
            getattr(self, c).__iadd__(getattr(other, c))
        self.screen_grad += other.screen_grad
        self.radii = np.maximum(self.radii, other.radii)
        self.visible |= other.visible

    def apply_mask(self, mask: FreezeMask) -> None:
        for c in PARAM_CLASSES:
            g = getattr(self, c)
            g[~mask[c]] = 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, c).ravel() for c in PARAM_CLASSES])


@njit(parallel=True, cache=True)
def _pixel_backward(count, offsets, idx, weight, trans, zz, uu, vv, aa, gg, lp, t_final, accum,
                    depth_mean, colors, normals, alpha, M, cpx, g_color, g_depth, g_accum,
                    g_normal, g_w, g_z, bg, eps, lp_inv_var,
                    out_j, out_M, out_c, out_alpha, out_col, out_nrm):
    h, w = count.shape
    for py in prange(h):
        for px in range(w):
            n = count[py, px]
            if n == 0:
                continue
            base = offsets[py * w + px]
            x = float(px)
            y = float(py)
            A = accum[py, px]
            D = depth_mean[py, px]
            inv = 1.0 / (A + eps)
            gC0 = g_color[py, px, 0]
            gC1 = g_color[py, px, 1]
            gC2 = g_color[py, px, 2]
            gD = g_depth[py, px]
            gA = g_accum[py, px]
            gN0 = g_normal[py, px, 0]
            gN1 = g_normal[py, px, 1]
            gN2 = g_normal[py, px, 2]
            R = gC0 * bg[0] + gC1 * bg[1] + gC2 * bg[2]
            for k in range(n - 1, -1, -1):
                j = idx[py, px, k]
                wk = weight[py, px, k]
                T = trans[py, px, k]
                z = zz[py, px, k]
                u = uu[py, px, k]
                v = vv[py, px, k]
                a = aa[py, px, k]
                g = gg[py, px, k]
                gw = (gC0 * colors[j, 0] + gC1 * colors[j, 1] + gC2 * colors[j, 2]
                      + gD * (z - D) * inv + gA
                      + gN0 * normals[j, 0] + gN1 * normals[j, 1] + gN2 * normals[j, 2]
                      + g_w[py, px, k])
                ga = T * (gw - R)
                R = gw * a + (1.0 - a) * R
                gz = gD * wk * inv + g_z[py, px, k]

                s = base + k
                out_j[s] = j
                out_col[s, 0] = wk * gC0
                out_col[s, 1] = wk * gC1
                out_col[s, 2] = wk * gC2
                out_nrm[s, 0] = wk * gN0
                out_nrm[s, 1] = wk * gN1
                out_nrm[s, 2] = wk * gN2
                out_alpha[s] = ga * g
                gG = ga * alpha[j]

                gu = 0.0
                gv = 0.0
                if lp[py, px, k]:
                    out_c[s, 0] = gG * g * (x - cpx[j, 0]) * lp_inv_var
                    out_c[s, 1] = gG * g * (y - cpx[j, 1]) * lp_inv_var
                else:
                    out_c[s, 0] = 0.0
                    out_c[s, 1] = 0.0
                    gu = -gG * g * u
                    gv = -gG * g * v
                Mj = M[j]
                # depth of the hit point: z = M30 u + M31 v + M33
                gu += gz * Mj[3, 0]
                gv += gz * Mj[3, 1]
                gM30 = gz * u
                gM31 = gz * v
                gM33 = gz

                a0 = -Mj[0, 0] + x * Mj[3, 0]
                a1 = -Mj[0, 1] + x * Mj[3, 1]
                a3 = -Mj[0, 3] + x * Mj[3, 3]
                b0 = -Mj[1, 0] + y * Mj[3, 0]
                b1 = -Mj[1, 1] + y * Mj[3, 1]
                b3 = -Mj[1, 3] + y * Mj[3, 3]
                den = a0 * b1 - a1 * b0
                ga0 = (gu * (-u * b1) + gv * (-b3 - v * b1)) / den
                ga1 = (gu * (b3 + u * b0) + gv * (v * b0)) / den
                ga3 = (gu * (-b1) + gv * b0) / den
                gb0 = (gu * (u * a1) + gv * (a3 + v * a1)) / den
                gb1 = (gu * (-a3 - u * a0) + gv * (-v * a0)) / den
                gb3 = (gu * a1 + gv * (-a0)) / den
                # rows 0, 1, 3 x cols 0, 1, 3 of dL/dM
                out_M[s, 0] = -ga0
                out_M[s, 1] = -ga1
                out_M[s, 2] = -ga3
                out_M[s, 3] = -gb0
                out_M[s, 4] = -gb1
                out_M[s, 5] = -gb3
                out_M[s, 6] = x * ga0 + y * gb0 + gM30
                out_M[s, 7] = x * ga1 + y * gb1 + gM31
                out_M[s, 8] = x * ga3 + y * gb3 + gM33


@njit(cache=True)
def _reduce(out_j, out_M, out_c, out_alpha, out_col, out_nrm, gM, gc, galpha, gcol, gnrm):
    rows = (0, 1, 3)
    for s in range(len(out_j)):
        j = out_j[s]
        for r in range(3):
            for c in range(3):
                gM[j, rows[r], rows[c]] += out_M[s, 3 * r + c]
        gc[j, 0] += out_c[s, 0]
        gc[j, 1] += out_c[s, 1]
        galpha[j] += out_alpha[s]
        for c in range(3):
            gcol[j, c] += out_col[s, c]
            gnrm[j, c] += out_nrm[s, c]


@dataclass
class SurfelOutputGrads:
    """Per-surfel gradients w.r.t. the per-view intermediate quantities."""

    M: np.ndarray
    center_px: np.ndarray
    alpha: np.ndarray
    color: np.ndarray
    normal: np.ndarray


def backward_to_surfel_outputs(render: RenderOutputs, grads: LossGrads) -> SurfelOutputGrads:
    if render.count is None:
        raise ValueError("render outputs carry no per-pixel contribution lists")
    view = render.view
    n = len(view.alpha)
    h, w, cap = render.weight.shape
    counts = render.count.ravel()
    offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    g_w = grads.weight if grads.weight is not None else np.zeros((h, w, cap))
    g_z = grads.z if grads.z is not None else np.zeros((h, w, cap))
    out_j = np.zeros(total, dtype=np.int64)
    out_M = np.zeros((total, 9))
    out_c = np.zeros((total, 2))
    out_alpha = np.zeros(total)
    out_col = np.zeros((total, 3))
    out_nrm = np.zeros((total, 3))
    opts = render.options
    _pixel_backward(render.count, offsets, render.idx, render.weight, render.trans, render.z,
                    render.u, render.v, render.a, render.ghat, render.lowpass, render.t_final,
                    render.accum, render.depth_mean, view.colors, view.normals, view.alpha, view.M,
                    view.center_px, np.ascontiguousarray(grads.color), np.ascontiguousarray(grads.depth_mean),
                    np.ascontiguousarray(grads.accum), np.ascontiguousarray(grads.normal_splat), g_w, g_z,
                    np.asarray(opts.background, dtype=np.float64), opts.depth_eps, opts.lp_inv_var,
                    out_j, out_M, out_c, out_alpha, out_col, out_nrm)
    res = SurfelOutputGrads(np.zeros((n, 4, 4)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)))
    _reduce(out_j, out_M, out_c, out_alpha, out_col, out_nrm, res.M, res.center_px, res.alpha,
            res.color, res.normal)
    return res


def backward(render: RenderOutputs, loss_grads: LossGrads, surfels: SurfelSet, camera: Camera | None = None,
             freeze_mask: FreezeMask | None = None) -> ParamGrads:
    """Exact gradients of the loss w.r.t. every raw surfel parameter for one view."""
    if render.idx is None or render.weight is None or render.trans is None:
        raise ValueError("render has no per-pixel contribution lists; backward needs them")
    camera = camera or render.camera
    view = render.view
    so = backward_to_surfel_outputs(render, loss_grads)
    out = ParamGrads.zeros(surfels)
    n = len(surfels)
    if n == 0:
        return out

    R = surfels.rotations
    s = surfels.scales
    Wm = camera.W
    gH = np.einsum("ik,nij->nkj", Wm, so.M)
    g_col0 = gH[:, :3, 0]
    g_col1 = gH[:, :3, 1]
    g_mu = gH[:, :3, 3].copy()
    g_R = np.zeros((n, 3, 3))
    g_R[:, :, 0] = s[:, 0:1] * g_col0
    g_R[:, :, 1] = s[:, 1:2] * g_col1
    out.log_scale[:, 0] = s[:, 0] * np.sum(R[:, :, 0] * g_col0, axis=1)
    out.log_scale[:, 1] = s[:, 1] * np.sum(R[:, :, 1] * g_col1, axis=1)

    # screen-space center, only through the low-pass branch
    Rc = camera.rotation
    X, Y, Z = view.center_cam[:, 0], view.center_cam[:, 1], view.center_cam[:, 2]
    ok = view.center_ok
    Zs = np.where(ok, Z, 1.0)
    gcx = np.where(ok, so.center_px[:, 0], 0.0)
    gcy = np.where(ok, so.center_px[:, 1], 0.0)
    g_cam = np.stack([camera.fx * gcx / Zs, camera.fy * gcy / Zs,
                      -(camera.fx * X * gcx + camera.fy * Y * gcy) / Zs**2], axis=1)
    g_mu += g_cam @ Rc

    # view-dependent color
    k = num_sh_coeffs(view.degree)
    g_raw = so.color * (view.color_raw > 0)
    out.sh[:, :k, :] = view.basis[:, :, None] * g_raw[:, None, :]
    if view.degree > 0:
        J = sh_basis_jacobian(view.view_dirs, view.degree)
        g_basis = np.einsum("nkc,nc->nk", surfels.sh[:, :k, :], g_raw)
        g_dir = np.einsum("nk,nkd->nd", g_basis, J)
        d = view.view_dirs
        g_mu += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / view.view_dist[:, None]

    # camera-facing normal n = sign * Rc t_w
    g_R[:, :, 2] = view.normal_sign[:, None] * (so.normal @ Rc)
    out.quat[:] = quat_to_rotmat_vjp(surfels.quat, g_R)
    out.mu[:] = g_mu
    a = view.alpha
    out.raw_opacity[:] = so.alpha * a * (1 - a)

    # densification statistics: gradient w.r.t. a screen-plane shift of the center, in NDC
    g_cam_total = g_mu @ Rc.T
    gx_px = g_cam_total[:, 0] * Zs / camera.fx
    gy_px = g_cam_total[:, 1] * Zs / camera.fy
    vis = np.zeros(n, dtype=bool)
    hit = np.unique(render.idx[np.arange(render.idx.shape[-1])[None, None, :] < render.count[..., None]])
    vis[hit] = True
    out.visible = vis
    out.screen_grad = np.where(vis, np.hypot(gx_px * 0.5 * camera.width, gy_px * 0.5 * camera.height), 0.0)
    bb = view.bbox
    out.radii = np.where(vis, 0.5 * np.maximum(bb[:, 2] - bb[:, 0], bb[:, 3] - bb[:, 1]), 0.0)

    if freeze_mask is not None:
        out.apply_mask(freeze_mask)
    return out
