"""Finite-difference verification of the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import PARAM_CLASSES, backward
from .losses import LossWeights, compute_losses, normal_from_depth
from .raster import RasterOptions, render
from .surfel import Camera, SurfelSet, num_sh_coeffs

TERM_WEIGHTS = {
    "c": (("c",), LossWeights(alpha_dd=0.0, beta_nc=0.0, lambda_ssim=0.2)),
    "d": (("d",), LossWeights(alpha_dd=1.0, beta_nc=0.0, lambda_ssim=0.2)),
    "n": (("n",), LossWeights(alpha_dd=0.0, beta_nc=1.0, lambda_ssim=0.2)),
    "all": (("c", "d", "n"), LossWeights(alpha_dd=0.5, beta_nc=0.5, lambda_ssim=0.2)),
}


@dataclass
class MicroScene:
    surfels: SurfelSet
    camera: Camera
    gt: np.ndarray
    options: RasterOptions = field(default_factory=lambda: RasterOptions(t_min=0.0))


def micro_scene(seed: int, n_surfels: int = 8, size: int = 16, degree: int = 1) -> MicroScene:
    """Random surfels in front of a camera, arranged to overlap heavily."""
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.3, -3.5, 1.5], [0.0, 0.0, 0.0], width=size, height=size, fov_x_deg=40.0)
    n = n_surfels
    k = num_sh_coeffs(degree)
    surfels = SurfelSet(
        mu=rng.uniform(-0.5, 0.5, (n, 3)),
        quat=rng.normal(size=(n, 4)),
        log_scale=np.log(rng.uniform(0.3, 0.6, (n, 2))),
        raw_opacity=rng.uniform(0.0, 2.0, n),
        sh=rng.normal(scale=0.3, size=(n, k, 3)),
        ids=np.arange(n),
        active_degree=degree,
    )
    gt = rng.uniform(0.0, 1.0, (size, size, 3))
    return MicroScene(surfels, cam, gt)


def _signature(r, surfels, with_normals, with_depth_order):
    """Discrete state of a render; the loss is smooth while this is unchanged."""
    sig = [r.count.tobytes(), r.idx.tobytes(), r.lowpass.tobytes(),
           (r.view.color_raw > 0).tobytes(), r.view.normal_sign.tobytes()]
    if with_depth_order:
        valid = np.arange(r.z.shape[-1])[None, None, :] < r.count[..., None]
        sig.append(np.argsort(np.where(valid, r.z, np.inf), axis=-1, kind="stable").tobytes())
    if with_normals:
        sig.append(normal_from_depth(r.depth_mean, r.accum, r.camera).mask.tobytes())
    return tuple(sig)


@dataclass
class GradcheckReport:
    term: str
    max_rel_err: dict
    checked: dict
    skipped: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_err.values())

    def lines(self) -> list[str]:
        out = []
        for c in PARAM_CLASSES:
            out.append(f"{self.term:>4} {c:<12} max_rel={self.max_rel_err[c]:.3e} n={self.checked[c]}")
        return out


def check_scene(scene: MicroScene, term: str = "all", h: float = 1e-4, tol: float = 1e-3,
                grad_floor: float = 1e-8, margin: float = 10.0) -> GradcheckReport:
    """Compare analytic and central-difference gradients for every raw parameter."""
    terms, weights = TERM_WEIGHTS[term]
    surfels, cam, gt, opts = scene.surfels, scene.camera, scene.gt, scene.options
    with_normals = "n" in terms
    with_order = "d" in terms

    def loss_and_sig(s):
        r = render(s, cam, opts)
        total, _, _ = compute_losses(r, gt, weights, terms)
        return total, _signature(r, s, with_normals, with_order)

    def sig_only(s):
        return _signature(render(s, cam, opts), s, with_normals, with_order)

    r = render(surfels, cam, opts)
    _, _, lg = compute_losses(r, gt, weights, terms)
    analytic = backward(r, lg, surfels, cam)
    base_sig = _signature(r, surfels, with_normals, with_order)

    max_rel = {c: 0.0 for c in PARAM_CLASSES}
    checked = {c: 0 for c in PARAM_CLASSES}
    skipped = 0
    for c in PARAM_CLASSES:
        arr = getattr(surfels, c)
        ga = analytic[c]
        for flat in range(arr.size):
            pos = np.unravel_index(flat, arr.shape)
            if c == "sh" and pos[1] >= num_sh_coeffs(surfels.active_degree):
                continue
            orig = arr[pos]
            # stay at least 10 h away from any discontinuity
            arr[pos] = orig + margin * h
            far_p = sig_only(surfels)
            arr[pos] = orig - margin * h
            far_m = sig_only(surfels)
            arr[pos] = orig + h
            fp, sp = loss_and_sig(surfels)
            arr[pos] = orig - h
            fm, sm = loss_and_sig(surfels)
            arr[pos] = orig
            if len({sp, sm, far_p, far_m, base_sig}) > 1:
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            an = ga[pos]
            mag = max(abs(an), abs(num))
            if mag <= grad_floor:
                continue
            checked[c] += 1
            max_rel[c] = max(max_rel[c], abs(an - num) / mag)
    return GradcheckReport(term, max_rel, checked, skipped, tol)


def gradcheck(seeds=range(20), terms=("c", "d", "n", "all"), tol: float = 1e-3, h: float = 1e-4,
              n_surfels: int = 8, size: int = 16) -> list[GradcheckReport]:
    reports = []
    for seed in seeds:
        scene = micro_scene(seed, n_surfels=n_surfels, size=size)
        for t in terms:
            reports.append(check_scene(scene, t, h=h, tol=tol))
    return reports
