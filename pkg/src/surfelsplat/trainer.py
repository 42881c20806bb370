"""Three-stage training: base surfel fit, error-driven color refinement, in-place cloning.

Stage 1 trains every parameter with normal consistency and adaptive density
control. Surfels are then ranked by their opacity-free color error over all
training views; the top K percent (HEGs) get their SH coefficients tuned in
Stage 2 with everything else frozen. Stage 3 clones the HEGs in place and
trains with opacity frozen and normal consistency resumed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, jsonable
from .dataio import SceneBundle, checkpoint_write, init_surfels, load_scene, make_scene
from .geometry import TSDFVolume, attribute_stats, chamfer_and_fscore, marching_cubes, psnr, ssim, tsdf_integrate
from .grad import PARAM_CLASSES, FreezeMask, backward
from .losses import LossWeights, compute_losses
from .raster import RasterOptions, footprint_errors, footprint_pass, render
from .surfel import FLAG_CLONE, FLAG_HEG, SurfelSet, logit, quat_to_rotmat

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Loss or parameters became non-finite."""

    def __init__(self, stage: int, iteration: int, detail: str):
        self.stage = stage
        self.iteration = iteration
        super().__init__(f"stage {stage}, iteration {iteration}: {detail}")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with per-element step counts; masked entries never touch their moments."""

    def __init__(self, surfels: SurfelSet, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {c: np.zeros_like(getattr(surfels, c)) for c in PARAM_CLASSES}
        self.v = {c: np.zeros_like(getattr(surfels, c)) for c in PARAM_CLASSES}
        self.t = {c: np.zeros(len(surfels), dtype=np.int64) for c in PARAM_CLASSES}

    def step(self, surfels: SurfelSet, grads, mask: FreezeMask | None = None, lr_scale: dict | None = None):
        for c in PARAM_CLASSES:
            lr = self.lrs[c] * (lr_scale or {}).get(c, 1.0)
            if np.all(lr == 0):
                continue
            rows = np.ones(len(surfels), dtype=bool) if mask is None else mask[c]
            if not rows.any():
                continue
            p, g = getattr(surfels, c), grads[c]
            m, v = self.m[c], self.v[c]
            lr_arr = np.asarray(lr)
            if lr_arr.ndim:  # per-coefficient rate (SH bands)
                lr_arr = lr_arr.reshape((1,) + lr_arr.shape)
            if rows.all():
                # whole-array update, same arithmetic as the masked path
                self.t[c] += 1
                t = self.t[c].astype(np.float64).reshape((-1,) + (1,) * (p.ndim - 1))
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                step = m / (1 - self.b1**t)
                step *= lr_arr
                step /= np.sqrt(v / (1 - self.b2**t)) + self.eps
                p -= step
                continue
            sel = np.flatnonzero(rows)
            self.t[c][sel] += 1
            t = self.t[c][sel].astype(np.float64).reshape((-1,) + (1,) * (p.ndim - 1))
            gs = g[sel]
            m[sel] = self.b1 * m[sel] + (1 - self.b1) * gs
            v[sel] = self.b2 * v[sel] + (1 - self.b2) * gs * gs
            mhat = m[sel] / (1 - self.b1**t)
            vhat = v[sel] / (1 - self.b2**t)
            p[sel] -= lr_arr * mhat / (np.sqrt(vhat) + self.eps)

    def select(self, idx) -> None:
        for c in PARAM_CLASSES:
            self.m[c] = self.m[c][idx]
            self.v[c] = self.v[c][idx]
            self.t[c] = self.t[c][idx]

    def extend(self, n: int) -> None:
        for c in PARAM_CLASSES:
            shape = (n,) + self.m[c].shape[1:]
            self.m[c] = np.concatenate([self.m[c], np.zeros(shape)])
            self.v[c] = np.concatenate([self.v[c], np.zeros(shape)])
            self.t[c] = np.concatenate([self.t[c], np.zeros(n, dtype=np.int64)])

    def reset(self, c: str) -> None:
        self.m[c][:] = 0.0
        self.v[c][:] = 0.0
        self.t[c][:] = 0


def base_learning_rates(cfg: RunConfig, surfels: SurfelSet, extent: float) -> dict:
    k = surfels.sh.shape[1]
    sh_lr = np.full((k, 1), cfg.lr_sh / cfg.lr_sh_rest_div)
    sh_lr[0] = cfg.lr_sh
    return {
        "mu": cfg.lr_mu * (extent if cfg.lr_mu_scale_extent else 1.0),
        "quat": cfg.lr_quat,
        "log_scale": cfg.lr_log_scale,
        "raw_opacity": cfg.lr_opacity,
        "sh": sh_lr,
    }


def snap_float32(surfels: SurfelSet) -> SurfelSet:
    """Round parameters to float32 so checkpoints reproduce the in-memory state exactly."""
    for c in PARAM_CLASSES:
        arr = getattr(surfels, c)
        arr[...] = arr.astype(np.float32).astype(np.float64)
    return surfels


def raster_options(cfg: RunConfig) -> RasterOptions:
    return RasterOptions(near=cfg.near, cutoff=cfg.cutoff, lowpass_sigma=cfg.lowpass_sigma,
                         alpha_min=cfg.alpha_min, t_min=cfg.t_min, max_contrib=cfg.max_contrib,
                         tile_size=cfg.tile_size, background=tuple(cfg.background))


# ---------------------------------------------------------------------------
# stage plans


@dataclass
class StagePlan:
    stage: int
    iterations: int
    weights: LossWeights
    densify: bool
    freeze: str  # "none", "leg_and_heg_non_sh", "opacity", "none_clones_only", ...

    @classmethod
    def for_stage(cls, cfg: RunConfig, stage: int) -> "StagePlan":
        it = cfg.stage_iters(stage)
        if stage == 1:
            return cls(1, it, LossWeights(cfg.alpha_dd, cfg.beta_nc, cfg.lambda_ssim), cfg.densify, "none")
        if stage == 2:
            return cls(2, it, LossWeights(cfg.alpha_dd, 0.0, cfg.lambda_ssim), False, "heg_sh_only")
        beta = cfg.beta_nc if cfg.resume_nc else 0.0
        freeze = "opacity" if cfg.freeze_opacity else "none"
        if cfg.stage3_clones_only:
            freeze += "+clones_only"
        return cls(3, it, LossWeights(cfg.alpha_dd, beta, cfg.lambda_ssim), False, freeze)


def stage_mask(plan: StagePlan, surfels: SurfelSet, heg_idx=None) -> FreezeMask | None:
    n = len(surfels)
    if plan.stage == 1:
        return None
    if plan.stage == 2:
        mask = FreezeMask.all_frozen(n)
        if heg_idx is not None:
            mask.sh[np.asarray(heg_idx, dtype=np.int64)] = True
        return mask
    mask = FreezeMask.all_trainable(n)
    if "opacity" in plan.freeze:
        mask.raw_opacity[:] = False
    if "clones_only" in plan.freeze:
        others = (surfels.flags & FLAG_CLONE) == 0
        for c in PARAM_CLASSES:
            mask[c][others] = False
    return mask


def _terms(w: LossWeights) -> tuple:
    t = ["c"]
    if w.alpha_dd > 0:
        t.append("d")
    if w.beta_nc > 0:
        t.append("n")
    return tuple(t)


# ---------------------------------------------------------------------------
# densification


class DensifyStats:
    def __init__(self, n: int):
        self.grad = np.zeros(n)
        self.count = np.zeros(n)

    def update(self, g) -> None:
        self.grad += np.where(g.visible, g.screen_grad, 0.0)
        self.count += g.visible

    def select(self, idx) -> None:
        self.grad = self.grad[idx]
        self.count = self.count[idx]


def densify_and_prune(surfels: SurfelSet, stats: DensifyStats, adam: Adam, cfg: RunConfig, extent: float,
                      rng: np.random.Generator) -> SurfelSet:
    """Clone small high-gradient surfels, split large ones, prune transparent ones."""
    n = len(surfels)
    mean_grad = np.where(stats.count > 0, stats.grad / np.maximum(stats.count, 1), 0.0)
    hot = mean_grad > cfg.densify_grad_threshold
    big = surfels.scales.max(axis=1) > cfg.percent_dense * extent
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)

    next_id = surfels.next_id()
    new_parts = []
    if len(clone_idx):
        c = surfels.select(clone_idx)
        c.ids = np.arange(next_id, next_id + len(c))
        next_id += len(c)
        new_parts.append(c)
    if len(split_idx):
        src = surfels.select(np.repeat(split_idx, 2))
        R = quat_to_rotmat(src.quat)
        s = src.scales
        local = rng.normal(size=(len(src), 2)) * s
        src.mu = src.mu + R[:, :, 0] * local[:, :1] + R[:, :, 1] * local[:, 1:2]
        src.log_scale = np.log(s / cfg.split_factor)
        src.ids = np.arange(next_id, next_id + len(src))
        next_id += len(src)
        new_parts.append(src)

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False
    out = surfels.select(np.flatnonzero(keep))
    adam.select(np.flatnonzero(keep))
    for part in new_parts:
        part.flags[:] = 0
        part.parent[:] = -1
        out = out.concat(part)
        adam.extend(len(part))
    out.active_degree = surfels.active_degree

    alive = out.opacities >= cfg.prune_alpha
    if not alive.any():  # never prune everything
        alive[np.argmax(out.opacities)] = True
    idx = np.flatnonzero(alive)
    out = out.select(idx)
    adam.select(idx)
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StageResult:
    surfels: SurfelSet
    losses: list
    seconds: float


def train_stage(surfels: SurfelSet, bundle: SceneBundle, cfg: RunConfig, plan: StagePlan,
                heg_idx=None, callback=None) -> StageResult:
    """Run one stage on a copy of ``surfels``; the input is never modified."""
    s = surfels.copy()
    t0 = time.perf_counter()
    if plan.iterations == 0 or len(s) == 0:
        return StageResult(s, [], 0.0)
    opts = raster_options(cfg)
    extent = bundle.extent
    rng = np.random.default_rng([cfg.seed, plan.stage])
    lrs = base_learning_rates(cfg, s, extent)
    adam = Adam(s, lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    mask = stage_mask(plan, s, heg_idx)
    terms = _terms(plan.weights)
    stats = DensifyStats(len(s))
    densify_until = int(plan.iterations * cfg.densify_until_frac)
    max_deg = s.max_degree
    if plan.stage == 1:
        s.active_degree = 0
    else:
        s.active_degree = max_deg
    n_views = len(bundle.cameras)
    order = np.empty(0, dtype=np.int64)
    losses = []
    mu_decay = math.log(cfg.lr_mu_final_factor)

    for it in range(plan.iterations):
        if plan.stage == 1 and cfg.sh_up_every > 0:
            s.active_degree = min(max_deg, it // cfg.sh_up_every)
        if len(order) == 0:
            order = rng.permutation(n_views)
        v, order = int(order[0]), order[1:]
        cam, gt = bundle.cameras[v], bundle.gt_images[v]

        r = render(s, cam, opts)
        total, _, lg = compute_losses(r, gt, plan.weights, terms)
        if not np.isfinite(total):
            raise DivergenceError(plan.stage, it, f"non-finite loss {total}")
        g = backward(r, lg, s, cam, mask)

        scale = {}
        if plan.stage == 1:
            scale["mu"] = math.exp(mu_decay * it / max(plan.iterations - 1, 1))
        else:
            scale["mu"] = cfg.lr_mu_final_factor
        adam.step(s, g, mask, scale)
        if not all(np.all(np.isfinite(getattr(s, c))) for c in PARAM_CLASSES):
            raise DivergenceError(plan.stage, it, "non-finite parameters")
        losses.append(float(total))

        if plan.densify:
            step = it + 1
            if step < densify_until:
                stats.update(g)
                if step >= cfg.densify_from and step % cfg.densify_every == 0:
                    s = densify_and_prune(s, stats, adam, cfg, extent, rng)
                    stats = DensifyStats(len(s))
                if cfg.opacity_reset_every > 0 and step % cfg.opacity_reset_every == 0:
                    s.raw_opacity[:] = np.minimum(s.raw_opacity, logit(cfg.reset_alpha))
                    adam.reset("raw_opacity")
        if callback is not None:
            callback(it, s, total)

    snap_float32(s)
    if not all(np.all(np.isfinite(getattr(s, c))) for c in PARAM_CLASSES):
        raise DivergenceError(plan.stage, plan.iterations, "parameters overflow float32")
    return StageResult(s, losses, time.perf_counter() - t0)


def train_stage1(surfels, bundle, cfg, callback=None) -> StageResult:
    return train_stage(surfels, bundle, cfg, StagePlan.for_stage(cfg, 1), callback=callback)


def train_stage2(surfels, bundle, cfg, heg_idx, callback=None) -> StageResult:
    return train_stage(surfels, bundle, cfg, StagePlan.for_stage(cfg, 2), heg_idx=heg_idx, callback=callback)


def train_stage3(surfels, bundle, cfg, callback=None) -> StageResult:
    return train_stage(surfels, bundle, cfg, StagePlan.for_stage(cfg, 3), callback=callback)


# ---------------------------------------------------------------------------
# error scoring and cloning


@dataclass
class ErrorScores:
    errors: np.ndarray  # E_i, surfel order
    ids: np.ndarray
    ranking: np.ndarray  # surfel indices, highest error first
    K: float
    heg: np.ndarray  # surfel indices
    leg: np.ndarray


def compute_error_scores(surfels: SurfelSet, cameras, gt_images, options: RasterOptions | None = None,
                         K: float = 1.0) -> ErrorScores:
    """Opacity-free per-surfel color error summed over views and occupied pixels."""
    records = footprint_pass(surfels, cameras, gt_images, options)
    err = footprint_errors(records, gt_images)
    return select_hegs(err, surfels.ids, K)


def select_hegs(errors, ids, K: float) -> ErrorScores:
    errors = np.asarray(errors, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    n = len(errors)
    if n == 0:
        raise ValueError("cannot select HEGs from an empty surfel set")
    if not 0 < K <= 100:
        raise ValueError("K must be in (0, 100]")
    ranking = np.lexsort((ids, -errors))
    n_heg = max(1, math.ceil(n * K / 100.0 - 1e-9))
    return ErrorScores(errors, ids, ranking, K, np.sort(ranking[:n_heg]), np.sort(ranking[n_heg:]))


def clone_in_place(surfels: SurfelSet, heg_idx) -> SurfelSet:
    """Append one exact copy of every HEG with a fresh id, tagged as a clone."""
    heg_idx = np.asarray(heg_idx, dtype=np.int64)
    if len(heg_idx) == 0:
        raise ValueError("in-place cloning needs at least one HEG")
    clones = surfels.select(heg_idx)
    start = surfels.next_id()
    clones.parent = surfels.ids[heg_idx].copy()
    clones.ids = np.arange(start, start + len(clones))
    clones.flags = ((clones.flags & ~np.uint8(FLAG_HEG)) | FLAG_CLONE).astype(np.uint8)
    out = surfels.concat(clones)
    out.active_degree = surfels.active_degree
    return out


# ---------------------------------------------------------------------------
# evaluation


def render_depths(surfels: SurfelSet, bundle: SceneBundle, cfg: RunConfig):
    opts = raster_options(cfg)
    for cam in bundle.cameras:
        r = render(surfels, cam, opts)
        yield cam, r


def extract_mesh(surfels: SurfelSet, bundle: SceneBundle, cfg: RunConfig, renders=None):
    voxel = cfg.voxel_size or bundle.extent / 64.0
    lo, hi = bundle.bounds
    pad = 4 * voxel
    vol = TSDFVolume.from_bounds(lo - pad, hi + pad, voxel)
    for cam, r in renders if renders is not None else render_depths(surfels, bundle, cfg):
        depth = r.depth_median if cfg.depth_mode == "median" else r.depth_mean
        tsdf_integrate(vol, depth, cam, accum=r.accum)
    return marching_cubes(vol), voxel


def evaluate(surfels: SurfelSet, bundle: SceneBundle, cfg: RunConfig, stage: int) -> dict:
    renders = list(render_depths(surfels, bundle, cfg))
    ps = [psnr(np.clip(r.color, 0, 1), gt) for (_, r), gt in zip(renders, bundle.gt_images)]
    ss = [ssim(np.clip(r.color, 0, 1), gt) for (_, r), gt in zip(renders, bundle.gt_images)]
    stats = attribute_stats(surfels)
    voxel = cfg.voxel_size or bundle.extent / 64.0
    tau = cfg.tau or 2 * voxel
    rep = {
        "stage_id": stage,
        "psnr": float(np.mean(ps)),
        "ssim": float(np.mean(ss)),
        "chamfer": None,
        "fscore": None,
        "precision": None,
        "recall": None,
        "tau": tau,
        "voxel_size": voxel,
        "n_surfels": len(surfels),
        "mean_Ka": stats.mean_ka,
        "mean_alpha": stats.mean_alpha,
        "median_Ka": stats.median_ka,
        "median_alpha": stats.median_alpha,
    }
    if bundle.gt_mesh is not None:
        mesh, _ = extract_mesh(surfels, bundle, cfg, renders)
        if len(mesh):
            ch = chamfer_and_fscore(mesh, bundle.gt_mesh, tau, cfg.n_samples, seed=cfg.seed)
            rep.update(chamfer=ch.chamfer, fscore=ch.fscore, precision=ch.precision, recall=ch.recall)
    return rep


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False))
    tmp.replace(path)


# ---------------------------------------------------------------------------
# pipeline


def load_bundle(cfg: RunConfig) -> SceneBundle:
    if cfg.scene_dir:
        return load_scene(cfg.scene_dir)
    return make_scene(cfg.scene_kind, cfg.scene_params, cfg.seed)


@dataclass
class PipelineResult:
    stages: dict  # stage id -> SurfelSet
    metrics: dict  # stage id -> metrics dict
    scores: ErrorScores | None


def run_pipeline(cfg: RunConfig, bundle: SceneBundle | None = None, stages=(1, 2, 3),
                 start: SurfelSet | None = None, out_dir=None, evaluate_stages: bool = True,
                 hegs: np.ndarray | None = None) -> PipelineResult:
    """Stage 1 -> scoring -> Stage 2 -> clone -> Stage 3, writing checkpoints and metrics per stage.

    ``start`` resumes from a previous stage's output (the checkpoint before
    the first requested stage). On failure a FAILED.json marker is written
    next to the artifacts already produced and the error is re-raised.
    """
    bundle = bundle if bundle is not None else load_bundle(cfg)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    stages = tuple(sorted(stages))
    if start is None:
        if stages[0] != 1:
            raise ValueError("a start surfel set is required when Stage 1 is skipped")
        start = init_surfels(bundle, cfg.n_init_points, cfg.sh_degree, cfg.seed, cfg.init_opacity)
        snap_float32(start)
    result = PipelineResult({}, {}, None)
    current = start
    stage = stages[0]
    try:
        for stage in stages:
            if stage == 1:
                current = train_stage1(current, bundle, cfg).surfels
            elif stage == 2:
                if hegs is None:
                    scores = compute_error_scores(current, bundle.cameras, bundle.gt_images,
                                                  raster_options(cfg), cfg.K)
                    result.scores = scores
                    hegs = scores.heg
                current = current.copy()
                current.flags[hegs] |= FLAG_HEG
                current = train_stage2(current, bundle, cfg, hegs).surfels
            elif stage == 3:
                if hegs is None:
                    hegs = np.flatnonzero((current.flags & FLAG_HEG) != 0)
                    if len(hegs) == 0:
                        scores = compute_error_scores(current, bundle.cameras, bundle.gt_images,
                                                      raster_options(cfg), cfg.K)
                        result.scores = scores
                        hegs = scores.heg
                if cfg.clone:
                    n_before = len(current)
                    current = clone_in_place(current, hegs)
                    # storage bound: exactly one clone per HEG
                    assert len(current) == n_before + len(hegs)
                current = train_stage3(current, bundle, cfg).surfels
            else:
                raise ValueError(f"unknown stage {stage}")
            result.stages[stage] = current
            meta = {"stage": stage, "iteration": cfg.stage_iters(stage), "seed": cfg.seed}
            checkpoint_write(current, meta, out / f"stage{stage}.ckpt")
            if evaluate_stages:
                m = evaluate(current, bundle, cfg, stage)
                result.metrics[stage] = m
                write_json(out / f"metrics_stage{stage}.json", m)
            log.info("stage %d done: %d surfels", stage, len(current))
    except Exception as e:
        info = {"stage": stage, "error": type(e).__name__, "message": str(e)}
        if isinstance(e, DivergenceError):
            info["iteration"] = e.iteration
        write_json(out / "FAILED.json", info)
        raise
    return result
