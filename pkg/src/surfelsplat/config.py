"""Run configuration shared by the trainer and the command line."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


def jsonable(obj):
    """Replace non-finite floats by the strings 'inf', '-inf', 'nan'; numpy scalars by Python ones."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class RunConfig:
    # paths and scene
    scene_dir: str = ""  # load a scene directory; empty means generate ``scene_kind``
    scene_kind: str = "plane_plus_sphere"
    scene_params: dict = field(default_factory=dict)
    out_dir: str = "run"
    seed: int = 0
    threads: int = 0  # 0 = all available cores

    # stage lengths; effective iterations = round(iters * iters_scale)
    iters_stage1: int = 30000
    iters_stage2: int = 10000
    iters_stage3: int = 20000
    iters_scale: float = 0.1

    # loss weights
    alpha_dd: float = 0.0
    beta_nc: float = 0.05
    lambda_ssim: float = 0.2

    # error-driven refinement
    K: float = 1.0
    clone: bool = True
    freeze_opacity: bool = True
    resume_nc: bool = True
    stage3_clones_only: bool = False

    # initialization
    n_init_points: int = 1000
    init_opacity: float = 0.1
    sh_degree: int = 3
    sh_up_every: int = 1000

    # Adam
    lr_mu: float = 1.6e-4
    lr_mu_final_factor: float = 0.01
    lr_mu_scale_extent: bool = True
    lr_quat: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_sh_rest_div: float = 20.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    # adaptive density control (stage 1 only)
    densify: bool = True
    densify_from: int = 500
    densify_until_frac: float = 0.6
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_alpha: float = 0.05
    opacity_reset_every: int = 3000
    reset_alpha: float = 0.01

    # rasterizer
    near: float = 0.01
    cutoff: float = 3.0
    lowpass_sigma: float = 0.7071
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    max_contrib: int = 64
    tile_size: int = 16
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    # evaluation
    voxel_size: float = 0.0  # 0 = scene extent / 64
    tau: float = 0.0  # 0 = 2 * voxel_size
    n_samples: int = 100000
    depth_mode: str = "median"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def replace(self, **kw) -> "RunConfig":
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        for name in ("iters_stage1", "iters_stage2", "iters_stage3", "n_init_points", "max_contrib",
                     "tile_size", "n_samples", "densify_every", "sh_up_every"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("alpha_dd", "beta_nc", "lambda_ssim", "iters_scale", "voxel_size", "tau"):
            if float(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.K <= 100:
            raise ConfigError("K must be in (0, 100]")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in 0..3")
        if self.depth_mode not in ("median", "mean"):
            raise ConfigError("depth_mode must be 'median' or 'mean'")
        if not 0 < self.init_opacity < 1:
            raise ConfigError("init_opacity must be in (0, 1)")
        if len(self.background) != 3:
            raise ConfigError("background must have three components")

    def stage_iters(self, stage: int) -> int:
        base = {1: self.iters_stage1, 2: self.iters_stage2, 3: self.iters_stage3}[stage]
        return int(round(base * self.iters_scale))
