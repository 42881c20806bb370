"""Command line entry point: ``surfelsplat <subcommand> ...``.

Machine-readable results go to files and stdout as JSON; logs go to stderr.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical or
metric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import set_threads
from .config import jsonable

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("surfelsplat")


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


def emit(obj, path=None) -> None:
    text = json.dumps(jsonable(obj), indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def _resolve_threads(arg: int | None) -> int:
    if arg is None:
        env = os.environ.get("SURFELSPLAT_THREADS")
        if env:
            try:
                arg = int(env)
            except ValueError:
                raise UsageError(f"SURFELSPLAT_THREADS must be an integer, got {env!r}") from None
    return set_threads(arg)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_scene(args) -> int:
    from .dataio import make_scene, save_scene

    params = {"views": args.views, "width": args.width, "height": args.height}
    for kv in args.param or []:
        if "=" not in kv:
            raise UsageError(f"--param expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        params[k] = json.loads(v)
    bundle = make_scene(args.kind, params, args.seed)
    save_scene(bundle, args.out)
    emit({"out": str(args.out), "kind": args.kind, "views": len(bundle.cameras), "extent": bundle.extent})
    return EXIT_OK


def _train_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if args.scene is not None:
        over["scene_dir"] = args.scene
    if args.out is not None:
        over["out_dir"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    if args.K is not None:
        over["K"] = args.K
    if args.iters_scale is not None:
        over["iters_scale"] = args.iters_scale
    if args.no_clone:
        over["clone"] = False
    if args.no_fo:
        over["freeze_opacity"] = False
    if args.no_rnc:
        over["resume_nc"] = False
    if args.threads is not None:
        over["threads"] = args.threads
    return cfg.replace(**over) if over else cfg


def cmd_train(args) -> int:
    from .dataio import checkpoint_read
    from .trainer import DivergenceError, run_pipeline

    cfg = _train_config(args)
    _resolve_threads(args.threads if args.threads is not None else (cfg.threads or None))
    out = Path(cfg.out_dir)
    stages = (1, 2, 3) if args.stage == "all" else (int(args.stage),)
    start = None
    if stages[0] > 1:
        src = Path(args.resume) if args.resume else out / f"stage{stages[0] - 1}.ckpt"
        if not src.exists():
            raise UsageError(f"stage {stages[0]} needs the previous checkpoint {src}")
        start, _ = checkpoint_read(src)
    try:
        res = run_pipeline(cfg, stages=stages, start=start, out_dir=out)
    except DivergenceError as e:
        diag = {"error": "divergence", "stage": e.stage, "iteration": e.iteration, "message": str(e)}
        emit(diag, out / "divergence.json")
        return EXIT_NUMERIC
    summary = {"out": str(out), "stages": {str(k): v for k, v in res.metrics.items()}}
    if res.scores is not None:
        summary["n_heg"] = int(len(res.scores.heg))
    emit(summary)
    return EXIT_OK


def _raster_from(args):
    from .config import RunConfig
    from .trainer import raster_options

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg, raster_options(cfg)


def cmd_render(args) -> int:
    from .dataio import checkpoint_read, load_scene, write_png
    from .raster import render

    surfels, _ = checkpoint_read(args.ckpt)
    bundle = load_scene(args.scene)
    _, opts = _raster_from(args)
    views = range(len(bundle.cameras)) if args.view is None else [args.view]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for v in views:
        if not 0 <= v < len(bundle.cameras):
            raise UsageError(f"view {v} out of range (scene has {len(bundle.cameras)})")
        r = render(surfels, bundle.cameras[v], opts)
        depth = r.depth_median
        valid = r.accum >= 0.5
        lo, hi = (depth[valid].min(), depth[valid].max()) if valid.any() else (0.0, 1.0)
        dimg = np.where(valid, (depth - lo) / max(hi - lo, 1e-12), 0.0)
        write_png(out / f"color_{v:03d}.png", np.clip(r.color, 0, 1))
        write_png(out / f"depth_{v:03d}.png", dimg)
        write_png(out / f"normal_{v:03d}.png", 0.5 * (r.normal_splat + 1.0) * (r.accum[..., None] > 0))
        np.save(out / f"depth_{v:03d}.npy", depth)
        written.append(v)
    emit({"out": str(out), "views": written})
    return EXIT_OK


def cmd_mesh(args) -> int:
    from .dataio import checkpoint_read, load_scene, write_ply
    from .trainer import extract_mesh

    surfels, _ = checkpoint_read(args.ckpt)
    bundle = load_scene(args.scene)
    cfg, _ = _raster_from(args)
    if args.voxel_size:
        cfg = cfg.replace(voxel_size=args.voxel_size)
    if args.depth_mode:
        cfg = cfg.replace(depth_mode=args.depth_mode)
    mesh, voxel = extract_mesh(surfels, bundle, cfg)
    write_ply(args.out, mesh)
    emit({"out": str(args.out), "vertices": len(mesh.vertices), "faces": len(mesh.faces), "voxel_size": voxel})
    return EXIT_OK if len(mesh) else EXIT_NUMERIC


def cmd_evaluate(args) -> int:
    from .dataio import read_ply, read_png
    from .geometry import chamfer_and_fscore, psnr, ssim

    res = {}
    if bool(args.pred) != bool(args.gt) or bool(args.pred_mesh) != bool(args.gt_mesh):
        raise UsageError("pass --pred with --gt and --pred-mesh with --gt-mesh")
    if not (args.pred or args.pred_mesh):
        raise UsageError("nothing to evaluate")
    for p in [args.pred, args.gt, args.pred_mesh, args.gt_mesh]:
        if p and not Path(p).exists():
            raise UsageError(f"missing input {p}")
    if args.pred:
        a, b = read_png(args.pred), read_png(args.gt)
        if a.shape != b.shape:
            raise NumericError(f"image dimensions differ: {a.shape} vs {b.shape}")
        res["psnr"] = psnr(a, b)
        res["ssim"] = ssim(a, b)
    if args.pred_mesh:
        ma, mb = read_ply(args.pred_mesh), read_ply(args.gt_mesh)
        if len(ma) == 0 or len(mb) == 0:
            raise NumericError("cannot evaluate an empty mesh")
        if args.tau is None:
            raise UsageError("--tau is required for mesh evaluation")
        ch = chamfer_and_fscore(ma, mb, args.tau, args.samples, args.seed)
        res.update(chamfer=ch.chamfer, fscore=ch.fscore, precision=ch.precision, recall=ch.recall,
                   tau=args.tau, voxel_size=args.voxel_size)
    emit(res, args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    terms = tuple(args.terms.split(","))
    reports = gradcheck(seeds=range(args.seeds), terms=terms, tol=args.tol, h=args.h)
    worst = {}
    for r in reports:
        for c, v in r.max_rel_err.items():
            worst[c] = max(worst.get(c, 0.0), v)
        for line in r.lines():
            log.info(line)
    ok = all(r.passed for r in reports)
    emit({"passed": ok, "tol": args.tol, "max_rel_err": worst, "scenes": args.seeds, "terms": list(terms),
          "checked": int(sum(sum(r.checked.values()) for r in reports)),
          "skipped": int(sum(r.skipped for r in reports))})
    return EXIT_OK if ok else EXIT_NUMERIC


REPORT_FIELDS = ("run", "stage_id", "psnr", "ssim", "chamfer", "fscore", "tau", "voxel_size",
                 "n_surfels", "mean_Ka", "mean_alpha")


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    rows = []
    for p in sorted(root.rglob("metrics_stage*.json")):
        m = json.loads(p.read_text())
        row = {"run": str(p.parent.relative_to(root)) or "."}
        row.update({k: m.get(k) for k in REPORT_FIELDS if k != "run"})
        rows.append(row)
    if not rows:
        raise UsageError(f"no metrics_stage*.json files under {root}")
    rows.sort(key=lambda r: (r["run"], r["stage_id"]))
    out_csv = Path(args.out) if args.out else root / "summary.csv"
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in REPORT_FIELDS})
    emit({"rows": rows, "csv": str(out_csv)}, out_csv.with_suffix(".json"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .dataio import SCENE_KINDS

    p = argparse.ArgumentParser(prog="surfelsplat", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (env SURFELSPLAT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-scene", help="generate a synthetic scene directory")
    s.add_argument("--kind", required=True, choices=SCENE_KINDS)
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--param", action="append", help="extra scene parameter key=json_value")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_scene)

    s = sub.add_parser("train", help="run the three-stage pipeline or a single stage")
    s.add_argument("--config")
    s.add_argument("--scene", help="scene directory (overrides the config)")
    s.add_argument("--out", help="output directory (overrides the config)")
    s.add_argument("--stage", default="all", choices=("1", "2", "3", "all"))
    s.add_argument("--resume", help="checkpoint to start from when skipping earlier stages")
    s.add_argument("--seed", type=int)
    s.add_argument("--K", type=float, help="percent of surfels selected as high-error")
    s.add_argument("--iters-scale", type=float)
    s.add_argument("--no-clone", action="store_true")
    s.add_argument("--no-fo", action="store_true", help="do not freeze opacity in Stage 3")
    s.add_argument("--no-rnc", action="store_true", help="do not resume normal consistency in Stage 3")
    s.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render color/depth/normal maps from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--view", type=int)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("mesh", help="TSDF fusion + marching cubes to a PLY mesh")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--config")
    s.add_argument("--voxel-size", type=float)
    s.add_argument("--depth-mode", choices=("median", "mean"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("evaluate", help="PSNR/SSIM of images, Chamfer/F-score of meshes")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--pred-mesh")
    s.add_argument("--gt-mesh")
    s.add_argument("--tau", type=float)
    s.add_argument("--voxel-size", type=float)
    s.add_argument("--samples", type=int, default=100000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--terms", default="c,d,n,all")
    s.add_argument("--h", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="aggregate per-stage metrics into CSV + JSON")
    s.add_argument("runs")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .config import ConfigError
    from .dataio import DataIOError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "train":
            _resolve_threads(args.threads)
        return args.func(args)
    except (UsageError, ConfigError, DataIOError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
