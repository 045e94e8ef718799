"""Command-line entry point: ``quantumgs {gen,train,render,eval,gradcheck,dirmap,ablate}``.

Data goes to stdout as comma-separated rows; logs go to stderr. Each command
writes its artifacts under a per-run directory ``<runs>/<timestamp>-seed<N>``
unless ``--run-dir`` names one. Exit codes: 0 success, 1 usage error,
2 numerical failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import scene_io as io
from .train import METRIC_FIELDS, NumericalError, RunConfig

log = logging.getLogger("quantumgs")

SEED_ENV = "QUANTUMGS_SEED"
RUNS_ENV = "QUANTUMGS_RUNS"
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
VARIANTS = ("no_sh", "only_opacity", "only_sh", "full")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    v = os.environ.get(SEED_ENV)
    if v is None:
        return 0
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={v!r} is not an integer") from None


def _run_dir(args, seed: int) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUNS_ENV, "runs"))
        base = f"{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
        d = root / base
        k = 1
        while d.exists():
            d = root / f"{base}-{k}"
            k += 1
    d.mkdir(parents=True, exist_ok=True)
    return d


def _emit(rows: list[dict], fieldnames) -> None:
    w = csv.DictWriter(sys.stdout, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    sys.stdout.flush()


# -- configuration ------------------------------------------------------------------------

_CFG_FLAGS = ("pipeline", "modulation", "iters", "lam", "lr_preset", "ansatz_layers", "hash_levels",
              "hash_log2_table", "dropout", "log_every", "checkpoint_every")


def _add_config_flags(p):
    p.add_argument("--config", help="run config (.cfg, key=value)")
    p.add_argument("--pipeline", choices=("I", "II", "none"))
    p.add_argument("--modulation", choices=VARIANTS)
    p.add_argument("--iters", type=int)
    p.add_argument("--lam", type=float, help="D-SSIM weight")
    p.add_argument("--lr-preset", dest="lr_preset", choices=("desk", "long"))
    p.add_argument("--ansatz-layers", dest="ansatz_layers", type=int)
    p.add_argument("--hash-levels", dest="hash_levels", type=int)
    p.add_argument("--hash-log2-table", dest="hash_log2_table", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def resolve_config(args) -> RunConfig:
    """Defaults < config file < environment seed < flags."""
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        try:
            values = {k: getattr(RunConfig.loads(path.read_text()), k)
                      for k in io.parse_kv(path.read_text())}
        except ValueError as e:
            raise UsageError(f"{path}: {e}") from None
    if "seed" not in values:
        values["seed"] = _default_seed()
    for k in _CFG_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = RunConfig(**values)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if cfg.iters < 0:
        raise UsageError("--iters must be >= 0")
    return cfg


def _load_dataset(path):
    if path is None:
        raise UsageError("--dataset is required")
    if not Path(path, "dataset.cfg").exists():
        raise UsageError(f"no dataset at {path} (create one with `quantumgs gen`)")
    return io.load_dataset(path)


def _dataset_for_checkpoint(args, params):
    if getattr(args, "dataset", None):
        return _load_dataset(args.dataset)[1]
    if not params:
        raise UsageError("checkpoint has no dataset parameters; pass --dataset")
    from .synthetic import generate_scene

    kw = dict(params)
    return generate_scene(kw.pop("num_gaussians"), kw.pop("kind"), kw.pop("seed"), **kw)[1]


def _load_checkpoint(path):
    if not path or not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    return io.load_checkpoint(path)


# -- commands -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .synthetic import generate_scene

    seed = args.seed if args.seed is not None else _default_seed()
    if args.gaussians < 1:
        raise UsageError("--gaussians must be >= 1")
    run = _run_dir(args, seed)
    init, ds = generate_scene(args.gaussians, args.kind, seed, num_views=args.views, width=args.width,
                              height=args.height, elevation_deg=args.elevation,
                              radius_factor=args.radius_factor, background=args.background)
    log.info("dataset: %s", ds.params.to_dict())
    io.save_dataset(run, init, ds)
    _emit([{"dataset": str(run), "checksum": ds.checksum(), "views": len(ds.cameras),
            "gaussians": args.gaussians}], ["dataset", "checksum", "views", "gaussians"])
    return EXIT_OK


def cmd_train(args) -> int:
    from . import plotting
    from .train import build_state, render_view, train

    init, ds = _load_dataset(args.dataset)
    if args.resume:
        state, _ = _load_checkpoint(args.resume)
        cfg = state.config
        if args.iters is not None:
            cfg.iters = state.step + args.iters
    else:
        cfg = resolve_config(args)
        state = build_state(cfg, init)
    run = _run_dir(args, cfg.seed)
    log.info("resolved config:\n%s", cfg.dumps().rstrip())
    io.save_config(run / "config.cfg", cfg)
    ckpt = run / "checkpoint.qgsc"
    params = ds.params.to_dict()

    def save(st):
        io.save_checkpoint(ckpt, st, params)

    save(state)
    try:
        rows = train(state, ds.cameras, ds.images, background=ds.background,
                     metrics_path=run / "metrics.csv", on_checkpoint=save, workers=args.workers,
                     initial_eval=state.step == 0)
    except NumericalError as e:
        io.save_checkpoint(run / "last_good.qgsc", state, params)
        log.error("%s; last good state saved to %s", e, run / "last_good.qgsc")
        return EXIT_NUMERICAL
    save(state)
    for v in range(min(args.previews, len(ds.cameras))):
        io.write_ppm(run / f"preview_{v:03d}.ppm", render_view(state, ds.cameras[v], ds.background))
    if rows:
        plotting.plot_training_curves({f"pipeline {cfg.pipeline}": rows}, run / "curves.png")
    final = rows[-1] if rows else {"step": state.step}
    _emit([{"run_dir": str(run), **final}], ["run_dir", *METRIC_FIELDS])
    return EXIT_OK


def cmd_render(args) -> int:
    from .train import render_view

    state, params = _load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(args, params)
    views = range(len(ds.cameras)) if args.view is None else [args.view]
    if args.view is not None and not 0 <= args.view < len(ds.cameras):
        raise UsageError(f"--view {args.view} out of range (0..{len(ds.cameras) - 1})")
    run = _run_dir(args, state.config.seed)
    out = []
    for v in views:
        path = run / f"render_{v:03d}.{args.format}"
        io.write_image(path, render_view(state, ds.cameras[v], ds.background))
        out.append({"view": v, "path": str(path)})
    _emit(out, ["view", "path"])
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    state, params = _load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(args, params)
    row = evaluate(state, ds.cameras, ds.images, ds.background, args.workers)
    run = _run_dir(args, state.config.seed)
    io.write_metrics(run / "eval.csv", [row], METRIC_FIELDS)
    _emit([row], METRIC_FIELDS)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck, gradcheck_scene
    from .render import Camera

    seed = args.seed if args.seed is not None else _default_seed()
    if args.gaussians > 4 or args.size > 8:
        raise UsageError("gradcheck is limited to 4 Gaussians and 8x8 pixels")
    if args.scene:
        scene = io.load_scene(args.scene)
        if len(scene) > 4:
            raise UsageError(f"{args.scene} has {len(scene)} Gaussians; gradcheck takes at most 4")
        cam = Camera.look_at((1.6, 0.0, 0.6), focal=1.2 * args.size, width=args.size, height=args.size)
        setup = (scene, cam)
    else:
        setup = gradcheck_scene(seed, args.gaussians, args.size)
    pipelines = ("I", "II") if args.pipeline == "both" else (args.pipeline,)
    base = None
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} not found")
        base = RunConfig.loads(Path(args.config).read_text())
    rows, ok = [], True
    for p in pipelines:
        cfg = None
        if base is not None:
            from dataclasses import replace

            cfg = replace(base, pipeline=p, dropout=0.0)
        rep = gradcheck(p, seed=seed, scene=setup, corrupt=args.corrupt, cfg=cfg)
        for line in rep.lines():
            log.info(line)
        ok &= rep.passed
        for r in rep.results:
            rows.append({"pipeline": p, "group": r.group, "checked": r.checked, "size": r.size,
                         "rel_err": r.rel_err, "status": "PASS" if r.passed else "FAIL"})
    _emit(rows, ["pipeline", "group", "checked", "size", "rel_err", "status"])
    if not ok:
        log.error("gradient check failed for: %s",
                  ", ".join(f"{r['pipeline']}:{r['group']}" for r in rows if r["status"] == "FAIL"))
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_dirmap(args) -> int:
    from . import plotting
    from .train import _sh_degree, direction_response

    state, _ = _load_checkpoint(args.checkpoint)
    n = len(state.gaussians)
    if not 0 <= args.index < n:
        raise UsageError(f"--index {args.index} out of range for a scene of {n} Gaussians")
    if args.width < 1 or args.height < 1:
        raise UsageError("--width and --height must be positive")
    resp = direction_response(state.gaussians, state.modulator, args.index, args.width, args.height,
                              _sh_degree(state.config))
    run = _run_dir(args, state.config.seed)
    io.write_ppm(run / f"dirmap_{args.index:03d}.ppm", resp["rgb"])
    plotting.plot_direction_response(resp, run / f"dirmap_{args.index:03d}.png",
                                     title=f"Gaussian {args.index}, step {state.step}")
    _emit([{"index": args.index, "width": args.width, "height": args.height,
            "response_range": response_range(resp),
            "color_factor_min": float(resp["color_factor"].min()),
            "color_factor_max": float(resp["color_factor"].max()),
            "opacity_factor_min": float(resp["opacity_factor"].min()),
            "opacity_factor_max": float(resp["opacity_factor"].max())}],
          ["index", "width", "height", "response_range", "color_factor_min", "color_factor_max",
           "opacity_factor_min", "opacity_factor_max"])
    return EXIT_OK


def response_range(resp: dict) -> float:
    """Largest per-channel spread (max - min) of a direction response map."""
    rgb = resp["rgb"].reshape(-1, 3)
    return float(np.max(rgb.max(axis=0) - rgb.min(axis=0)))


def run_variant(cfg: RunConfig, dataset_dir, variant: str, workers: int = 1) -> dict:
    """Train one modulation variant from the dataset's initialization; final metrics row."""
    from dataclasses import replace

    from .train import build_state, evaluate, train

    init, ds = io.load_dataset(dataset_dir)
    vcfg = replace(cfg, modulation=variant, log_every=0)
    state = build_state(vcfg, init)
    train(state, ds.cameras, ds.images, background=ds.background)
    return {"variant": variant, **evaluate(state, ds.cameras, ds.images, ds.background, workers)}


def cmd_ablate(args) -> int:
    from . import plotting

    _load_dataset(args.dataset)
    cfg = resolve_config(args)
    if cfg.pipeline == "none":
        raise UsageError("ablation needs a quantum pipeline (I or II)")
    variants = args.variants.split(",")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {VARIANTS}")
    log.info("resolved config:\n%s", cfg.dumps().rstrip())
    run = _run_dir(args, cfg.seed)
    if args.workers > 1 and len(variants) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(min(args.workers, len(variants))) as pool:
            rows = list(pool.map(run_variant, [cfg] * len(variants), [args.dataset] * len(variants),
                                 variants))
    else:
        rows = [run_variant(cfg, args.dataset, v) for v in variants]
    fields = ["variant", *METRIC_FIELDS]
    io.write_metrics(run / "ablation.csv", rows, fields)
    plotting.plot_ablation(rows, run / "ablation.png")
    _emit(rows, fields)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV} or 0)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="worker pool width (results do not depend on it)")
    common.add_argument("--run-dir", dest="run_dir", help="output directory (default: runs/<timestamp>-seed<N>)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="quantumgs", description="Quantum-modulated Gaussian splatting at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--gaussians", type=int, default=8)
    g.add_argument("--kind", choices=("step_lobe", "specular_spot", "sh_smooth"), default="step_lobe")
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--elevation", type=float, default=30.0)
    g.add_argument("--radius-factor", dest="radius_factor", type=float, default=4.0)
    g.add_argument("--background", choices=("black", "white"), default="black")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--previews", type=int, default=2, help="number of preview renders")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render views from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset")
    r.add_argument("--view", type=int)
    r.add_argument("--format", choices=("ppm", "png"), default="png")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on its dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    c.add_argument("--pipeline", choices=("I", "II", "both"), default="both")
    c.add_argument("--config")
    c.add_argument("--scene", help=".qgs scene with at most 4 Gaussians")
    c.add_argument("--gaussians", type=int, default=2)
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dirmap", parents=[common], help="directional response map of one Gaussian")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--index", type=int, default=0)
    d.add_argument("--width", type=int, default=64)
    d.add_argument("--height", type=int, default=32)
    d.set_defaults(func=cmd_dirmap)

    a = sub.add_parser("ablate", parents=[common], help="train each modulation variant")
    a.add_argument("--dataset", required=True)
    a.add_argument("--variants", default=",".join(VARIANTS))
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose + 1, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s",
                        force=True)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    log.info("command %s with %s", args.command,
             {k: v for k, v in vars(args).items() if k != "func"})
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        print(f"quantumgs: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        log.error("%s", e)
        return EXIT_NUMERICAL
    except io.FormatError as e:
        print(f"quantumgs: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
