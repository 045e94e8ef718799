"""Training loop, run configuration and learning-rate presets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import AdamState, ParamGroup
from .encoding import HashGridConfig
from .pipeline import PipelineConfig, build_modulator
from .render import GaussianParams, GaussianScene, rasterize

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "psnr", "ssim", "l1", "loss")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class RunConfig:
    """Flat, human-editable run configuration (serialized as key=value)."""

    pipeline: str = "I"  # "I", "II" or "none" (plain SH baseline)
    modulation: str = "full"
    iters: int = 2000
    seed: int = 0
    lam: float = 0.2
    ansatz_layers: int = 4
    hash_levels: int = 8
    hash_features: int = 2
    hash_log2_table: int = 14
    hash_base_res: int = 16
    hash_max_res: int = 512
    dropout: float = 0.1
    lr_preset: str = "desk"
    lr_mu: float = 1.6e-4
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 0.05
    lr_sh_dc: float = 2.5e-3
    lr_sh_rest: float = 2.5e-3 / 20.0
    lr_hash: float = -1.0  # negative: take the preset value
    lr_hypernet: float = -1.0
    lr_encoder: float = -1.0
    lr_quantum: float = -1.0
    log_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.pipeline not in ("I", "II", "none"):
            raise ValueError("pipeline must be I, II or none")
        if self.lr_preset not in LR_PRESETS:
            raise ValueError(f"lr_preset must be one of {sorted(LR_PRESETS)}")

    def pipeline_config(self, bounds) -> PipelineConfig:
        grid = dict(num_levels=self.hash_levels, features_per_level=self.hash_features,
                    table_size=2 ** self.hash_log2_table, base_resolution=self.hash_base_res,
                    max_resolution=self.hash_max_res)
        return PipelineConfig(
            pipeline="I" if self.pipeline == "none" else self.pipeline,
            ansatz_layers=self.ansatz_layers, modulation=self.modulation,
            spatial_grid=HashGridConfig(bounds=bounds, **grid),
            direction_grid=HashGridConfig(**grid), dropout=self.dropout)

    def network_lr(self, key: str) -> float:
        v = getattr(self, f"lr_{key}")
        return LR_PRESETS[self.lr_preset][key] if v < 0 else v

    # key=value serialization
    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in types:
                raise ValueError(f"line {lineno}: unknown key {k!r}")
            kw[k] = _coerce(types[k], v)
        return cls(**kw)


def _coerce(t, v: str):
    t = t if isinstance(t, str) else t.__name__
    if t == "int":
        return int(v)
    if t == "float":
        return float(v)
    return v


# Pipeline I: hash + hypernetwork. Pipeline II: encoders (hash grids and
# projection MLPs) and the quantum part (ansatz + decoder). "long" suits
# runs of tens of thousands of steps; "desk" moves the networks within ~2000.
LR_PRESETS = {
    "long": {"hash": 5e-5, "hypernet": 5e-5, "encoder": 1e-3, "quantum": 7.5e-3},
    "desk": {"hash": 1e-2, "hypernet": 1e-3, "encoder": 1e-2, "quantum": 1e-2},
}


def _group_lr(cfg: RunConfig, name: str) -> float:
    if cfg.pipeline == "I":
        return cfg.network_lr("hash" if name == "hash" else "hypernet")
    if name in ("hash", "hash_dir", "proj_spatial", "proj_dir"):
        return cfg.network_lr("encoder")
    return cfg.network_lr("quantum")


@dataclass
class TrainState:
    config: RunConfig
    gaussians: GaussianParams
    modulator: object
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    losses: list = field(default_factory=list)

    def groups(self) -> dict[str, list]:
        out = {f"gaussian.{k}": [t] for k, t in self.gaussians.groups().items()}
        if self.modulator is not None:
            out.update(self.modulator.param_groups())
        return out


def build_state(cfg: RunConfig, scene: GaussianScene) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    gaussians = GaussianParams.from_scene(scene)
    if cfg.modulation == "no_sh" and cfg.pipeline != "none":
        gaussians.sh.value[:, 1:, :] = 0.0
    modulator = None
    if cfg.pipeline != "none":
        modulator = build_modulator(cfg.pipeline_config(scene.bounds), rng)
    sh_lr = np.full((1, 16, 1), cfg.lr_sh_rest)
    sh_lr[0, 0, 0] = cfg.lr_sh_dc
    extent = float(np.max(np.abs(np.asarray(scene.bounds))))
    groups = [
        ParamGroup("gaussian.mu", [gaussians.mu], cfg.lr_mu * extent),
        ParamGroup("gaussian.rot", [gaussians.rot], cfg.lr_rot),
        ParamGroup("gaussian.scale", [gaussians.scale], cfg.lr_scale),
        ParamGroup("gaussian.opacity", [gaussians.opacity_logit], cfg.lr_opacity),
        ParamGroup("gaussian.sh", [gaussians.sh], sh_lr),
    ]
    if modulator is not None:
        for name, ts in modulator.param_groups().items():
            groups.append(ParamGroup(name, ts, _group_lr(cfg, name)))
    return TrainState(cfg, gaussians, modulator, AdamState(groups), rng)


def _sh_degree(cfg: RunConfig) -> int:
    return 0 if cfg.modulation == "no_sh" else 3


def train_step(state: TrainState, cam, target, background=None) -> float:
    cfg = state.config
    params = state.adam.all_params()
    with ad.Tape() as tape:
        rgb, _ = rasterize(state.gaussians, cam, state.modulator, sh_degree=_sh_degree(cfg),
                           background=background, training=True, rng=state.rng)
        loss = losses.loss(rgb, target, cfg.lam)
        if not np.isfinite(loss.value):
            raise NumericalError(f"non-finite loss at step {state.step}")
        grads = tape.gradient(loss, params)
    if cfg.modulation == "no_sh" and cfg.pipeline != "none":
        grads[4] = grads[4].copy()
        grads[4][:, 1:, :] = 0.0
    state.adam.apply(grads)
    state.step += 1
    value = float(loss.value)
    state.losses.append(value)
    return value


def render_view(state: TrainState, cam, background=None) -> np.ndarray:
    with ad.no_tape():
        rgb, _ = rasterize(state.gaussians, cam, state.modulator, sh_degree=_sh_degree(state.config),
                           background=background)
    return rgb.value


def evaluate(state: TrainState, cameras, images, background=None, workers: int = 1) -> dict:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            renders = list(pool.map(lambda c: render_view(state, c, background), cameras))
    else:
        renders = [render_view(state, c, background) for c in cameras]
    renders = np.stack(renders)
    mse = float(np.mean((renders - images) ** 2))
    return {
        "step": state.step,
        "psnr": losses.PSNR_CAP if mse == 0 else min(losses.PSNR_CAP, 10.0 * math.log10(1.0 / mse)),
        "ssim": float(np.mean([losses.ssim(r, t) for r, t in zip(renders, images)])),
        "l1": float(np.mean(np.abs(renders - images))),
        "loss": float(np.mean([losses.loss(r, t, state.config.lam).value for r, t in zip(renders, images)])),
    }


def next_view(state: TrainState, num_views: int) -> int:
    return int(state.rng.integers(num_views))


def train(state: TrainState, cameras, images, *, iters=None, background=None, metrics_path=None,
          on_checkpoint=None, workers: int = 1, initial_eval: bool = False):
    """Run ``iters`` steps (default: up to ``config.iters``); returns metric rows.

    With ``initial_eval`` a row for the starting state is logged first.
    """
    cfg = state.config
    stop = cfg.iters if iters is None else state.step + iters
    rows = []
    writer = None
    fh = None
    if metrics_path is not None:
        new = not Path(metrics_path).exists() or state.step == 0
        fh = open(metrics_path, "w" if new else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
    try:
        if initial_eval:
            row = evaluate(state, cameras, images, background, workers)
            rows.append(row)
            if writer:
                writer.writerow(row)
        while state.step < stop:
            v = next_view(state, len(cameras))
            loss = train_step(state, cameras[v], images[v], background)
            if cfg.log_every and (state.step % cfg.log_every == 0 or state.step == stop):
                row = evaluate(state, cameras, images, background, workers)
                rows.append(row)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                log.info("step %d loss %.5f psnr %.3f", state.step, loss, row["psnr"])
            if on_checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                on_checkpoint(state)
    finally:
        if fh:
            fh.close()
    return rows


# -- single-Gaussian directional fit ------------------------------------------------------

def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    ph = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([r * np.cos(ph), r * np.sin(ph), z], axis=1)


@dataclass
class DirectionalFit:
    sh_mse: float  # best unclamped degree-3 SH least-squares error
    fit_mse: float  # trained modulated model, same quadrature
    losses: list
    modulator: object
    sh: np.ndarray

    @property
    def ratio(self) -> float:
        return self.fit_mse / self.sh_mse


def fit_directional(target, *, steps: int = 2000, seed: int = 0, num_directions: int = 1024,
                    pipeline: str = "I", modulation: str = "full", lr_sh: float = 2.5e-3,
                    quadrature=None, cfg: RunConfig | None = None) -> DirectionalFit:
    """Fit one Gaussian's view-dependent color to ``target`` over the sphere.

    The Gaussian's SH starts at the least-squares optimum; the modulator is
    trained jointly with it by full-batch Adam on a Fibonacci direction set
    (mean squared RGB error). Both models are scored on the same quadrature.
    """
    from .render import sh_basis_np, sh_color
    from .synthetic import directional_mse, sh_least_squares, sphere_quadrature

    quad = sphere_quadrature() if quadrature is None else quadrature
    coef, ls_mse = sh_least_squares(target, quadrature=quad)
    cfg = cfg or RunConfig(pipeline=pipeline, modulation=modulation, seed=seed)
    bounds = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    rng = np.random.default_rng(seed)
    modulator = build_modulator(cfg.pipeline_config(bounds), rng)
    sh = ad.Tensor(coef.reshape(1, 16, 3).copy(), requires_grad=True, name="sh")
    groups = [ParamGroup("sh", [sh], lr_sh)]
    groups += [ParamGroup(k, v, _group_lr(cfg, k)) for k, v in modulator.param_groups().items()]
    adam = AdamState(groups)
    mu = ad.Tensor(np.zeros((1, 3)))

    def color(dirs, basis, training):
        cf, _ = modulator.factors(mu, ad.Tensor(dirs), training=training, rng=rng)
        return sh_color(sh * cf, basis)

    dirs = fibonacci_directions(num_directions)
    basis = sh_basis_np(dirs)
    truth = target(dirs)
    history = []
    params = adam.all_params()
    for _ in range(steps):
        with ad.Tape() as tape:
            c = color(dirs, basis, True)
            diff = c - truth
            loss = ad.mean(diff * diff)
            grads = tape.gradient(loss, params)
        adam.apply(grads)
        history.append(float(loss.value))
    with ad.no_tape():
        pred = color(quad[0], sh_basis_np(quad[0]), False).value
    fit = directional_mse(pred, target(quad[0]), quad[1])
    return DirectionalFit(ls_mse, fit, history, modulator, sh.value[0].copy())


# -- directional response maps --------------------------------------------------------------

def equirect_directions(width: int, height: int) -> np.ndarray:
    """Unit directions at pixel centers of a (height, width) theta/phi grid.

    Rows run theta from 0 (+z) to pi, columns run phi from 0 to 2 pi.
    """
    if width < 1 or height < 1:
        raise ValueError("resolution must be positive")
    theta = (np.arange(height) + 0.5) * math.pi / height
    phi = (np.arange(width) + 0.5) * 2.0 * math.pi / width
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.sin(tt) * np.cos(pp), np.sin(tt) * np.sin(pp), np.cos(tt)], axis=-1)


def direction_response(gaussians, modulator, index: int, width: int = 64, height: int = 32,
                       sh_degree: int = 3) -> dict:
    """Modulated color of one Gaussian seen from every direction of an equirect grid.

    Returns ``rgb`` (H, W, 3), the mean color factor and the opacity factor
    (both (H, W)); without a modulator both factors are exactly 1.
    """
    from .render import sh_basis_np, sh_color

    g = gaussians if isinstance(gaussians, GaussianScene) else gaussians.to_scene()
    if not 0 <= index < len(g):
        raise IndexError(f"Gaussian index {index} out of range for a scene of {len(g)}")
    d = equirect_directions(width, height).reshape(-1, 3)
    n = len(d)
    basis = sh_basis_np(d)
    sh = np.broadcast_to(g.sh[index], (n, 16, 3))
    with ad.no_tape():
        if modulator is None:
            rgb = sh_color(sh, basis, sh_degree).value
            cf, of = np.ones((n, 1)), np.ones(n)
        else:
            cf_t, of_t = modulator.factors(ad.Tensor(g.mu[index][None]), ad.Tensor(d))
            cf, of = cf_t.value, of_t.value
            if modulator.mode.variant == "no_sh":
                rgb = np.clip(sh_color(sh, basis, 0).value * cf, 0.0, 1.0)
            else:
                rgb = sh_color(sh * cf, basis, sh_degree).value
    return {"rgb": rgb.reshape(height, width, 3),
            "color_factor": cf.reshape(n, -1).mean(axis=1).reshape(height, width),
            "opacity_factor": np.broadcast_to(of, (n,)).reshape(height, width).copy()}
