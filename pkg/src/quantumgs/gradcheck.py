"""Finite-difference check of every trainable parameter group against the tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .render import rasterize
from .train import RunConfig, build_state

THRESHOLD = 1e-3
STEP = 1e-4
FULL_CHECK = 64  # groups up to this size are checked entry by entry
TOP_K = 32
RANDOM_K = 32


@dataclass
class GroupResult:
    group: str
    size: int
    checked: int
    max_abs_err: float
    scale: float
    rel_err: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err <= THRESHOLD)


@dataclass
class GradcheckReport:
    pipeline: str
    results: list[GroupResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed_groups(self) -> list[str]:
        return [r.group for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            out.append(f"{'PASS' if r.passed else 'FAIL'} pipeline={self.pipeline} group={r.group} "
                       f"checked={r.checked}/{r.size} rel_err={r.rel_err:.3e}")
        return out


def gradcheck_scene(seed: int = 0, num_gaussians: int = 2, size: int = 8):
    """A tiny scene with Gaussians covering most of a size x size view."""
    from .synthetic import generate_scene

    init, ds = generate_scene(num_gaussians, "step_lobe", seed, num_views=2, width=size,
                              height=size, radius_factor=1.6, focal_factor=1.2)
    return init, ds.cameras[0]


def offset_target(rgb: np.ndarray, rng, offset: float = 0.2) -> np.ndarray:
    """Target at +-offset from ``rgb`` per pixel: keeps every L1 residual far from its kink."""
    return rgb + offset * rng.choice([-1.0, 1.0], size=rgb.shape)


def _face_distance(q: np.ndarray, grid) -> float:
    """Smallest distance (world units) from points ``q`` to any cell face of ``grid``."""
    lo = np.asarray(grid.config.bounds[0])
    hi = np.asarray(grid.config.bounds[1])
    best = np.inf
    for res in grid.resolutions:
        x = (q - lo) / (hi - lo) * res
        best = min(best, float(np.min(np.abs(x - np.round(x)) / res * (hi - lo))))
    return best


def clear_cell_faces(scene, cam, modulator, margin: float = 10 * STEP):
    """Nudge Gaussian means so no hash lookup sits within ``margin`` of a cell face.

    Trilinear interpolation has kinks on cell faces; a central difference that
    straddles one measures the average of two one-sided slopes.
    """
    from .encoding import direction_to_unit_box

    if modulator is None:
        return scene
    scene = scene.copy()
    steps = [0.0] + [s * k * 2.0 * margin for k in range(1, 200) for s in (1.0, -1.0)]
    for i in range(len(scene)):
        base = scene.mu[i].copy()
        for dx in steps:
            mu = base + dx
            ok = _face_distance(mu[None], modulator.grid) > margin
            dir_grid = getattr(modulator, "dir_grid", None)
            if ok and dir_grid is not None:
                d = (mu - cam.position) / np.linalg.norm(mu - cam.position)
                lo, hi = (np.asarray(b) for b in dir_grid.config.bounds)
                q = direction_to_unit_box(d) * (hi - lo) + lo
                ok = _face_distance(q[None], dir_grid) > margin
            if ok:
                scene.mu[i] = mu
                break
    return scene


def _sample(entries: list[tuple[int, int]], analytic: np.ndarray, rng) -> list[int]:
    n = len(entries)
    if n <= FULL_CHECK:
        return list(range(n))
    top = list(np.argsort(-np.abs(analytic), kind="stable")[:TOP_K])
    rest = np.setdiff1d(np.arange(n), top)
    return sorted(top + list(rng.choice(rest, size=RANDOM_K, replace=False)))


def gradcheck(pipeline: str = "I", *, seed: int = 0, perturb: float = 0.05, scene=None,
              corrupt: str | None = None, modulation: str = "full", lam: float = 0.2,
              cfg: RunConfig | None = None) -> GradcheckReport:
    """Compare tape gradients of the full training loss with central differences.

    Network weights (zero-initialized heads included) get N(0, ``perturb``)
    noise so no group sits at a trivially zero gradient. Dropout is off.
    ``corrupt`` names a group whose analytic gradient is deliberately damaged
    (a test hook for the failure path). The target image sits +-0.2 from the
    initial render so the L1 term is smooth around the evaluation point. The error for a group is
    max |analytic - numeric| / max(max |numeric|, 1e-8) over checked entries.
    """
    rng = np.random.default_rng(seed)
    init, cam = scene if scene is not None else gradcheck_scene(seed)
    cfg = cfg or RunConfig(pipeline=pipeline, modulation=modulation, dropout=0.0, lam=lam,
                           hash_levels=4, hash_log2_table=10, hash_max_res=64, seed=seed)
    state = build_state(cfg, init)
    if state.modulator is not None:
        state = build_state(cfg, clear_cell_faces(init, cam, state.modulator))
    net_groups = state.modulator.param_groups() if state.modulator is not None else {}
    for ts in net_groups.values():
        for t in ts:
            t.value += rng.normal(0.0, perturb, t.value.shape)
    degree = 0 if cfg.modulation == "no_sh" else 3

    def render():
        return rasterize(state.gaussians, cam, state.modulator, sh_degree=degree)[0]

    with ad.no_tape():
        target = offset_target(render().value, rng)

    def loss_value(training_tape: bool):
        return losses.loss(render(), target, cfg.lam)

    params = state.adam.all_params()
    with ad.Tape() as tape:
        out = loss_value(True)
        grads = tape.gradient(out, params)
    grad_of = {id(p): g for p, g in zip(params, grads)}

    results = []
    for group in state.adam.groups:
        entries = [(ti, k) for ti, p in enumerate(group.params) for k in range(p.value.size)]
        analytic = np.concatenate([grad_of[id(p)].reshape(-1) for p in group.params])
        if corrupt == group.name:
            analytic = 2.0 * analytic + 1.0
        picks = _sample(entries, analytic, rng)
        numeric = np.empty(len(picks))
        for j, e in enumerate(picks):
            ti, k = entries[e]
            flat = group.params[ti].value.reshape(-1)
            orig = flat[k]
            with ad.no_tape():
                flat[k] = orig + STEP
                fp = float(loss_value(False).value)
                flat[k] = orig - STEP
                fm = float(loss_value(False).value)
            flat[k] = orig
            numeric[j] = (fp - fm) / (2.0 * STEP)
        a = analytic[picks]
        err = float(np.max(np.abs(a - numeric)))
        scale = float(np.max(np.abs(numeric)))
        results.append(GroupResult(group.name, len(entries), len(picks), err, scale,
                                   err / max(scale, 1e-8)))
    return GradcheckReport(pipeline, results)
