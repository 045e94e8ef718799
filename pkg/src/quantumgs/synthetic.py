"""Synthetic view-dependent targets and toy scenes with known ground truth."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .render import NUM_SH, SH_C0, Camera, GaussianScene, rasterize, sh_basis_np

KINDS = ("sh_smooth", "step_lobe", "specular_spot")
SPOT_KAPPA = 100.0


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _random_center(rng, elevation):
    az = rng.uniform(0.0, 2.0 * np.pi)
    if elevation is None:
        z = rng.uniform(-1.0, 1.0)
    else:
        z = math.sin(elevation + rng.uniform(-0.25, 0.25))
    r = math.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * math.cos(az), r * math.sin(az), z])


@dataclass
class DirectionalTarget:
    """A function from unit directions (..., 3) to RGB (..., 3)."""

    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, d) -> np.ndarray:
        d = _unit(d)
        p = self.params
        if self.kind == "sh_smooth":
            sh = np.asarray(p["sh"]).reshape(NUM_SH, 3)
            basis = sh_basis_np(d.reshape(-1, 3))
            return np.clip(basis @ sh + 0.5, 0.0, 1.0).reshape(d.shape)
        if self.kind == "step_lobe":
            inside = (d @ np.asarray(p["center"])) > math.cos(p["half_angle"])
            lo, hi = np.asarray(p["outside"]), np.asarray(p["inside"])
            return np.where(inside[..., None], hi, lo)
        if self.kind == "specular_spot":
            w = np.exp(SPOT_KAPPA * (d @ np.asarray(p["center"]) - 1.0))[..., None]
            return np.clip(np.asarray(p["base"]) + w * np.asarray(p["spot"]), 0.0, 1.0)
        raise ValueError(f"unknown target kind {self.kind!r}")


def generate_directional_target(kind: str, seed: int, *, center_elevation=None, **overrides) -> DirectionalTarget:
    """Random directional color function of the given kind.

    ``step_lobe``: two colors split by a spherical cap (a hard edge no finite
    SH expansion reproduces). ``specular_spot``: a narrow lobe
    ``exp(kappa (d . c - 1))`` on a base color. ``sh_smooth``: a random
    degree-3 SH function. Keyword overrides replace generated parameters.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown target kind {kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(seed)
    if kind == "sh_smooth":
        sh = np.zeros((NUM_SH, 3))
        sh[0] = rng.uniform(-0.6, 0.6, 3)
        for k in range(1, NUM_SH):
            degree = int(math.isqrt(k))
            sh[k] = rng.normal(0.0, 0.25 / degree, 3)
        params = {"sh": sh.reshape(-1).tolist()}
    elif kind == "step_lobe":
        params = {"center": _random_center(rng, center_elevation).tolist(),
                  "half_angle": float(rng.uniform(math.radians(40), math.radians(75))),
                  "inside": rng.uniform(0.1, 0.9, 3).tolist(),
                  "outside": rng.uniform(0.1, 0.9, 3).tolist()}
    else:
        params = {"center": _random_center(rng, center_elevation).tolist(),
                  "base": rng.uniform(0.1, 0.6, 3).tolist(),
                  "spot": rng.uniform(0.3, 0.6, 3).tolist()}
    params.update(overrides)
    for key in ("center",):
        if key in params:
            params[key] = _unit(params[key]).tolist()
    return DirectionalTarget(kind, params)


# -- quadrature and the SH least-squares baseline --------------------------------------

def sphere_quadrature(n_theta: int = 128, n_phi: int = 256):
    """Gauss-Legendre in cos(theta) x uniform phi; weights sum to 1."""
    z, wz = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    r = np.sqrt(1.0 - zz * zz)
    d = np.stack([r * np.cos(pp), r * np.sin(pp), zz], axis=-1).reshape(-1, 3)
    w = np.repeat(wz, n_phi) / (2.0 * n_phi)
    return d, w


def sh_least_squares(target, degree: int = 3, quadrature=None):
    """Best unclamped SH fit under the uniform sphere measure.

    Returns (coefficients (K, 3), mean squared error per channel averaged).
    Solves the weighted normal equations by quadrature.
    """
    d, w = sphere_quadrature() if quadrature is None else quadrature
    k = (degree + 1) ** 2
    basis = sh_basis_np(d)[:, :k]
    y = target(d) - 0.5  # the renderer adds a 0.5 offset
    gram = basis.T @ (basis * w[:, None])
    rhs = basis.T @ (y * w[:, None])
    coef = np.linalg.solve(gram, rhs)
    resid = basis @ coef - y
    mse = float(np.sum(w[:, None] * resid ** 2) / 3.0)
    return coef, mse


def directional_mse(pred: np.ndarray, truth: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(weights[:, None] * (pred - truth) ** 2) / 3.0)


# -- toy scenes -----------------------------------------------------------------------------

@dataclass
class DatasetParams:
    num_gaussians: int = 8
    kind: str = "step_lobe"
    seed: int = 0
    num_views: int = 16
    width: int = 64
    height: int = 64
    elevation_deg: float = 30.0
    radius_factor: float = 4.0
    focal_factor: float = 2.2
    background: str = "black"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    params: DatasetParams
    cameras: list
    images: np.ndarray  # (V, H, W, 3)
    targets: list  # per-Gaussian DirectionalTarget
    ground_truth: GaussianScene

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images, dtype="<f8").tobytes()).hexdigest()

    @property
    def background(self):
        return None if self.params.background == "black" else np.ones(3)


SCENE_HALF_EXTENT = 0.5
SCENE_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def camera_ring(num_views: int, radius: float, elevation_deg: float, focal: float, width: int, height: int):
    el = math.radians(elevation_deg)
    cams = []
    for i in range(num_views):
        az = 2.0 * math.pi * i / num_views
        pos = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(pos, focal=focal, width=width, height=height))
    return cams


def _random_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def render_with_targets(scene: GaussianScene, targets, cam: Camera, background=None) -> np.ndarray:
    def colors(idx, d):
        return np.stack([targets[i](d[k]) for k, i in enumerate(idx)])

    with ad.no_tape():
        rgb, _ = rasterize(scene, cam, colors=colors, background=background)
    return rgb.value


def generate_scene(num_gaussians: int = 8, kind: str = "step_lobe", seed: int = 0, **kw):
    """Toy scene and its target views; a pure function of the arguments.

    Targets are rendered from each Gaussian's analytic directional color, so
    for kinds other than ``sh_smooth`` the ground truth lies outside what
    degree-3 SH can represent. The returned scene is the training
    initialization: true geometry, SH set to the per-Gaussian mean color.
    """
    if num_gaussians < 1:
        raise ValueError("num_gaussians must be >= 1")
    params = DatasetParams(num_gaussians=num_gaussians, kind=kind, seed=seed, **kw)
    rng = np.random.default_rng([seed, 0x9e37])
    n = num_gaussians
    mu = rng.uniform(-0.8 * SCENE_HALF_EXTENT, 0.8 * SCENE_HALF_EXTENT, size=(n, 3))
    rot = _random_quaternions(rng, n)
    scale = np.log(rng.uniform(0.06, 0.14, size=(n, 3)))
    opacity = rng.uniform(0.7, 0.95, size=n)
    logit = np.log(opacity / (1.0 - opacity))
    # directions seen from the ring point downward by the ring elevation
    elev = -math.radians(params.elevation_deg)
    targets = [generate_directional_target(kind, int(rng.integers(2 ** 31)), center_elevation=elev)
               for _ in range(n)]

    radius = params.radius_factor * 2.0 * SCENE_HALF_EXTENT
    focal = params.focal_factor * params.width
    cams = camera_ring(params.num_views, radius, params.elevation_deg, focal, params.width, params.height)

    truth = GaussianScene(mu, rot, scale, logit, np.zeros((n, NUM_SH, 3)), SCENE_BOUNDS)
    bg = None if params.background == "black" else np.ones(3)
    images = np.stack([render_with_targets(truth, targets, c, bg) for c in cams])

    init = truth.copy()
    for i, t in enumerate(targets):
        seen = np.stack([_unit(mu[i] - c.position) for c in cams])
        mean_color = t(seen).mean(axis=0)
        init.sh[i, 0] = (mean_color - 0.5) / SH_C0
    return init, SyntheticDataset(params, cams, images, targets, truth)
