"""Differentiable CPU Gaussian splatting: SH color, projection, compositing.

Everything is written against :mod:`quantumgs.autodiff`, so a render under an
active tape is differentiable with respect to every Gaussian attribute and,
through the optional modulator, every network parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
NUM_SH = 16

COV2D_FLOOR = 0.3
NEAR_PLANE = 0.2
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.9999
T_MIN = 1e-4
DET_MIN = 1e-12


# -- data types -------------------------------------------------------------------

@dataclass
class Gaussian:
    """One splat. ``sh`` is (16, 3): coefficient-major, RGB minor."""

    mu: np.ndarray
    rot: np.ndarray  # quaternion (w, x, y, z)
    scale: np.ndarray  # log-scales
    opacity_logit: float
    sh: np.ndarray

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + math.exp(-self.opacity_logit)))

    def covariance(self) -> np.ndarray:
        r = quat_to_rotmat(np.asarray(self.rot, dtype=float)[None, :]).value[0]
        m = r * np.exp(self.scale)[None, :]
        return m @ m.T


@dataclass
class GaussianScene:
    """Arrays for N Gaussians plus the scene bounding box."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        n = len(self.mu)
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(n, 3)
        self.rot = np.asarray(self.rot, dtype=np.float64).reshape(n, 4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, NUM_SH, 3)
        self.bounds = (tuple(map(float, self.bounds[0])), tuple(map(float, self.bounds[1])))

    def __len__(self):
        return len(self.mu)

    @classmethod
    def empty(cls, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, NUM_SH, 3)), bounds)

    @classmethod
    def from_gaussians(cls, gs: list[Gaussian], bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
        if not gs:
            return cls.empty(bounds)
        return cls(np.array([g.mu for g in gs]), np.array([g.rot for g in gs]),
                   np.array([g.scale for g in gs]), np.array([g.opacity_logit for g in gs]),
                   np.array([np.reshape(g.sh, (NUM_SH, 3)) for g in gs]), bounds)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i].copy(), self.rot[i].copy(), self.scale[i].copy(),
                        float(self.opacity_logit[i]), self.sh[i].copy())

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.mu.copy(), self.rot.copy(), self.scale.copy(),
                             self.opacity_logit.copy(), self.sh.copy(), self.bounds)


@dataclass
class GaussianParams:
    """Trainable tensors mirroring a :class:`GaussianScene`."""

    mu: Tensor
    rot: Tensor
    scale: Tensor
    opacity_logit: Tensor
    sh: Tensor
    bounds: tuple

    @classmethod
    def from_scene(cls, scene: GaussianScene) -> "GaussianParams":
        def t(x, name):
            return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)

        return cls(t(scene.mu, "mu"), t(scene.rot, "rot"), t(scene.scale, "scale"),
                   t(scene.opacity_logit, "opacity_logit"), t(scene.sh, "sh"), scene.bounds)

    def to_scene(self) -> GaussianScene:
        return GaussianScene(self.mu.value.copy(), self.rot.value.copy(), self.scale.value.copy(),
                             self.opacity_logit.value.copy(), self.sh.value.copy(), self.bounds)

    def groups(self) -> dict[str, Tensor]:
        return {"mu": self.mu, "rot": self.rot, "scale": self.scale,
                "opacity": self.opacity_logit, "sh": self.sh}

    def __len__(self):
        return len(self.mu.value)


@dataclass
class Camera:
    """Pinhole camera. ``rotation`` maps world to camera axes (x right, y down, z forward)."""

    position: np.ndarray
    rotation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if min(self.fx, self.fy, self.width, self.height) <= 0:
            raise ValueError("camera intrinsics and image size must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation must be orthonormal")

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *,
                focal: float, width: int, height: int) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(position, np.stack([right, down, fwd]), focal, focal, width / 2.0, height / 2.0,
                   width, height)

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray = field(default=None)  # (H, W)

    def __post_init__(self):
        if self.transmittance is None:
            self.transmittance = np.zeros(self.rgb.shape[:2])


# -- spherical harmonics ------------------------------------------------------------

def sh_basis(d) -> Tensor:
    """Real SH basis values, degrees 0-3, for directions (N, 3) -> (N, 16)."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    ones = Tensor(np.full(np.shape(x.value if isinstance(x, Tensor) else x), SH_C0))
    cols = [
        ones,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2.0 * zz - xx - yy), SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy), SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3.0 * yy),
    ]
    return ad.stack(cols, axis=1)


def sh_basis_np(d: np.ndarray) -> np.ndarray:
    with ad.no_tape():
        return sh_basis(np.atleast_2d(np.asarray(d, dtype=np.float64))).value


def sh_color(sh, basis, degree: int = 3) -> Tensor:
    """Clamped SH color: clip(sum_k sh[:, k] * Y_k + 0.5, 0, 1) over (N, 16, 3)."""
    k = (degree + 1) ** 2
    n = basis.shape[0]
    if k < NUM_SH:
        sh = sh[:, :k, :]
        basis = basis[:, :k]
    raw = (sh * ad.reshape(basis, (n, k, 1))).sum(axis=1)
    return ad.clip(raw + 0.5, 0.0, 1.0)


def eval_sh(sh, d, degree: int = 3) -> np.ndarray:
    """RGB color of 48 SH coefficients (16 per channel) seen along unit ``d``."""
    sh = np.asarray(sh, dtype=np.float64).reshape(1, NUM_SH, 3)
    with ad.no_tape():
        return sh_color(sh, sh_basis_np(d), degree).value[0]


# -- geometry -------------------------------------------------------------------------

def quat_to_rotmat(q) -> Tensor:
    q = ad.as_tensor(q) if not isinstance(q, Tensor) else q
    n = ad.sqrt((q * q).sum(axis=1, keepdims=True))
    q = q / n
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    ]
    return ad.reshape(ad.stack(rows, axis=1), (-1, 3, 3))


def covariance_3d(rot, log_scale) -> Tensor:
    r = quat_to_rotmat(rot)
    s = ad.exp(log_scale)
    m = r * ad.reshape(s, (-1, 1, 3))
    return m @ ad.swapaxes(m, 1, 2)


def project(mu, rot, log_scale, cam: Camera):
    """Screen-space means (N, 2), 2D covariances (N, 2, 2) and depths (N,)."""
    w = cam.rotation
    t = (ad.as_tensor(mu) if not isinstance(mu, Tensor) else mu) - cam.position
    t = t @ w.T
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    inv_z = 1.0 / tz
    u = cam.fx * tx * inv_z + cam.cx
    v = cam.fy * ty * inv_z + cam.cy
    zero = Tensor(np.zeros(tz.shape))
    jac = ad.stack([cam.fx * inv_z, zero, -cam.fx * tx * inv_z * inv_z,
                    zero, cam.fy * inv_z, -cam.fy * ty * inv_z * inv_z], axis=1)
    jac = ad.reshape(jac, (-1, 2, 3))
    tw = jac @ w
    sigma = covariance_3d(rot, log_scale)
    cov2 = tw @ sigma @ ad.swapaxes(tw, 1, 2)
    cov2 = cov2 + COV2D_FLOOR * np.eye(2)
    return ad.stack([u, v], axis=1), cov2, tz


def project_gaussian(g: Gaussian, cam: Camera):
    """(2D mean, 2x2 covariance, depth) of a single Gaussian; ``None`` if behind the camera."""
    with ad.no_tape():
        depth = float((cam.rotation @ (np.asarray(g.mu) - cam.position))[2])
        if depth <= NEAR_PLANE:
            return None
        m, c, z = project(np.asarray(g.mu, dtype=float)[None, :], np.asarray(g.rot, dtype=float)[None, :],
                          np.asarray(g.scale, dtype=float)[None, :], cam)
    return m.value[0], c.value[0], float(z.value[0])


def view_directions(mu, cam: Camera) -> Tensor:
    """Unit vectors from the camera center to every Gaussian mean."""
    diff = (mu if isinstance(mu, Tensor) else ad.as_tensor(mu)) - cam.position
    return diff / ad.sqrt((diff * diff).sum(axis=1, keepdims=True))


# -- rasterization --------------------------------------------------------------------

def _pixel_grid(cam: Camera):
    jj, ii = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    return jj.reshape(-1, 1), ii.reshape(-1, 1)


def _blank(cam: Camera, background):
    rgb = np.zeros((cam.height, cam.width, 3))
    if background is not None:
        rgb[:] = background
    return Tensor(rgb), np.ones((cam.height, cam.width))


def _as_params(g):
    if isinstance(g, GaussianParams):
        return g
    return GaussianParams(Tensor(g.mu), Tensor(g.rot), Tensor(g.scale), Tensor(g.opacity_logit),
                          Tensor(g.sh), g.bounds)


def rasterize(gaussians, cam: Camera, modulator=None, *, sh_degree: int = 3,
              background=None, training: bool = False, rng=None, colors=None):
    """Render to an (H, W, 3) tensor; also returns the final transmittance (H, W).

    ``modulator`` follows the ``factors(mu, d, training, rng)`` protocol of
    :mod:`quantumgs.pipeline`; its mode decides which attributes it scales.
    ``colors(indices, directions)`` bypasses SH entirely and supplies RGB per
    Gaussian, which is how synthetic ground truth is rendered.
    """
    g = _as_params(gaussians)
    h, w = cam.height, cam.width
    n = len(g)
    if n == 0:
        return _blank(cam, background)

    depth = (g.mu.value - cam.position) @ cam.rotation[2]
    visible = np.flatnonzero(depth > NEAR_PLANE)
    if visible.size == 0:
        return _blank(cam, background)
    # depth sort; stable argsort breaks ties by index
    order = visible[np.argsort(depth[visible], kind="stable")]

    mu = g.mu[order]
    d = view_directions(mu, cam)
    color_f = opacity_f = None
    mode = None
    if modulator is not None:
        mode = modulator.mode
        color_f, opacity_f = modulator.factors(mu, d, training=training, rng=rng)

    sh = g.sh[order]
    basis = sh_basis(d)
    if colors is not None:
        color = Tensor(np.asarray(colors(order, d.value), dtype=np.float64))
    elif mode is not None and mode.variant == "no_sh":
        color = sh_color(sh, basis, degree=0)
        color = ad.clip(color * color_f, 0.0, 1.0)
    else:
        if color_f is not None:
            sh = sh * color_f
        color = sh_color(sh, basis, degree=sh_degree)

    alpha = ad.sigmoid(g.opacity_logit[order])
    if opacity_f is not None:
        alpha = alpha * opacity_f
    alpha = ad.clip(alpha, 0.0, ALPHA_MAX)

    means, cov2, _ = project(mu, g.rot[order], g.scale[order], cam)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    ok = det.value >= DET_MIN
    if not np.all(ok):
        keep = np.flatnonzero(ok)
        if keep.size == 0:
            return _blank(cam, background)
        means, color, alpha = means[keep], color[keep], alpha[keep]
        a, b, c, det = a[keep], b[keep], c[keep], det[keep]
    inv_det = 1.0 / det
    con_a, con_b, con_c = c * inv_det, -b * inv_det, a * inv_det

    px, py = _pixel_grid(cam)
    dx = px - ad.reshape(means[:, 0], (1, -1))
    dy = py - ad.reshape(means[:, 1], (1, -1))
    power = -0.5 * (ad.reshape(con_a, (1, -1)) * dx * dx + ad.reshape(con_c, (1, -1)) * dy * dy) \
        - ad.reshape(con_b, (1, -1)) * dx * dy
    a_px = ad.reshape(alpha, (1, -1)) * ad.exp(power)  # (P, N)
    a_px = ad.where(a_px.value >= ALPHA_MIN, a_px, 0.0)
    log_keep = ad.log_(1.0 - a_px)
    log_t_before = ad.cumsum(log_keep, axis=1) - log_keep
    t_before = ad.exp(log_t_before)
    live = t_before.value >= T_MIN
    weights = ad.where(live, a_px * t_before, 0.0)
    rgb = weights @ color  # (P, 3)
    t_final = ad.exp(ad.where(live, log_keep, 0.0).sum(axis=1))
    if background is not None:
        rgb = rgb + ad.reshape(t_final, (-1, 1)) * np.asarray(background, dtype=np.float64)
    return ad.reshape(rgb, (h, w, 3)), t_final.value.reshape(h, w)


def render(scene, cam: Camera, modulator=None, **kw) -> RenderedImage:
    """Forward-only render returning plain arrays."""
    with ad.no_tape():
        rgb, t = rasterize(scene, cam, modulator, **kw)
    return RenderedImage(rgb.value, t)


def composite_weights(scene, cam: Camera) -> np.ndarray:
    """Per-pixel sum of compositing weights; at most 1 by construction."""
    with ad.no_tape():
        white = GaussianScene(scene.mu, scene.rot, scene.scale, scene.opacity_logit,
                              np.zeros_like(scene.sh), scene.bounds)
        # all-zero SH gives color 0.5 on every channel, so rgb / 0.5 is the weight sum
        rgb, _ = rasterize(white, cam)
    return rgb.value[..., 0] / 0.5
