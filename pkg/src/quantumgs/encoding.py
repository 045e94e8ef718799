"""Multi-resolution hash grid encoding of points and directions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, concat, record

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])  # (8, 3) x,y,z


@dataclass
class HashGridConfig:
    num_levels: int = 8
    features_per_level: int = 2
    table_size: int = 2 ** 14
    base_resolution: int = 16
    max_resolution: int = 512
    bounds: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        self.bounds = (tuple(float(v) for v in self.bounds[0]), tuple(float(v) for v in self.bounds[1]))
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.base_resolution > self.max_resolution:
            raise ValueError("base_resolution must not exceed max_resolution")
        lo, hi = np.array(self.bounds[0]), np.array(self.bounds[1])
        if np.any(hi <= lo):
            raise ValueError("bounds must have positive extent on every axis")

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(self.bounds[0]), list(self.bounds[1])]
        return d

    @classmethod
    def full_scale(cls, bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> "HashGridConfig":
        return cls(num_levels=16, features_per_level=2, table_size=2 ** 19, bounds=bounds)


def grid_levels(config: HashGridConfig) -> list[int]:
    """Per-level grid resolutions, a geometric progression from base to max."""
    if config.num_levels == 1:
        return [config.base_resolution]
    growth = math.exp(math.log(config.max_resolution / config.base_resolution) / (config.num_levels - 1))
    # the small epsilon keeps exact powers (e.g. 2 * 2**2 = 8) from flooring down
    return [int(math.floor(config.base_resolution * growth ** level + 1e-9)) for level in range(config.num_levels)]


def _level_size(res: int, table_size: int) -> tuple[int, bool]:
    dense = (res + 1) ** 3
    return (dense, True) if dense <= table_size else (table_size, False)


def corner_indices(corners: np.ndarray, res: int, table_size: int) -> np.ndarray:
    """Table row for integer corner coordinates of shape (..., 3)."""
    size, dense = _level_size(res, table_size)
    c = corners.astype(np.uint64)
    if dense:
        n = np.uint64(res + 1)
        return (c[..., 0] + c[..., 1] * n + c[..., 2] * n * n).astype(np.int64)
    h = c[..., 0] * np.uint64(PRIMES[0])
    h ^= c[..., 1] * np.uint64(PRIMES[1])
    h ^= c[..., 2] * np.uint64(PRIMES[2])
    return (h % np.uint64(table_size)).astype(np.int64)


@dataclass
class HashGrid:
    config: HashGridConfig
    tables: list = field(default_factory=list)

    @classmethod
    def create(cls, config: HashGridConfig, rng: np.random.Generator, name: str = "hash") -> "HashGrid":
        tables = []
        for level, res in enumerate(grid_levels(config)):
            size, _ = _level_size(res, config.table_size)
            init = rng.uniform(-1e-4, 1e-4, size=(size, config.features_per_level))
            tables.append(Tensor(init, requires_grad=True, name=f"{name}.level{level}"))
        return cls(config, tables)

    @property
    def resolutions(self) -> list[int]:
        return grid_levels(self.config)

    def parameters(self) -> list[Tensor]:
        return list(self.tables)


def _lookup(table: Tensor, p: Tensor | np.ndarray, res: int, cfg: HashGridConfig) -> Tensor:
    """Trilinear lookup of one level for points ``p`` of shape (B, 3)."""
    lo = np.array(cfg.bounds[0])
    extent = np.array(cfg.bounds[1]) - lo
    pv = p.value if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    u = (pv - lo) / extent
    inside = (u >= 0.0) & (u <= 1.0)
    x = np.clip(u, 0.0, 1.0) * res
    base = np.minimum(np.floor(x), res - 1)
    frac = x - base  # (B, 3) in [0, 1]
    corners = base[:, None, :].astype(np.int64) + _CORNERS[None, :, :]  # (B, 8, 3)
    idx = corner_indices(corners, res, cfg.table_size)  # (B, 8)
    # per-axis weight factors: w_axis[b, c, k] = frac or 1 - frac
    w_axis = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    w = w_axis.prod(axis=-1)  # (B, 8)
    feats = table.value[idx]  # (B, 8, F)
    out = np.einsum("bc,bcf->bf", w, feats)

    def vjp(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx, w[:, :, None] * g[:, None, :])
        gp = None
        if isinstance(p, Tensor):
            # d w_c / d frac_k = sign_ck * prod_{m != k} w_axis[c, m]
            sign = np.where(_CORNERS == 1, 1.0, -1.0)
            dw = np.empty(w_axis.shape)
            for k in range(3):
                others = np.prod(np.delete(w_axis, k, axis=-1), axis=-1)
                dw[..., k] = sign[None, :, k] * others
            gfeat = np.einsum("bf,bcf->bc", g, feats)
            gp = np.einsum("bc,bck->bk", gfeat, dw) * (res / extent) * inside
        return gt, gp

    return record(out, (table, p), vjp, "hash_lookup")


def hash_encode(grid: HashGrid, p) -> Tensor:
    """Concatenated per-level features for points of shape (3,) or (B, 3)."""
    single = np.ndim(p.value if isinstance(p, Tensor) else p) == 1
    if single:
        p = p.reshape(1, 3) if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)[None, :]
    pv = p.value if isinstance(p, Tensor) else p
    lo, hi = np.array(grid.config.bounds[0]), np.array(grid.config.bounds[1])
    if np.any(pv < lo - 1e-12) or np.any(pv > hi + 1e-12):
        log.warning("hash_encode: %d point(s) outside grid bounds clamped",
                    int(np.any((pv < lo) | (pv > hi), axis=-1).sum()))
    parts = [_lookup(t, p, res, grid.config) for t, res in zip(grid.tables, grid.resolutions)]
    out = concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return out.reshape(-1) if single else out


def direction_to_unit_box(d):
    """Affine map [-1, 1]^3 -> [0, 1]^3 used for directional hashing."""
    return (d + 1.0) * 0.5


def hash_encode_direction(grid: HashGrid, d) -> Tensor:
    dv = d.value if isinstance(d, Tensor) else np.asarray(d, dtype=np.float64)
    if np.any(np.linalg.norm(np.atleast_2d(dv), axis=-1) == 0):
        raise ValueError("cannot encode the zero vector as a direction")
    lo, hi = np.array(grid.config.bounds[0]), np.array(grid.config.bounds[1])
    if isinstance(d, Tensor):
        q = direction_to_unit_box(d) * (hi - lo) + lo
    else:
        q = direction_to_unit_box(dv) * (hi - lo) + lo
    return hash_encode(grid, q)
