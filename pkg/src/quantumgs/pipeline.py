"""Hybrid quantum-classical modulation of Gaussian appearance.

Two modulators share one protocol, ``factors(mu, d, training, rng)``, which
returns multiplicative color and opacity factors for a batch of Gaussians:

* :class:`HyperQuantumModulator` (pipeline I): a hypernetwork maps the hashed
  Gaussian position to per-Gaussian circuit angles and decoder weights.
* :class:`GlobalQuantumModulator` (pipeline II): one shared circuit and
  decoder; hashed position and direction features enter the circuit as an
  extra Ry/Rz layer between the direction encoding and the ansatz.

Generated-parameter layout (pipeline I), per Gaussian, in this order:
ansatz angles ``(L, 3, 2)`` as (layer, qubit, theta/phi); decoder ``W1``
(3x3, input-major); ``b1`` (3); ``W2`` (3 x n_out, input-major); ``b2``
(n_out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import quantum
from .autodiff import Tensor
from .encoding import HashGrid, HashGridConfig, hash_encode, hash_encode_direction

VARIANTS = {"full": 49, "only_opacity": 1, "only_sh": 48, "no_sh": 4}
DECODER_HIDDEN = 3
HYPER_HIDDEN = (64, 64)
PROJ_HIDDEN = (64, 64)


@dataclass(frozen=True)
class ModulationMode:
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown modulation variant {self.variant!r}; choose from {sorted(VARIANTS)}")

    @property
    def n_out(self) -> int:
        return VARIANTS[self.variant]


@dataclass
class PipelineConfig:
    pipeline: str = "I"
    ansatz_layers: int = 4
    modulation: str = "full"
    spatial_grid: HashGridConfig = field(default_factory=HashGridConfig)
    direction_grid: HashGridConfig = field(default_factory=HashGridConfig)
    hyper_hidden: tuple = HYPER_HIDDEN
    proj_hidden: tuple = PROJ_HIDDEN
    dropout: float = 0.1

    def __post_init__(self):
        if self.pipeline not in ("I", "II"):
            raise ValueError("pipeline must be 'I' or 'II'")
        ModulationMode(self.modulation)
        if isinstance(self.spatial_grid, dict):
            self.spatial_grid = HashGridConfig(**self.spatial_grid)
        if isinstance(self.direction_grid, dict):
            self.direction_grid = HashGridConfig(**self.direction_grid)
        self.hyper_hidden = tuple(self.hyper_hidden)
        self.proj_hidden = tuple(self.proj_hidden)

    @property
    def mode(self) -> ModulationMode:
        return ModulationMode(self.modulation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_grid"] = self.spatial_grid.to_dict()
        d["direction_grid"] = self.direction_grid.to_dict()
        d["hyper_hidden"] = list(self.hyper_hidden)
        d["proj_hidden"] = list(self.proj_hidden)
        return d


# -- decoding ----------------------------------------------------------------------------

def _two_sigmoid(x):
    return 2.0 * ad.sigmoid(x)


def decode(raw, mode: ModulationMode):
    """Map raw outputs (N, n_out) to (color factors, opacity factor), each in (0, 2).

    Color factors are (N, 16, 3) over SH coefficients, or (N, 3) over RGB for
    ``no_sh``. Attributes the mode does not modulate get exact ones.
    """
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    if raw.ndim == 1:
        raw = ad.reshape(raw, (1, -1))
    n, k = raw.shape
    if k != mode.n_out:
        raise ValueError(f"expected {mode.n_out} raw outputs for mode {mode.variant!r}, got {k}")
    ones_sh = Tensor(np.ones((n, 16, 3)))
    ones_op = Tensor(np.ones(n))
    v = mode.variant
    if v == "full":
        color = ad.reshape(_two_sigmoid(raw[:, :48]), (n, 16, 3))
        return color, _two_sigmoid(raw[:, 48])
    if v == "only_sh":
        return ad.reshape(_two_sigmoid(raw), (n, 16, 3)), ones_op
    if v == "only_opacity":
        return ones_sh, _two_sigmoid(raw[:, 0])
    return _two_sigmoid(raw[:, :3]), _two_sigmoid(raw[:, 3])


# -- networks ----------------------------------------------------------------------------

class MLP:
    """Dense network with GeLU hidden layers.

    ``residual`` adds a skip connection around hidden layers whose input and
    output widths match; the input projection is never residual. With
    ``linear_output=False`` every layer is a hidden (activated) layer.
    """

    def __init__(self, sizes, rng: np.random.Generator, *, residual=False, dropout=0.0,
                 zero_last=False, linear_output=True, name="mlp"):
        self.sizes = list(sizes)
        self.linear_output = linear_output
        self.residual = residual
        self.dropout = dropout
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            w = np.zeros((a, b)) if (last and zero_last) else rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, b))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros(b), requires_grad=True, name=f"{name}.b{i}"))

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def _hidden(self, x, training, rng, layers):
        h = x
        for i, (w, b) in enumerate(layers):
            a = ad.gelu(h @ w + b)
            if self.residual and i > 0 and a.shape[-1] == h.shape[-1]:
                a = h + a
            if training and self.dropout > 0.0:
                keep = rng.random(a.shape) >= self.dropout
                a = a * (keep / (1.0 - self.dropout))
            h = a
        return h

    def __call__(self, x, training=False, rng=None):
        layers = list(zip(self.weights, self.biases))
        if not self.linear_output:
            return self._hidden(x, training, rng, layers)
        h = self._hidden(x, training, rng, layers[:-1])
        return h @ self.weights[-1] + self.biases[-1]


def circuit_expectations(theta, phi, ansatz, cond_y=None, cond_z=None) -> Tensor:
    """Differentiable <Z_j> for a batch of circuits (adjoint backward)."""
    tv, pv, av = ad._val(theta), ad._val(phi), ad._val(ansatz)
    cy = None if cond_y is None else ad._val(cond_y)
    cz = None if cond_z is None else ad._val(cond_z)
    psi = quantum.run_circuit(tv, pv, av, cy, cz)
    z = quantum.measure_z(psi)

    def vjp(g):
        grads = quantum.circuit_vjp(tv, pv, av, g, cy, cz, psi_out=psi)
        return (grads["theta"], grads["phi"], grads["ansatz"], grads.get("cond_y"), grads.get("cond_z"))

    return ad.record(z, (theta, phi, ansatz, cond_y, cond_z), vjp, "circuit")


def direction_angles(d):
    """Differentiable Bloch angles (theta, phi in [0, 2pi)) for unit directions (N, 3)."""
    d = d if isinstance(d, Tensor) else Tensor(d)
    theta = ad.arccos(ad.clip(d[:, 2], -1.0, 1.0))
    phi = ad.atan2(d[:, 1], d[:, 0])
    wrap = np.where(phi.value < 0.0, 2.0 * np.pi, 0.0)
    return theta, phi + wrap


def _repeat_rows(t, n):
    """Broadcast a leading axis of length 1 to n (gradients sum back)."""
    return t * np.ones((n,) + (1,) * (t.ndim - 1))


def _decoder_forward(z, w1, b1, w2, b2):
    """Per-sample decoding MLP: z (N, 3), w1 (N, 3, 3), w2 (N, 3, K) or shared."""
    n = z.shape[0]
    if w1.ndim == 3:
        h = ad.reshape(ad.reshape(z, (n, 1, 3)) @ w1, (n, -1)) + b1
        h = ad.gelu(h)
        return ad.reshape(ad.reshape(h, (n, 1, -1)) @ w2, (n, -1)) + b2
    return ad.gelu(z @ w1 + b1) @ w2 + b2


class HyperQuantumModulator:
    """Pipeline I: per-Gaussian circuits generated by a hypernetwork."""

    def __init__(self, config: PipelineConfig, rng: np.random.Generator):
        if config.pipeline != "I":
            raise ValueError("HyperQuantumModulator needs pipeline 'I'")
        self.config = config
        self.mode = config.mode
        self.grid = HashGrid.create(config.spatial_grid, rng, name="hash")
        n_in = config.spatial_grid.output_dim
        self.trunk = MLP([n_in, *config.hyper_hidden], rng, residual=True, dropout=config.dropout,
                         linear_output=False, name="hypernet.trunk")
        width = config.hyper_hidden[-1]
        L, k = config.ansatz_layers, self.mode.n_out
        self.n_angles = 6 * L
        self.n_decoder = DECODER_HIDDEN * 3 + DECODER_HIDDEN + DECODER_HIDDEN * k + k
        self.angle_w = Tensor(np.zeros((width, self.n_angles)), True, "hypernet.ansatz_head.w")
        self.angle_b = Tensor(np.zeros(self.n_angles), True, "hypernet.ansatz_head.b")
        self.dec_w = Tensor(np.zeros((width, self.n_decoder)), True, "hypernet.decoder_head.w")
        bias = np.zeros(self.n_decoder)
        # generated W1 starts as the identity so W2 receives gradient at step 0
        bias[:9] = np.eye(3).reshape(-1)
        self.dec_b = Tensor(bias, True, "hypernet.decoder_head.b")

    @property
    def output_dim(self) -> int:
        return self.n_angles + self.n_decoder

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "hash": self.grid.parameters(),
            "hypernet.trunk": self.trunk.parameters(),
            "hypernet.ansatz_head": [self.angle_w, self.angle_b],
            "hypernet.decoder_head": [self.dec_w, self.dec_b],
        }

    def generate(self, feat, training=False, rng=None):
        """Raw hypernetwork output split into (angles (N, L, 3, 2), decoder tensors)."""
        h = self.trunk(feat, training, rng)
        n = h.shape[0]
        L, k = self.config.ansatz_layers, self.mode.n_out
        angles = ad.reshape(h @ self.angle_w + self.angle_b, (n, L, 3, 2))
        dec = h @ self.dec_w + self.dec_b
        o = 0
        w1 = ad.reshape(dec[:, o:o + 9], (n, 3, 3)); o += 9
        b1 = dec[:, o:o + 3]; o += 3
        w2 = ad.reshape(dec[:, o:o + 3 * k], (n, 3, k)); o += 3 * k
        b2 = dec[:, o:o + k]
        return angles, (w1, b1, w2, b2)

    def raw(self, mu, d, training=False, rng=None) -> Tensor:
        """Raw decoder outputs; a single mean is shared across all directions."""
        feat = hash_encode(self.grid, mu)
        angles, dec = self.generate(feat, training, rng)
        n = d.shape[0]
        if angles.shape[0] == 1 and n > 1:
            angles = _repeat_rows(angles, n)
            dec = tuple(_repeat_rows(t, n) for t in dec)
        theta, phi = direction_angles(d)
        z = circuit_expectations(theta, phi, angles)
        return _decoder_forward(z, *dec)

    def factors(self, mu, d, training=False, rng=None):
        return decode(self.raw(mu, d, training, rng), self.mode)


def hypernet_generate(modulator: HyperQuantumModulator, feat):
    """Flat generated parameters per Gaussian, in the documented layout."""
    with ad.no_tape():
        angles, (w1, b1, w2, b2) = modulator.generate(Tensor(np.atleast_2d(feat)))
        n = angles.shape[0]
        return np.concatenate([angles.value.reshape(n, -1), w1.value.reshape(n, -1), b1.value,
                               w2.value.reshape(n, -1), b2.value], axis=1)


class GlobalQuantumModulator:
    """Pipeline II: one shared circuit conditioned on hashed position and direction."""

    def __init__(self, config: PipelineConfig, rng: np.random.Generator):
        if config.pipeline != "II":
            raise ValueError("GlobalQuantumModulator needs pipeline 'II'")
        self.config = config
        self.mode = config.mode
        self.grid = HashGrid.create(config.spatial_grid, rng, name="hash")
        self.dir_grid = HashGrid.create(config.direction_grid, rng, name="hash_dir")
        self.proj_spatial = MLP([config.spatial_grid.output_dim, *config.proj_hidden, 3], rng,
                                zero_last=True, name="proj_spatial")
        self.proj_dir = MLP([config.direction_grid.output_dim, *config.proj_hidden, 3], rng,
                            zero_last=True, name="proj_dir")
        self.ansatz = Tensor(np.zeros((config.ansatz_layers, 3, 2)), True, "ansatz")
        self.decoder = MLP([3, DECODER_HIDDEN, self.mode.n_out], rng, zero_last=True, name="decoder")

    def param_groups(self) -> dict[str, list[Tensor]]:
        return {
            "hash": self.grid.parameters(),
            "hash_dir": self.dir_grid.parameters(),
            "proj_spatial": self.proj_spatial.parameters(),
            "proj_dir": self.proj_dir.parameters(),
            "ansatz": [self.ansatz],
            "decoder": self.decoder.parameters(),
        }

    def raw(self, mu, d, training=False, rng=None) -> Tensor:
        s = self.proj_spatial(hash_encode(self.grid, mu))
        if s.shape[0] == 1 and d.shape[0] > 1:
            s = _repeat_rows(s, d.shape[0])
        v = self.proj_dir(hash_encode_direction(self.dir_grid, d))
        theta, phi = direction_angles(d)
        z = circuit_expectations(theta, phi, self.ansatz, s, v)
        return self.decoder(z)

    def factors(self, mu, d, training=False, rng=None):
        return decode(self.raw(mu, d, training, rng), self.mode)


def build_modulator(config: PipelineConfig, rng: np.random.Generator):
    if config.pipeline == "I":
        return HyperQuantumModulator(config, rng)
    return GlobalQuantumModulator(config, rng)


def all_parameters(modulator) -> list[Tensor]:
    return [t for ts in modulator.param_groups().values() for t in ts]


def qmlp_forward(modulator, mu, d):
    """Factors for single Gaussian mean(s) and direction(s), as numpy arrays."""
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    with ad.no_tape():
        color, opacity = modulator.factors(Tensor(mu), Tensor(d))
    return color.value, opacity.value
