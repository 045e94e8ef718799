"""Exact statevector simulation of the 3-qubit direction encoder and ansatz.

Basis index convention: qubit ``j`` is bit ``j`` of the basis-state integer,
so ``|q2 q1 q0>`` has index ``4*q2 + 2*q1 + q0``. Every gate function accepts
states of shape ``(..., 8)`` and angles broadcastable to the leading batch
shape, so one call simulates a whole batch of circuits.

Gradients use adjoint differentiation: one forward pass, then a reverse sweep
that undoes each gate on both the state and the co-state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

NUM_QUBITS = 3
DIM = 2 ** NUM_QUBITS
ENTANGLER = ((0, 1), (1, 2), (2, 0))

_IDX0 = [np.array([k for k in range(DIM) if not (k >> q) & 1]) for q in range(NUM_QUBITS)]
_IDX1 = [i | (1 << q) for q, i in enumerate(_IDX0)]
# Z_SIGNS[k, j] = +1 if bit j of k is 0 else -1
Z_SIGNS = np.array([[1.0 - 2.0 * ((k >> j) & 1) for j in range(NUM_QUBITS)] for k in range(DIM)])


class BlochAngles(NamedTuple):
    theta: float
    phi: float


@dataclass
class AnsatzParams:
    """Rotation angles ``angles[layer, qubit] = (theta, phi)``."""

    angles: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64)
        if self.angles.ndim != 3 or self.angles.shape[1:] != (NUM_QUBITS, 2):
            raise ValueError(f"ansatz angles must have shape (L, 3, 2), got {self.angles.shape}")

    @property
    def num_layers(self) -> int:
        return self.angles.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return self.angles[..., 0]

    @property
    def phi(self) -> np.ndarray:
        return self.angles[..., 1]

    @classmethod
    def zeros(cls, num_layers: int = 4) -> "AnsatzParams":
        return cls(np.zeros((num_layers, NUM_QUBITS, 2)))

    @classmethod
    def random(cls, rng: np.random.Generator, num_layers: int = 4) -> "AnsatzParams":
        return cls(rng.uniform(-np.pi, np.pi, size=(num_layers, NUM_QUBITS, 2)))

    @classmethod
    def from_flat(cls, flat, num_layers: int = 4) -> "AnsatzParams":
        return cls(np.asarray(flat, dtype=np.float64).reshape(num_layers, NUM_QUBITS, 2))

    def flat(self) -> np.ndarray:
        return self.angles.reshape(-1).copy()


def _check_qubit(q: int) -> None:
    if q not in range(NUM_QUBITS):
        raise ValueError(f"qubit index {q} out of range 0..{NUM_QUBITS - 1}")


def zero_state(batch_shape=()) -> np.ndarray:
    psi = np.zeros(tuple(batch_shape) + (DIM,), dtype=np.complex128)
    psi[..., 0] = 1.0
    return psi


def basis_state(index: int) -> np.ndarray:
    psi = np.zeros(DIM, dtype=np.complex128)
    psi[index] = 1.0
    return psi


def bloch_angles(d) -> BlochAngles:
    """Polar and azimuthal Bloch angles of a direction; ``phi`` lands in [0, 2pi)."""
    d = np.asarray(d, dtype=np.float64)
    n = float(np.linalg.norm(d))
    if n == 0.0:
        raise ValueError("cannot encode the zero vector as a direction")
    if abs(n - 1.0) > 1e-6:
        log.warning("direction has norm %.9g; normalizing", n)
    if n != 1.0:
        d = d / n
    theta = math.acos(min(1.0, max(-1.0, d[2])))
    phi = math.atan2(d[1], d[0])
    phi = (phi + 2.0 * math.pi) % (2.0 * math.pi)
    if phi >= 2.0 * math.pi:  # -0.0 and tiny negatives round up to 2pi
        phi = 0.0
    return BlochAngles(theta, phi)


def bloch_angles_batch(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`bloch_angles` for unit directions of shape ``(..., 3)``."""
    d = np.asarray(d, dtype=np.float64)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]) + 2.0 * np.pi, 2.0 * np.pi)
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    return theta, phi


def _expand(angle, state):
    a = np.asarray(angle, dtype=np.float64)
    return a[..., None] if a.ndim else a


def apply_ry(state: np.ndarray, qubit: int, angle) -> np.ndarray:
    _check_qubit(qubit)
    a = _expand(angle, state)
    c, s = np.cos(a / 2), np.sin(a / 2)
    i0, i1 = _IDX0[qubit], _IDX1[qubit]
    a0, a1 = state[..., i0], state[..., i1]
    out = np.empty(np.broadcast_shapes(state.shape, np.shape(a)), dtype=np.complex128)
    out[..., i0] = c * a0 - s * a1
    out[..., i1] = s * a0 + c * a1
    return out


def apply_rz(state: np.ndarray, qubit: int, angle) -> np.ndarray:
    _check_qubit(qubit)
    a = _expand(angle, state)
    ph = np.exp(-0.5j * a)
    i0, i1 = _IDX0[qubit], _IDX1[qubit]
    out = np.empty(np.broadcast_shapes(state.shape, np.shape(a)), dtype=np.complex128)
    out[..., i0] = state[..., i0] * ph
    out[..., i1] = state[..., i1] * np.conj(ph)
    return out


def _cnot_perm(control: int, target: int) -> np.ndarray:
    return np.array([k ^ (1 << target) if (k >> control) & 1 else k for k in range(DIM)])


_CNOT_PERMS = {(c, t): _cnot_perm(c, t) for c in range(NUM_QUBITS) for t in range(NUM_QUBITS) if c != t}


def apply_cnot(state: np.ndarray, control: int, target: int) -> np.ndarray:
    _check_qubit(control)
    _check_qubit(target)
    if control == target:
        raise ValueError("CNOT control and target must differ")
    return state[..., _CNOT_PERMS[(control, target)]]


def encode_direction(angles, batch_shape=None) -> np.ndarray:
    """Apply Rz(phi) Ry(theta) to every qubit of |000>.

    ``angles`` is a :class:`BlochAngles` or a ``(theta, phi)`` pair of arrays.
    """
    theta, phi = angles
    shape = np.broadcast_shapes(np.shape(theta), np.shape(phi)) if batch_shape is None else batch_shape
    psi = zero_state(shape)
    for q in range(NUM_QUBITS):
        psi = apply_ry(psi, q, theta)
        psi = apply_rz(psi, q, phi)
    return psi


def _ansatz_array(params) -> np.ndarray:
    return params.angles if isinstance(params, AnsatzParams) else np.asarray(params, dtype=np.float64)


def apply_ansatz(state: np.ndarray, params) -> np.ndarray:
    """Apply all layers. ``params`` is AnsatzParams or an array ``(..., L, 3, 2)``."""
    ang = _ansatz_array(params)
    psi = state
    for layer in range(ang.shape[-3]):
        for q in range(NUM_QUBITS):
            psi = apply_ry(psi, q, ang[..., layer, q, 0])
            psi = apply_rz(psi, q, ang[..., layer, q, 1])
        for c, t in ENTANGLER:
            psi = apply_cnot(psi, c, t)
    return psi


def measure_z(state: np.ndarray) -> np.ndarray:
    return (np.abs(state) ** 2) @ Z_SIGNS


def expectation_from_direction(d, params) -> np.ndarray:
    """measure_z(apply_ansatz(encode_direction(bloch_angles(d)), params))."""
    return measure_z(apply_ansatz(encode_direction(bloch_angles(d)), params))


# -- batched circuit with conditioning + adjoint gradients ----------------------

def _program(num_layers: int, conditioned: bool):
    """Gate list as (kind, qubit(s), slot). Slots name the parameter source."""
    ops = []
    for q in range(NUM_QUBITS):
        ops.append(("ry", q, ("enc", 0)))
        ops.append(("rz", q, ("enc", 1)))
    if conditioned:
        for q in range(NUM_QUBITS):
            ops.append(("ry", q, ("cond_y", q)))
            ops.append(("rz", q, ("cond_z", q)))
    for layer in range(num_layers):
        for q in range(NUM_QUBITS):
            ops.append(("ry", q, ("ansatz", layer, q, 0)))
            ops.append(("rz", q, ("ansatz", layer, q, 1)))
        for c, t in ENTANGLER:
            ops.append(("cnot", (c, t), None))
    return ops


def _slot_angle(slot, theta, phi, ansatz, cond_y, cond_z):
    kind = slot[0]
    if kind == "enc":
        return theta if slot[1] == 0 else phi
    if kind == "cond_y":
        return cond_y[..., slot[1]]
    if kind == "cond_z":
        return cond_z[..., slot[1]]
    _, layer, q, k = slot
    return ansatz[..., layer, q, k]


def _apply_op(psi, kind, q, angle):
    if kind == "ry":
        return apply_ry(psi, q, angle)
    if kind == "rz":
        return apply_rz(psi, q, angle)
    return apply_cnot(psi, *q)


def _apply_inverse(psi, kind, q, angle):
    if kind == "cnot":
        return apply_cnot(psi, *q)
    return _apply_op(psi, kind, q, -np.asarray(angle))


def run_circuit(theta, phi, ansatz, cond_y=None, cond_z=None) -> np.ndarray:
    """Batched forward pass returning the final states ``(B, 8)``.

    ``theta``/``phi`` have shape (B,), ``ansatz`` is (L, 3, 2) shared or
    (B, L, 3, 2) per sample, optional conditioning angles are (B, 3).
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    ansatz = np.asarray(ansatz, dtype=np.float64)
    conditioned = cond_y is not None
    psi = zero_state(theta.shape)
    for kind, q, slot in _program(ansatz.shape[-3], conditioned):
        angle = None if slot is None else _slot_angle(slot, theta, phi, ansatz, cond_y, cond_z)
        psi = _apply_op(psi, kind, q, angle)
    return psi


def _apply_pauli(psi, kind, q):
    """P psi for the generator of an ry (Y) or rz (Z) gate on qubit q."""
    i0, i1 = _IDX0[q], _IDX1[q]
    out = np.empty_like(psi)
    if kind == "ry":
        out[..., i0] = -1j * psi[..., i1]
        out[..., i1] = 1j * psi[..., i0]
    else:
        out[..., i0] = psi[..., i0]
        out[..., i1] = -psi[..., i1]
    return out


def circuit_vjp(theta, phi, ansatz, upstream, cond_y=None, cond_z=None, psi_out=None):
    """Adjoint gradients of ``sum_j upstream_j <Z_j>`` for a batch of circuits.

    Returns a dict with ``theta`` (B,), ``phi`` (B,), ``ansatz`` (same shape as
    the input ansatz, summed over the batch when shared) and, when
    conditioned, ``cond_y``/``cond_z`` (B, 3).
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    ansatz = np.asarray(ansatz, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    conditioned = cond_y is not None
    ops = _program(ansatz.shape[-3], conditioned)
    psi = run_circuit(theta, phi, ansatz, cond_y, cond_z) if psi_out is None else psi_out
    lam = (upstream @ Z_SIGNS.T) * psi

    g_theta = np.zeros(theta.shape)
    g_phi = np.zeros(theta.shape)
    shared = ansatz.ndim == 3
    g_ans = np.zeros(theta.shape + ansatz.shape[-3:])
    g_cy = np.zeros(theta.shape + (NUM_QUBITS,)) if conditioned else None
    g_cz = np.zeros(theta.shape + (NUM_QUBITS,)) if conditioned else None

    for kind, q, slot in reversed(ops):
        angle = None if slot is None else _slot_angle(slot, theta, phi, ansatz, cond_y, cond_z)
        if slot is not None:
            g = np.imag(np.sum(np.conj(lam) * _apply_pauli(psi, kind, q), axis=-1))
            tag = slot[0]
            if tag == "enc":
                if slot[1] == 0:
                    g_theta += g
                else:
                    g_phi += g
            elif tag == "cond_y":
                g_cy[..., slot[1]] += g
            elif tag == "cond_z":
                g_cz[..., slot[1]] += g
            else:
                g_ans[..., slot[1], slot[2], slot[3]] += g
        psi = _apply_inverse(psi, kind, q, angle)
        lam = _apply_inverse(lam, kind, q, angle)

    if shared:
        g_ans = g_ans.reshape((-1,) + ansatz.shape).sum(axis=0)
    out = {"theta": g_theta, "phi": g_phi, "ansatz": g_ans}
    if conditioned:
        out["cond_y"] = g_cy
        out["cond_z"] = g_cz
    return out


@dataclass
class CircuitGradients:
    ansatz_theta: np.ndarray  # (L, 3)
    ansatz_phi: np.ndarray  # (L, 3)
    enc_theta: float
    enc_phi: float


def circuit_gradients(enc: BlochAngles, params: AnsatzParams, upstream) -> CircuitGradients:
    """Exact gradient of ``upstream . <Z>`` w.r.t. every circuit angle."""
    g = circuit_vjp(np.array([enc.theta]), np.array([enc.phi]), params.angles,
                    np.asarray(upstream, dtype=np.float64)[None, :])
    return CircuitGradients(g["ansatz"][..., 0], g["ansatz"][..., 1], float(g["theta"][0]), float(g["phi"][0]))
