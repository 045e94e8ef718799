"""Quantum-modulated 3D Gaussian splatting on a simulated 3-qubit circuit, in numpy."""

from .quantum import (AnsatzParams, BlochAngles, apply_ansatz, apply_cnot, apply_ry, apply_rz,
                      bloch_angles, circuit_gradients, encode_direction, measure_z)
from .render import Camera, Gaussian, GaussianScene, rasterize, render
from .train import RunConfig, TrainState, build_state, train

__version__ = "0.1.0"
