"""File formats: scenes (.qgs), checkpoints (.qgsc), run configs (.cfg),
images (.ppm / .png), metrics (.csv) and synthetic dataset directories.

Scene file (.qgs), all little-endian::

    offset  size  field
    0       4     magic b"QGS\\0"
    4       4     u32 format version (1)
    8       8     u64 Gaussian count N
    16      48    6 x f64 bounds (xmin, ymin, zmin, xmax, ymax, zmax)
    64      N*472 N records of 59 x f64:
                  mu[3], rot[4] (w, x, y, z), log_scale[3], opacity_logit,
                  sh[48] (coefficient-major: c0.rgb, c1.rgb, ...)

Checkpoint (.qgsc)::

    0       4     magic b"QGSC"
    4       4     u32 format version (1)
    8       8     u64 header length H
    16      H     UTF-8 JSON header: run config, dataset params, step, Adam
                  hyperparameters and step, RNG bit-generator state, and a
                  tensor directory {name: [offset, shape]} (offsets in f64
                  units into the payload)
    16+H    ...   payload of f64 little-endian values

Every writer goes through a temp file in the target directory followed by an
atomic rename, so an interrupted write never clobbers the previous file.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .render import NUM_SH, GaussianScene

SCENE_MAGIC = b"QGS\0"
SCENE_VERSION = 1
SCENE_HEADER = 64
RECORD_FLOATS = 3 + 4 + 3 + 1 + NUM_SH * 3  # 59
CHECKPOINT_MAGIC = b"QGSC"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not match its documented layout."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- scenes --------------------------------------------------------------------------------

def scene_to_bytes(scene: GaussianScene) -> bytes:
    n = len(scene)
    rec = np.concatenate([scene.mu, scene.rot, scene.scale, scene.opacity_logit[:, None],
                          scene.sh.reshape(n, NUM_SH * 3)], axis=1)
    bounds = np.asarray(scene.bounds, dtype=np.float64).reshape(6)
    if not (np.all(np.isfinite(rec)) and np.all(np.isfinite(bounds))):
        bad = np.argwhere(~np.isfinite(rec))
        where = f"Gaussian {bad[0][0]}" if len(bad) else "bounds"
        raise FormatError(f"refusing to write non-finite values ({where})")
    head = SCENE_MAGIC + struct.pack("<IQ", SCENE_VERSION, n) + bounds.astype("<f8").tobytes()
    return head + rec.astype("<f8").tobytes()


def scene_from_bytes(data: bytes, source: str = "<bytes>") -> GaussianScene:
    if len(data) < SCENE_HEADER:
        raise FormatError(f"{source}: truncated header ({len(data)} of {SCENE_HEADER} bytes)")
    if data[:4] != SCENE_MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r} at offset 0")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"{source}: version {version} at offset 4, expected {SCENE_VERSION}")
    expected = SCENE_HEADER + n * RECORD_FLOATS * 8
    if len(data) != expected:
        raise FormatError(f"{source}: count field at offset 8 says {n} Gaussians "
                          f"({expected} bytes) but the file has {len(data)} bytes")
    bounds = np.frombuffer(data, "<f8", 6, 16).astype(np.float64)
    rec = np.frombuffer(data, "<f8", n * RECORD_FLOATS, SCENE_HEADER).astype(np.float64)
    rec = rec.reshape(n, RECORD_FLOATS)
    bad = np.argwhere(~np.isfinite(rec))
    if len(bad) or not np.all(np.isfinite(bounds)):
        off = SCENE_HEADER + 8 * (bad[0][0] * RECORD_FLOATS + bad[0][1]) if len(bad) else 16
        raise FormatError(f"{source}: non-finite value at offset {off}")
    return GaussianScene(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
                         rec[:, 11:].reshape(n, NUM_SH, 3), (tuple(bounds[:3]), tuple(bounds[3:])))


def save_scene(path, scene: GaussianScene) -> None:
    atomic_write(path, scene_to_bytes(scene))


def load_scene(path) -> GaussianScene:
    return scene_from_bytes(Path(path).read_bytes(), str(path))


# -- key=value configs -----------------------------------------------------------------------

def dump_kv(obj, extra: dict | None = None) -> str:
    """Serialize a flat dataclass (plus optional extra keys) as key=value lines."""
    items = [(f.name, getattr(obj, f.name)) for f in fields(obj)] + list((extra or {}).items())
    return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in items)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_kv(cls, text: str, allow_extra=()):
    """Build dataclass ``cls`` from key=value text; returns (instance, extras)."""
    raw = parse_kv(text)
    types = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(cls)}
    kw, extra = {}, {}
    for k, v in raw.items():
        if k in types:
            t = types[k]
            kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
        elif k in allow_extra:
            extra[k] = v
        else:
            raise FormatError(f"unknown key {k!r}")
    return cls(**kw), extra


def save_config(path, cfg) -> None:
    atomic_write(path, cfg.dumps().encode())


def load_config(path):
    from .train import RunConfig

    return RunConfig.loads(Path(path).read_text())


# -- images --------------------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def ppm_bytes(img) -> bytes:
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(a)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {a.shape}")
    h, w, _ = a.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(a).tobytes()


def write_ppm(path, img) -> None:
    atomic_write(path, ppm_bytes(img))


def read_ppm(path) -> np.ndarray:
    """Binary 8-bit PPM to a uint8 (H, W, 3) array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only 8-bit binary PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1:]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes at offset {pos + 1}, got {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).copy()


def write_png(path, img) -> None:
    import matplotlib.image

    buf = io.BytesIO()
    matplotlib.image.imsave(buf, to_uint8(img), format="png")
    atomic_write(path, buf.getvalue())


def write_image(path, img) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_ppm(path, img)


# -- metrics ---------------------------------------------------------------------------------

def metrics_text(rows, fieldnames) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def write_metrics(path, rows, fieldnames) -> None:
    atomic_write(path, metrics_text(rows, fieldnames).encode())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if v.lstrip("-").isdigit() else float(v)) if v else v for k, v in r.items()})
    return out


# -- checkpoints -----------------------------------------------------------------------------

def _state_tensors(state) -> dict[str, np.ndarray]:
    out = {}
    for gi, g in enumerate(state.adam.groups):
        for pi, p in enumerate(g.params):
            key = f"{g.name}/{pi}"
            out[f"param/{key}"] = p.value
            out[f"adam_m/{key}"] = state.adam.m[gi][pi]
            out[f"adam_v/{key}"] = state.adam.v[gi][pi]
    return out


def checkpoint_bytes(state, dataset_params=None) -> bytes:
    tensors = _state_tensors(state)
    directory, chunks, off = {}, [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        directory[name] = [off, list(a.shape)]
        chunks.append(a.reshape(-1).tobytes())
        off += a.size
    bounds = [list(b) for b in state.gaussians.bounds]
    header = {
        "config": state.config.dumps(),
        "dataset": dataset_params,
        "bounds": bounds,
        "step": state.step,
        "losses": [repr(x) for x in state.losses],
        "adam": {"step": state.adam.step, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps, "skipped": state.adam.skipped},
        "rng": state.rng.bit_generator.state,
        "tensors": directory,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hb)) + hb + b"".join(chunks)


def save_checkpoint(path, state, dataset_params=None) -> None:
    atomic_write(path, checkpoint_bytes(state, dataset_params))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw checkpoint contents: (header, {name: array})."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: version {version} at offset 4, expected {CHECKPOINT_VERSION}")
    if 16 + hlen > len(data):
        raise FormatError(f"{path}: header length at offset 8 ({hlen}) exceeds the file size")
    header = json.loads(data[16:16 + hlen].decode())
    payload = data[16 + hlen:]
    tensors = {}
    for name, (off, shape) in header["tensors"].items():
        size = math.prod(shape)
        if 8 * (off + size) > len(payload):
            raise FormatError(f"{path}: tensor {name!r} runs past the end of the payload")
        tensors[name] = np.frombuffer(payload, "<f8", size, 8 * off).astype(np.float64).reshape(shape)
    return header, tensors


def load_checkpoint(path):
    """Rebuild a TrainState exactly as it was saved; returns (state, dataset_params)."""
    from .train import RunConfig, build_state

    header, tensors = read_checkpoint(path)
    cfg = RunConfig.loads(header["config"])
    g = {k: tensors[f"param/gaussian.{k}/0"] for k in ("mu", "rot", "scale", "opacity", "sh")}
    bounds = tuple(tuple(b) for b in header["bounds"])
    scene = GaussianScene(g["mu"], g["rot"], g["scale"], g["opacity"], g["sh"], bounds)
    state = build_state(cfg, scene)
    for gi, grp in enumerate(state.adam.groups):
        for pi, p in enumerate(grp.params):
            key = f"{grp.name}/{pi}"
            if f"param/{key}" not in tensors:
                raise FormatError(f"{path}: missing tensor param/{key}")
            p.value[...] = tensors[f"param/{key}"]
            state.adam.m[gi][pi][...] = tensors[f"adam_m/{key}"]
            state.adam.v[gi][pi][...] = tensors[f"adam_v/{key}"]
    a = header["adam"]
    state.adam.step = a["step"]
    state.adam.beta1, state.adam.beta2, state.adam.eps = a["beta1"], a["beta2"], a["eps"]
    state.adam.skipped = [tuple(s) for s in a["skipped"]]
    state.rng.bit_generator.state = header["rng"]
    state.step = header["step"]
    state.losses = [float(x) for x in header["losses"]]
    return state, header.get("dataset")


# -- synthetic dataset directories -------------------------------------------------------------

def save_dataset(directory, init_scene: GaussianScene, dataset, previews: int = 4) -> None:
    """Write scene.qgs (training init), truth.qgs, dataset.cfg and preview PPMs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_scene(d / "scene.qgs", init_scene)
    save_scene(d / "truth.qgs", dataset.ground_truth)
    atomic_write(d / "dataset.cfg", dump_kv(dataset.params, {"checksum": dataset.checksum()}).encode())
    for i in range(min(previews, len(dataset.images))):
        write_ppm(d / f"view_{i:03d}.ppm", dataset.images[i])


def load_dataset(directory, verify: bool = True):
    """Regenerate the dataset from dataset.cfg; returns (init_scene, dataset)."""
    from .synthetic import DatasetParams, generate_scene

    d = Path(directory)
    cfg_path = d / "dataset.cfg"
    if not cfg_path.exists():
        raise FileNotFoundError(f"{cfg_path} not found (create it with `quantumgs gen`)")
    params, extra = load_kv(DatasetParams, cfg_path.read_text(), allow_extra=("checksum",))
    kw = params.to_dict()
    _, dataset = generate_scene(kw.pop("num_gaussians"), kw.pop("kind"), kw.pop("seed"), **kw)
    if verify and "checksum" in extra and dataset.checksum() != extra["checksum"]:
        raise FormatError(f"{cfg_path}: regenerated targets do not match the stored checksum")
    return load_scene(d / "scene.qgs"), dataset
