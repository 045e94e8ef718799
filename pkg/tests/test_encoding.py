import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles as O
from quantumgs import autodiff as ad
from quantumgs.encoding import (HashGrid, HashGridConfig, corner_indices, direction_to_unit_box,
                                grid_levels, hash_encode, hash_encode_direction)

SMALL = HashGridConfig(num_levels=3, features_per_level=2, table_size=2 ** 10, base_resolution=4,
                       max_resolution=32)


def make_grid(cfg=SMALL, seed=0, scale=1.0):
    g = HashGrid.create(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for t in g.tables:
        t.value[...] = rng.normal(0.0, scale, t.value.shape)
    return g


# -- configuration and levels -----------------------------------------------------

def test_grid_levels_single():
    assert grid_levels(HashGridConfig(num_levels=1, base_resolution=16, max_resolution=16)) == [16]


def test_grid_levels_exact_powers():
    assert grid_levels(HashGridConfig(num_levels=3, base_resolution=2, max_resolution=8)) == [2, 4, 8]


def test_grid_levels_full_scale_closed_form():
    cfg = HashGridConfig(num_levels=16, base_resolution=16, max_resolution=512)
    b = math.exp(math.log(512 / 16) / 15)
    expected = [math.floor(16 * b ** l + 1e-9) for l in range(16)]
    got = grid_levels(cfg)
    assert got == expected
    assert got[0] == 16 and got[-1] == 512
    assert all(a <= b for a, b in zip(got, got[1:]))


@pytest.mark.parametrize("kw", [dict(num_levels=0), dict(table_size=1000),
                                dict(base_resolution=64, max_resolution=32),
                                dict(bounds=((0, 0, 0), (1, 0, 1)))])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        HashGridConfig(**kw)


def test_full_scale_preset():
    cfg = HashGridConfig.full_scale()
    assert (cfg.num_levels, cfg.features_per_level, cfg.table_size) == (16, 2, 2 ** 19)


def test_table_init_range():
    g = HashGrid.create(SMALL, np.random.default_rng(1))
    for t in g.tables:
        assert np.all(np.abs(t.value) <= 1e-4)


# -- hashing ----------------------------------------------------------------------

def test_dense_levels_index_directly():
    # (4+1)^3 = 125 <= 1024: direct indexing, no collisions
    c = np.array([[i, j, k] for i in range(5) for j in range(5) for k in range(5)])
    idx = corner_indices(c, 4, 1024)
    assert len(set(idx.tolist())) == 125
    assert idx.max() == 124


def test_hashed_levels_use_prime_xor():
    c = np.array([[3, 5, 7]])
    h = (3 * 1) ^ (5 * 2654435761) ^ (7 * 805459861)
    assert corner_indices(c, 200, 1024)[0] == h % 1024


# -- lookups ------------------------------------------------------------------------

def test_output_dimension():
    g = make_grid()
    assert hash_encode(g, np.array([0.3, 0.2, 0.9])).shape == (SMALL.output_dim,)
    assert hash_encode(g, np.random.default_rng(0).uniform(size=(7, 3))).shape == (7, SMALL.output_dim)


def test_grid_corner_returns_corner_entry():
    g = make_grid()
    res = g.resolutions
    p = np.array([1, 2, 3]) / 4.0  # a corner at every level whose resolution is a multiple of 4
    feat = hash_encode(g, p).value.reshape(len(res), 2)
    for level, r in enumerate(res):
        if r % 4:
            continue
        idx = corner_indices((p * r).round().astype(np.int64)[None], r, SMALL.table_size)[0]
        np.testing.assert_allclose(feat[level], g.tables[level].value[idx], atol=1e-15)


def test_voxel_center_is_mean_of_corners():
    g = make_grid()
    r0 = g.resolutions[0]
    base = np.array([1, 2, 0])
    p = (base + 0.5) / r0
    corners = base[None, :] + np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])
    idx = corner_indices(corners, r0, SMALL.table_size)
    np.testing.assert_allclose(hash_encode(g, p).value[:2], g.tables[0].value[idx].mean(axis=0), atol=1e-15)


def test_out_of_bounds_points_are_clamped_with_warning(caplog):
    g = make_grid()
    with caplog.at_level("WARNING"):
        out = hash_encode(g, np.array([1.5, 0.5, 0.5]))
    assert "clamped" in caplog.text
    np.testing.assert_array_equal(out.value, hash_encode(g, np.array([1.0, 0.5, 0.5])).value)


@given(st.tuples(*[st.floats(0, 1)] * 3))
def test_determinism(p):
    g = make_grid()
    a = hash_encode(g, np.array(p)).value
    b = hash_encode(g, np.array(p)).value
    assert a.tobytes() == b.tobytes()


@given(st.tuples(*[st.floats(0.01, 0.99)] * 3), st.tuples(*[st.floats(-1, 1)] * 3))
def test_continuity(p, direction):
    g = make_grid()
    p = np.array(p)
    v = np.array(direction)
    base = hash_encode(g, p).value
    # Lipschitz bound: each level moves at most |table| * res * |dp|_1 per feature
    for eps in (1e-4, 1e-6, 1e-8):
        q = np.clip(p + eps * v, 0, 1)
        jump = np.abs(hash_encode(g, q).value - base).max()
        lip = max(np.abs(t.value).max() for t in g.tables) * max(g.resolutions) * 3 * 2
        assert jump <= lip * eps + 1e-15


def test_linear_along_an_axis_within_a_voxel():
    g = make_grid()
    a = np.array([0.26, 0.51, 0.76])
    b = a + np.array([1e-3, 0, 0])  # same voxel at every level
    mid = 0.5 * (a + b)
    np.testing.assert_allclose(hash_encode(g, mid).value,
                               0.5 * (hash_encode(g, a).value + hash_encode(g, b).value), atol=1e-14)


# -- gradients ------------------------------------------------------------------

def test_table_gradient_matches_finite_differences():
    g = make_grid()
    pts = np.random.default_rng(3).uniform(0.05, 0.95, size=(5, 3))
    w = np.random.default_rng(4).normal(size=(5, SMALL.output_dim))
    t = g.tables[1]
    with ad.Tape() as tape:
        out = ad.tsum(hash_encode(g, pts) * w)
        grad = tape.gradient(out, [t])[0]
    touched = np.flatnonzero(np.abs(grad).sum(axis=1))[:10]

    def f(vals):
        saved = t.value.copy()
        t.value[touched] = vals
        v = float(np.sum(hash_encode(g, pts).value * w))
        t.value[...] = saved
        return v

    num = O.central_difference(f, t.value[touched].copy(), 1e-6)
    np.testing.assert_allclose(grad[touched], num, rtol=1e-6, atol=1e-9)


def test_point_gradient_matches_finite_differences():
    g = make_grid()
    rng = np.random.default_rng(6)
    p = rng.uniform(0.05, 0.95, size=(4, 3))
    w = rng.normal(size=(4, SMALL.output_dim))
    pt = ad.Tensor(p, requires_grad=True)
    with ad.Tape() as tape:
        out = ad.tsum(hash_encode(g, pt) * w)
        grad = tape.gradient(out, [pt])[0]
    num = O.central_difference(lambda x: float(np.sum(hash_encode(g, x).value * w)), p, 1e-7)
    np.testing.assert_allclose(grad, num, rtol=1e-6, atol=1e-7)


# -- directions -------------------------------------------------------------------

def test_direction_remap():
    np.testing.assert_allclose(direction_to_unit_box(np.array([0, 0, 1.0])), [0.5, 0.5, 1.0])
    g = make_grid()
    np.testing.assert_array_equal(hash_encode_direction(g, np.array([0, 0, 1.0])).value,
                                  hash_encode(g, np.array([0.5, 0.5, 1.0])).value)


def test_antipodal_directions_differ():
    g = make_grid()
    d = np.array([0.3, -0.5, 0.81])
    d /= np.linalg.norm(d)
    assert not np.allclose(hash_encode_direction(g, d).value, hash_encode_direction(g, -d).value)


def test_direction_zero_vector_raises():
    with pytest.raises(ValueError):
        hash_encode_direction(make_grid(), np.zeros(3))


def test_direction_continuity_sweep():
    g = make_grid()
    angles = np.linspace(0, 2 * np.pi, 20001)
    d = np.stack([np.cos(angles), np.sin(angles), np.zeros_like(angles)], axis=1)
    f = hash_encode_direction(g, d).value
    assert np.abs(np.diff(f, axis=0)).max() < 0.05
