import math

import numpy as np
import pytest

import oracles as O
from quantumgs.render import render
from quantumgs.synthetic import (KINDS, camera_ring, generate_directional_target, generate_scene,
                                 sh_least_squares, sphere_quadrature)

# sha256 of the float64 target images for the acceptance dataset (8 Gaussians, step_lobe, seed 0)
ACCEPTANCE_CHECKSUM_PREFIX = "1042ba959e6a"


def sphere_grid(n=2000, seed=0):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_constant_sh_target_is_uniform():
    sh = np.zeros(48)
    sh[:3] = [0.4, -0.2, 0.1]
    t = generate_directional_target("sh_smooth", 0, sh=sh.tolist())
    vals = t(sphere_grid())
    assert np.ptp(vals, axis=0).max() < 1e-15
    np.testing.assert_allclose(vals[0], sh[:3] * 0.5 / math.sqrt(math.pi) + 0.5, atol=1e-12)


def test_hemisphere_cap_indicator():
    t = generate_directional_target("step_lobe", 0, center=[0, 0, 1], half_angle=math.pi / 2,
                                    inside=[1.0, 1.0, 1.0], outside=[0.0, 0.0, 0.0])
    d = sphere_grid()
    np.testing.assert_array_equal(t(d)[:, 0], (d[:, 2] > 0).astype(float))


def test_specular_spot_peaks_at_center():
    t = generate_directional_target("specular_spot", 3)
    c = np.array(t.params["center"])
    peak = t(c)
    assert np.all(t(sphere_grid()) <= peak + 1e-12)
    away = t(-c)
    np.testing.assert_allclose(away, np.clip(t.params["base"], 0, 1), atol=1e-12)


def test_unknown_kind():
    with pytest.raises(ValueError):
        generate_directional_target("plaid", 0)


def test_quadrature_integrates_polynomials():
    d, w = sphere_quadrature(32, 64)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.sum(w * d[:, 2] ** 2) == pytest.approx(1 / 3, abs=1e-14)
    assert np.sum(w * d[:, 0] ** 2 * d[:, 1] ** 2) == pytest.approx(1 / 15, abs=1e-14)


def _oracle_least_squares(target, n_theta=128, n_phi=256):
    # independent route: SH from the hand-written table, sqrt-weighted lstsq
    d, w = sphere_quadrature(n_theta, n_phi)
    basis = np.array([O.sh_table(*v) for v in d])
    y = target(d) - 0.5
    sw = np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(basis * sw, y * sw, rcond=None)
    return float(np.sum(w[:, None] * (basis @ coef - y) ** 2) / 3.0)


def test_least_squares_floor_positive_for_step_lobe():
    t = generate_directional_target("step_lobe", 0)
    _, mse = sh_least_squares(t)
    assert mse > 1e-4
    assert mse == pytest.approx(_oracle_least_squares(t), rel=1e-9)


def test_least_squares_exact_for_unclipped_sh_target():
    sh = np.random.default_rng(0).normal(0, 0.02, 48)
    t = generate_directional_target("sh_smooth", 0, sh=sh.tolist())
    coef, mse = sh_least_squares(t)
    assert mse < 1e-25
    np.testing.assert_allclose(coef.reshape(-1), sh, atol=1e-12)


def test_camera_ring_geometry():
    cams = camera_ring(8, 4.0, 30.0, 100.0, 32, 32)
    for c in cams:
        assert np.linalg.norm(c.position) == pytest.approx(4.0)
        assert c.position[2] == pytest.approx(2.0)
        # looks at the origin
        np.testing.assert_allclose(c.rotation[2], -c.position / 4.0, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_generation_is_deterministic(kind):
    a_init, a = generate_scene(3, kind, 5, num_views=4, width=16, height=16)
    b_init, b = generate_scene(3, kind, 5, num_views=4, width=16, height=16)
    assert a.checksum() == b.checksum()
    assert a_init.sh.tobytes() == b_init.sh.tobytes()
    _, c = generate_scene(3, kind, 6, num_views=4, width=16, height=16)
    assert c.checksum() != a.checksum()


def test_scene_shape_and_placement():
    init, ds = generate_scene(8, "step_lobe", 0, num_views=4, width=16, height=16)
    assert ds.images.shape == (4, 16, 16, 3)
    assert len(init) == 8 and np.all(np.abs(init.mu) <= 0.4)
    assert np.all((ds.images >= 0) & (ds.images <= 1))


def test_single_sh_gaussian_is_reproduced_by_its_own_sh():
    init, ds = generate_scene(1, "sh_smooth", 2, num_views=6, width=24, height=24)
    scene = ds.ground_truth.copy()
    scene.sh[0] = np.asarray(ds.targets[0].params["sh"]).reshape(16, 3)
    for cam, img in zip(ds.cameras, ds.images):
        np.testing.assert_allclose(render(scene, cam).rgb, img, atol=1e-12)


def test_rejects_empty_scene():
    with pytest.raises(ValueError):
        generate_scene(0)


def test_acceptance_dataset_checksum_pinned():
    _, ds = generate_scene(8, "step_lobe", 0)
    assert ds.images.shape == (16, 64, 64, 3)
    assert ds.checksum().startswith(ACCEPTANCE_CHECKSUM_PREFIX)
