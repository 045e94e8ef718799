import numpy as np
import pytest

from quantumgs.synthetic import generate_directional_target, generate_scene
from quantumgs.train import (LR_PRESETS, NumericalError, RunConfig, build_state, direction_response,
                             equirect_directions, evaluate, fibonacci_directions, fit_directional, render_view,
                             train, train_step)

SMALL = dict(hash_levels=2, hash_log2_table=8, hash_base_res=4, hash_max_res=16, log_every=0)


@pytest.fixture(scope="module")
def tiny():
    return generate_scene(3, "step_lobe", 2, num_views=4, width=16, height=16)


def test_presets_cover_every_network_group():
    for preset in LR_PRESETS.values():
        assert set(preset) == {"hash", "hypernet", "encoder", "quantum"}
    cfg = RunConfig(lr_preset="long", lr_quantum=0.5)
    assert cfg.network_lr("hash") == LR_PRESETS["long"]["hash"]
    assert cfg.network_lr("quantum") == 0.5


@pytest.mark.parametrize("pipeline", ["I", "II"])
def test_group_names_and_learning_rates(tiny, pipeline):
    init, _ = tiny
    st = build_state(RunConfig(pipeline=pipeline, **SMALL), init)
    names = [g.name for g in st.adam.groups]
    assert names[:5] == ["gaussian.mu", "gaussian.rot", "gaussian.scale", "gaussian.opacity", "gaussian.sh"]
    expected = {"I": ["hash", "hypernet.trunk", "hypernet.ansatz_head", "hypernet.decoder_head"],
                "II": ["hash", "hash_dir", "proj_spatial", "proj_dir", "ansatz", "decoder"]}[pipeline]
    assert names[5:] == expected


def test_untrained_render_equals_sh_baseline(tiny):
    init, ds = tiny
    quantum = build_state(RunConfig(pipeline="I", **SMALL), init)
    plain = build_state(RunConfig(pipeline="none", **SMALL), init)
    for cam in ds.cameras:
        assert render_view(quantum, cam).tobytes() == render_view(plain, cam).tobytes()


def test_same_seed_same_trajectory(tiny):
    init, ds = tiny
    runs = []
    for _ in range(2):
        st = build_state(RunConfig(pipeline="I", seed=4, iters=5, **SMALL), init)
        train(st, ds.cameras, ds.images)
        runs.append(st.losses)
    assert runs[0] == runs[1]
    st = build_state(RunConfig(pipeline="I", seed=5, iters=5, **SMALL), init)
    train(st, ds.cameras, ds.images)
    assert st.losses != runs[0]


def test_worker_count_does_not_change_metrics(tiny):
    init, ds = tiny
    st = build_state(RunConfig(pipeline="II", **SMALL), init)
    assert evaluate(st, ds.cameras, ds.images, workers=1) == evaluate(st, ds.cameras, ds.images, workers=3)


def test_metrics_file_and_rows(tmp_path, tiny):
    init, ds = tiny
    st = build_state(RunConfig(pipeline="I", iters=4, **{**SMALL, "log_every": 2}), init)
    rows = train(st, ds.cameras, ds.images, metrics_path=tmp_path / "m.csv", initial_eval=True)
    assert [r["step"] for r in rows] == [0, 2, 4]
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0] == "step,psnr,ssim,l1,loss" and len(text) == 4
    assert b"\r" not in (tmp_path / "m.csv").read_bytes()


@pytest.mark.parametrize("pipeline", ["none", "I", "II"])
def test_loss_trends_down(tiny, pipeline):
    init, ds = tiny
    st = build_state(RunConfig(pipeline=pipeline, iters=160, **SMALL), init)
    before = evaluate(st, ds.cameras, ds.images)["loss"]
    train(st, ds.cameras, ds.images)
    after = evaluate(st, ds.cameras, ds.images)["loss"]
    smooth = np.convolve(st.losses, np.ones(40) / 40, mode="valid")
    assert after < before
    assert smooth[-1] < smooth[0]


def test_non_finite_loss_raises(tiny):
    init, ds = tiny
    st = build_state(RunConfig(pipeline="none", **SMALL), init)
    bad = ds.images[0].copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        train_step(st, ds.cameras[0], bad)


def test_no_sh_mode_freezes_higher_coefficients(tiny):
    init, ds = tiny
    st = build_state(RunConfig(pipeline="I", modulation="no_sh", iters=5, **SMALL), init)
    train(st, ds.cameras, ds.images)
    assert np.all(st.gaussians.sh.value[:, 1:] == 0.0)


# -- directional fit and response maps -------------------------------------------------------

def test_fibonacci_directions_are_unit_and_balanced():
    d = fibonacci_directions(500)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert np.abs(d.mean(axis=0)).max() < 1e-2


def test_short_directional_fit_improves_on_least_squares():
    t = generate_directional_target("step_lobe", 0)
    fit = fit_directional(t, steps=60, num_directions=256)
    assert fit.sh_mse > 0
    assert fit.losses[-1] < fit.losses[0]
    assert fit.ratio < 1.0


def test_equirect_grid_layout():
    d = equirect_directions(8, 4)
    assert d.shape == (4, 8, 3)
    assert d[0, :, 2].min() > 0 and d[-1, :, 2].max() < 0
    with pytest.raises(ValueError):
        equirect_directions(0, 4)


def test_identity_model_response_is_constant(tiny):
    init, _ = tiny
    st = build_state(RunConfig(pipeline="I", **SMALL), init)
    r = direction_response(st.gaussians, st.modulator, 1, 64, 32)
    assert r["rgb"].shape == (32, 64, 3)
    assert np.all(r["color_factor"] == 1.0) and np.all(r["opacity_factor"] == 1.0)
    plain = direction_response(st.gaussians, None, 1, 64, 32)
    assert plain["rgb"].tobytes() == r["rgb"].tobytes()


def test_response_index_out_of_range(tiny):
    init, _ = tiny
    with pytest.raises(IndexError):
        direction_response(init, None, 3)


def test_single_gaussian_sh_scene_is_recovered():
    # the model class contains the truth: training from the mean color converges toward it
    init, ds = generate_scene(1, "sh_smooth", 3, num_views=8, width=16, height=16)
    st = build_state(RunConfig(pipeline="none", iters=300, lr_sh_rest=2.5e-3, **SMALL), init)
    before = evaluate(st, ds.cameras, ds.images)["psnr"]
    train(st, ds.cameras, ds.images)
    after = evaluate(st, ds.cameras, ds.images)["psnr"]
    assert after > before + 3.0
