import json

import numpy as np
import pytest

import p2mx


def test_icosphere_counts():
    v, f = p2mx.icosahedron(1)
    assert v.shape == (42, 3)
    assert f.shape == (80, 3)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)


def test_ellipsoid_scales_axes():
    v, _ = p2mx.ellipsoid([0.2, 0.1, 0.3], 2)
    assert np.allclose(np.abs(v).max(axis=0), [0.2, 0.1, 0.3])


def test_obj_round_trip(tmp_path):
    v, f = p2mx.ellipsoid([0.1, 0.2, 0.15], 1)
    v = v + 0.001 * np.random.default_rng(0).standard_normal(v.shape)
    p2mx.save_obj(v, f, tmp_path / "m.obj")
    v2, f2 = p2mx.load_obj(tmp_path / "m.obj")
    assert np.array_equal(v, v2)
    assert np.array_equal(f, f2)


def test_metrics_against_numpy():
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.2, 0.2, (200, 3))
    b = rng.uniform(-0.2, 0.2, (150, 3))
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    expected = d.min(1).mean() + d.min(0).mean()
    assert p2mx.chamfer_distance(a, b) == pytest.approx(expected, rel=1e-12)
    assert p2mx.f_score(a, a)["f_tau"] == 100.0


def test_errors_carry_codes(tmp_path):
    with pytest.raises(p2mx.P2mxError) as info:
        p2mx.icosahedron(9)
    assert info.value.code == "E_DOMAIN"
    with pytest.raises(p2mx.P2mxError) as info:
        p2mx.load_obj(tmp_path / "missing.obj")
    assert info.value.code == "E_IO"
    with pytest.raises(p2mx.P2mxError) as info:
        p2mx.chamfer_distance(np.zeros((3, 2)), np.zeros((3, 3)))
    assert info.value.code == "E_SHAPE"


def test_synth_train_evaluate(tmp_path):
    data = tmp_path / "data"
    n = p2mx.synth("scenes = 2\nimage_size = 16\ngt_points = 2000\ntest_scenes = 1\n", data, seed=2)
    assert n == 2
    config = (
        f"dataset = {data}\noutput_dir = {tmp_path / 'run'}\nbackbone_channels = 4, 4, 4\n"
        "image_channels = 1\ncoarse_hidden = 8\nmdn_hidden = 8\ncoarse_level = 0\n"
        "resample_points = 300\ntrain_gt_points = 500\nepochs_phase1 = 1\nepochs_phase2 = 1\n"
    )
    summary = p2mx.train(config)
    assert summary["steps"] == 2
    rows = p2mx.evaluate(summary["checkpoint"], data, views=2, samples=1000)
    assert [r["scene_id"] for r in rows] == ["scene_0001"]
    assert rows[0]["cd"] > 0.0
    json.dumps(rows)
