import json

import numpy as np
import pytest

import m3dm


def test_sampling_and_interpolation():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(200, 3))
    idx = m3dm.farthest_point_sampling(pts, 16)
    assert len(idx) == 16 and len(set(idx)) == 16 and idx[0] == 0
    feats = np.eye(16)
    alpha = m3dm.interpolate(feats, pts[idx], pts)
    assert alpha.shape == (200, 16)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-9)
    assert (alpha >= 0).all()


def test_plane_fit():
    rng = np.random.default_rng(1)
    floor = np.column_stack([rng.uniform(-1, 1, 300), rng.uniform(-1, 1, 300), np.full(300, 0.5)])
    normal, offset, inliers = m3dm.fit_plane(floor, 0.01, 200, 3)
    assert inliers == 300
    assert abs(abs(normal[2]) - 1.0) < 1e-9
    assert abs(abs(offset) - 0.5) < 1e-9


def test_memory_scores():
    bank = np.array([[0.0], [10.0]])
    grid = np.full((1, 1, 1), 4.0, dtype=np.float32)
    detail = m3dm.phi_score(bank, grid, b=2)
    eta = 1.0 - np.exp(4.0) / (np.exp(4.0) + np.exp(6.0))
    assert detail["s_star"] == pytest.approx(4.0)
    assert detail["score"] == pytest.approx(eta * 4.0, abs=1e-9)
    psi = m3dm.psi_map(bank, grid)
    assert psi.shape == (1, 1) and psi[0, 0] == pytest.approx(4.0)
    picked = m3dm.coreset(np.arange(20.0).reshape(10, 2), 0.3, seed=5)
    assert len(picked) == 3
    up = m3dm.upsample_smooth(np.ones((4, 4)), 16, 16, 1.0)
    np.testing.assert_allclose(up, 1.0)


def test_ocsvm_and_metrics(tmp_path):
    x = np.random.default_rng(2).normal(size=(200, 1))
    head, objective = m3dm.ocsvm_train(x, nu=0.05, seed=1)
    flagged = sum(head.score([v]) > 0 for v in x[:, 0])
    assert flagged <= 20
    assert objective[-1] < objective[0]
    head.save(str(tmp_path / "head.json"))
    again = m3dm.DecisionHead.load(str(tmp_path / "head.json"))
    assert again.score([0.3]) == head.score([0.3])

    assert m3dm.auroc([0.1, 0.4, 0.4, 0.9], [0, 0, 1, 1]) == pytest.approx(0.875)
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    assert m3dm.aupro([mask.astype(float)], [mask]) == pytest.approx(1.0)
    with pytest.raises(m3dm.Error):
        m3dm.auroc([0.1, 0.2], [0, 0])


def test_infonce_gradient_shapes():
    rng = np.random.default_rng(3)
    loss, g_rgb, g_pt = m3dm.infonce_loss(rng.normal(size=(4, 5)), rng.normal(size=(4, 5)), 0.5)
    assert np.isfinite(loss) and g_rgb.shape == (4, 5) and g_pt.shape == (4, 5)


def test_tensor_roundtrip(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    m3dm.write_tensor(str(tmp_path / "a.t"), a)
    np.testing.assert_array_equal(m3dm.read_tensor(str(tmp_path / "a.t")), a)


def test_cli_pipeline(tmp_path):
    config = {
        "preprocess": {"target_size": 32},
        "grid": [8, 8],
        "groups": [64, 16],
        "features": {"d_rgb": 16, "d_pt": 12},
        "uff": {"hidden_ratio": 2, "embed_dim": 8, "warmup_steps": 10, "total_steps": 30, "batch_size": 64},
        "dlf": {"epochs": 50},
        "synth": {"n_train": 4, "n_test_good": 3, "n_test_anomalous": 3, "image_size": 32},
    }
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(config))
    common = ["--config", str(cfg), "--dataset", str(tmp_path / "data"), "--work", str(tmp_path / "work")]
    assert m3dm.run(["synth", *common]) == 0
    assert m3dm.run(["all", *common]) == 0
    report = json.loads((tmp_path / "work" / "eval" / "report.json").read_text())
    assert 0.0 <= report["i_auroc"] <= 1.0 and report["n_scenes"] == 6
    assert m3dm.run(["infer", "--config", str(cfg), "--work", str(tmp_path / "missing")]) == 3
