import os
from pathlib import Path

import numpy as np
import pytest

import pointuda as pu

CONFIGS = Path(os.environ.get("PUDA_CONFIGS", Path(__file__).resolve().parents[2] / "configs"))


def test_chamfer_examples():
    a = np.zeros((1, 3))
    b = np.array([[1.0, 0.0, 0.0]])
    assert pu.chamfer_distance(a, b) == 2.0
    assert pu.chamfer_distance(a, a) == 0.0
    with pytest.raises(pu.EmptyCloudError):
        pu.chamfer_distance(a, np.zeros((0, 3)))
    with pytest.raises(pu.DimensionError):
        pu.chamfer_distance(np.zeros((4, 2)), a)


def test_chamfer_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (40, 3))
    y = rng.uniform(-1, 1, (25, 3))
    d = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    expected = d.min(1).mean() + d.min(0).mean()
    assert pu.chamfer_distance(x, y) == pytest.approx(expected, rel=1e-12)


def test_knn_and_region():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (64, 3))
    order = np.argsort(((x - x[3]) ** 2).sum(1), kind="stable")
    assert pu.knn(x, 3, 10) == list(order[:10])
    mask, seed = pu.select_region(x, 0.25, 7)
    assert mask.dtype == bool and mask.sum() == 16 and mask[seed]
    mask2, seed2 = pu.select_region(x, 0.25, 7)
    assert seed == seed2 and (mask == mask2).all()


def test_crop_and_normalize():
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (256, 3))
    assert pu.plane_crop(x, 0.8, 3).shape == (204, 3)
    n = pu.normalize(x * 4 + 1)
    assert np.abs(n.mean(0)).max() < 1e-12
    assert np.linalg.norm(n, axis=1).max() == pytest.approx(1.0, rel=1e-12)


def test_generate_domains_is_deterministic():
    src, tgt = pu.generate_domains(str(CONFIGS / "gen_smoke.conf"))
    again, _ = pu.generate_domains(str(CONFIGS / "gen_smoke.conf"))
    assert src["class_names"] == tgt["class_names"] == ["sphere", "cube", "torus"]
    assert len(src["train"]["points"]) + len(src["val"]["points"]) == 24
    for p, q in zip(src["test"]["points"], again["test"]["points"]):
        assert np.array_equal(p, q)
    with pytest.raises(pu.ConfigError):
        pu.generate_domains(overrides={"gen.classes": "sphere,teapot"})


def test_selfcheck_passes():
    results = pu.selfcheck()
    assert results and all(passed for _, passed, _ in results)


def test_train_eval_transform_roundtrip(tmp_path):
    data_dir = tmp_path / "data"
    src, tgt = pu.generate_domains(str(CONFIGS / "gen_smoke.conf"), out_dir=str(data_dir))
    loaded = pu.load_dataset(str(data_dir / "clean"))
    assert loaded["class_names"] == src["class_names"]

    out = pu.train(
        str(data_dir / "clean"),
        str(data_dir / "scan_like"),
        config=str(CONFIGS / "smoke.conf"),
        overrides={"train.epochs": "2"},
        run_dir=str(tmp_path / "run"),
    )
    assert len(out["metrics"]) == 2
    model = out["model"]
    assert model.class_names == src["class_names"]
    report = model.evaluate(tgt["test"]["points"], tgt["test"]["labels"])
    assert report["total"] == len(tgt["test"]["points"])
    assert report["accuracy"] == out["target_test"]["accuracy"]

    model.save(str(tmp_path / "m.ckpt"))
    back = pu.Model.load(str(tmp_path / "m.ckpt"))
    cloud = tgt["test"]["points"][0]
    assert np.array_equal(model.encode(cloud), back.encode(cloud))
    assert back.predict(tgt["test"]["points"]) == model.predict(tgt["test"]["points"])

    same, mask = model.destroy(cloud, alpha=0.0, fraction=0.5, seed=1)
    assert np.array_equal(same, cloud)
    moved, mask2 = model.destroy(cloud, alpha=1.0, fraction=0.5, seed=1)
    assert (mask == mask2).all()
    assert np.array_equal(moved[~mask], cloud[~mask])
    assert not np.array_equal(moved[mask], cloud[mask])
    assert model.displacements(cloud).shape == cloud.shape

