import numpy as np
import pytest

from zal3d import data
from zal3d.errors import ConfigError


def random_map(rng, h, w, fg_prob=0.8):
    pts = rng.normal(size=(h, w, 3)).astype(np.float32)
    drop = rng.random((h, w)) > fg_prob
    pts[drop] = 0.0
    return data.OrderedPointMap(pts)


def fit_sphere(pts):
    # algebraic least-squares sphere fit, independent of the generator
    pts = pts.astype(np.float64)
    a = np.hstack([2.0 * pts, np.ones((len(pts), 1))])
    b = (pts**2).sum(axis=1)
    sol, *_ = np.linalg.lstsq(a, b, rcond=None)
    center = sol[:3]
    radius = np.sqrt(sol[3] + center @ center)
    return center, radius


def test_map_validation():
    with pytest.raises(ValueError):
        data.OrderedPointMap(np.zeros((4, 4), dtype=np.float32))
    bad = np.zeros((4, 4, 3), dtype=np.float32)
    bad[1, 1, 2] = np.nan
    with pytest.raises(ValueError):
        data.OrderedPointMap(bad)
    bad[1, 1, 2] = np.inf
    with pytest.raises(ValueError):
        data.OrderedPointMap(bad)


def test_map_immutable_and_foreground():
    pm = random_map(np.random.default_rng(0), 6, 7)
    with pytest.raises(ValueError):
        pm.points[0, 0, 0] = 1.0
    fg = pm.foreground_mask()
    assert fg.shape == (6, 7)
    assert fg.sum() == len(pm.foreground_points())


def test_partition_counts_224():
    pm = random_map(np.random.default_rng(1), 224, 224)
    grid = data.partition(pm, 8)
    assert (grid.rows, grid.cols) == (28, 28)
    assert len(grid) == 784
    assert grid.blocks.shape == (784, 64, 3)


def test_partition_rejects_nondivisible():
    pm = random_map(np.random.default_rng(2), 224, 224)
    with pytest.raises(ValueError):
        data.partition(pm, 9)


def test_patch_window_contents():
    pm = random_map(np.random.default_rng(3), 32, 24)
    grid = data.partition(pm, 8)
    for idx in [0, 1, 5, 11]:
        patch = grid.patch(idx)
        r0, c0 = patch.grid_row * 8, patch.grid_col * 8
        window = pm.points[r0 : r0 + 8, c0 : c0 + 8].reshape(64, 3)
        np.testing.assert_array_equal(patch.points, window)


def test_partition_realign_inverse_property():
    rng = np.random.default_rng(4)
    for _ in range(25):
        ps = int(rng.choice([2, 4, 7, 8]))
        rows = int(rng.integers(1, 6))
        cols = int(rng.integers(1, 6))
        pm = random_map(rng, rows * ps, cols * ps)
        grid = data.partition(pm, ps)
        back = data.realign(grid.blocks, grid)
        np.testing.assert_array_equal(back, pm.points)


def test_realign_scalars_row_major():
    vals = np.arange(784, dtype=np.float64)
    grid = data.realign_scalars(vals, 28, 28)
    assert grid.shape == (28, 28)
    assert grid[0, 0] == 0 and grid[0, 27] == 27 and grid[1, 0] == 28
    const = data.realign_scalars(np.full(784, 2.5), 28, 28)
    assert np.all(const == 2.5)
    with pytest.raises(ValueError):
        data.realign_scalars(np.zeros(783), 28, 28)


def test_synth_sphere_analytic():
    pm = data.synth_object("sphere", {"size": 96, "noise": 0.0}, seed=7)
    pts = pm.foreground_points()
    assert len(pts) > 500
    center, radius = fit_sphere(pts)
    dist = np.linalg.norm(pts.astype(np.float64) - center, axis=1)
    assert np.abs(dist - radius).max() < 1e-6


def test_synth_determinism_and_variation():
    for kind in data.OBJECT_KINDS:
        a = data.synth_object(kind, {"size": 64, "noise": 0.01}, seed=3)
        b = data.synth_object(kind, {"size": 64, "noise": 0.01}, seed=3)
        np.testing.assert_array_equal(a.points, b.points)
        c = data.synth_object(kind, {"size": 64, "noise": 0.01}, seed=4)
        assert not np.array_equal(a.points, c.points)


def test_synth_unknown_kind():
    with pytest.raises(ValueError):
        data.synth_object("torus", {}, seed=0)


def test_synth_has_background():
    for kind in data.OBJECT_KINDS:
        pm = data.synth_object(kind, {"size": 64}, seed=1)
        fg = pm.foreground_mask()
        assert 0 < fg.sum() < fg.size


def test_inject_locality_and_determinism():
    pm = data.synth_object("wavy-plane", {"size": 64}, seed=5)
    for kind in data.DEFECT_KINDS:
        out1, mask1 = data.inject_anomaly(pm, kind, {"radius_px": 5}, seed=11)
        out2, mask2 = data.inject_anomaly(pm, kind, {"radius_px": 5}, seed=11)
        np.testing.assert_array_equal(out1.points, out2.points)
        np.testing.assert_array_equal(mask1, mask2)
        assert mask1.sum() >= 1
        outside = mask1 == 0
        np.testing.assert_array_equal(out1.points[outside], pm.points[outside])
        if kind != "hole":
            assert not np.array_equal(out1.points[mask1 == 1], pm.points[mask1 == 1])


def test_inject_hole_sets_sentinels():
    pm = data.synth_object("sphere", {"size": 64}, seed=2)
    out, mask = data.inject_anomaly(pm, "hole", {"radius_px": 4}, seed=9)
    assert np.all(out.points[mask == 1] == 0.0)


def test_inject_bump_displaces_along_surface_normal():
    # flat plateau: the fitted normal is +z, so the bump raises z only
    pm = data.synth_object("box", {"size": 64, "taper": 1e-6, "height": 0.25}, seed=0)
    out, mask = data.inject_anomaly(pm, "bump", {"radius_px": 5, "center": (32, 32)}, 0)
    sel = mask == 1
    np.testing.assert_allclose(out.points[sel][:, :2], pm.points[sel][:, :2], atol=1e-6)
    assert (out.points[sel][:, 2] >= pm.points[sel][:, 2] - 1e-7).all()
    assert out.points[32, 32, 2] > pm.points[32, 32, 2] + 0.05


def test_inject_requires_foreground():
    empty = data.OrderedPointMap(np.zeros((16, 16, 3), dtype=np.float32))
    with pytest.raises(ValueError):
        data.inject_anomaly(empty, "bump", {}, seed=0)
    with pytest.raises(ValueError):
        pm = data.synth_object("box", {"size": 32}, seed=0)
        data.inject_anomaly(pm, "scratch", {}, seed=0)


def test_manifest_zero_shot_constraint():
    ok = data.DatasetManifest(
        (
            data.ManifestEntry("train", "wavy-plane", "a.opm"),
            data.ManifestEntry("task-irrelevant", "cylinder", "b.opm"),
            data.ManifestEntry("test-normal", "sphere", "c.opm"),
            data.ManifestEntry("test-anomalous", "sphere", "d.opm", "d.msk"),
        ),
        seed=3,
    )
    assert len(ok.select("test-anomalous")) == 1
    with pytest.raises(ConfigError):
        data.DatasetManifest(
            (
                data.ManifestEntry("task-irrelevant", "sphere", "b.opm"),
                data.ManifestEntry("test-normal", "sphere", "c.opm"),
            )
        )
    with pytest.raises(ConfigError):
        data.ManifestEntry("validation", "sphere", "x.opm")


def test_manifest_json_roundtrip(tmp_path):
    m = data.DatasetManifest(
        (
            data.ManifestEntry("train", "wavy-plane", "a.opm"),
            data.ManifestEntry("test-anomalous", "sphere", "d.opm", "d.msk"),
        ),
        seed=42,
    )
    path = tmp_path / "manifest.json"
    m.save(path)
    back = data.DatasetManifest.load(path)
    assert back == m


def test_save_load_map_roundtrip(tmp_path):
    pm = data.synth_object("cylinder", {"size": 48, "noise": 0.02}, seed=8)
    path = tmp_path / "m.opm"
    data.save_map(path, pm)
    back = data.load_map(path)
    np.testing.assert_array_equal(back.points, pm.points)
    with pytest.raises(ValueError):
        data.load_map(path, format="xyz")
