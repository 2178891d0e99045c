import json
import math

import numpy as np
import pytest

import neuraldrop as nd


def circle(cx=0.5, cy=0.5, r=0.1, n=256):
    a = np.pi / 2 - 2 * np.pi * np.arange(n) / n
    return np.column_stack([cx + r * np.cos(a), cy + r * np.sin(a)])


def test_fit_spline_recovers_a_circle():
    c, rms = nd.fit_spline(circle())
    assert rms < 1e-3
    assert c.control_points.shape == (nd.CONTROL_POINTS, 2)
    assert c.dense.shape == (nd.DENSE_SAMPLES, 2)
    assert c.area() == pytest.approx(math.pi * 0.01, rel=1e-3)
    cx, cy = c.centroid()
    assert (cx, cy) == pytest.approx((0.5, 0.5), abs=1e-9)
    assert c.contains(0.5, 0.5) and not c.contains(0.7, 0.5)


def test_contour_round_trip(tmp_path):
    c, _ = nd.fit_spline(circle(r=0.08))
    c.save(str(tmp_path / "c.txt"))
    assert nd.Contour.load(str(tmp_path / "c.txt")) == c
    assert nd.canonicalize(c.control_points) == c


def test_split_pair_on_a_dumbbell():
    x = np.linspace(-np.pi, np.pi, 256, endpoint=False)
    # Peanut: radius dips at the left and right ends of the vertical axis.
    r = 0.1 * (1.0 - 0.6 * np.cos(x) ** 2)
    a = np.pi / 2 - x - np.pi
    pts = np.column_stack([0.5 + r * np.cos(a), 0.5 + 0.2 * np.sin(a)])
    c, _ = nd.fit_spline(pts)
    i, j = nd.find_split_pair(c)
    assert 0 <= i < j < nd.CONTROL_POINTS
    with pytest.raises(nd.Error):
        nd.find_split_pair(c, delta=1.5)


def test_merge_of_overlapping_circles_covers_both():
    a, _ = nd.fit_spline(circle(0.45, 0.5, 0.08))
    b, _ = nd.fit_spline(circle(0.55, 0.5, 0.08))
    m = nd.merge_contours(a, b)
    assert m.area() > max(a.area(), b.area())
    assert m.area() < a.area() + b.area()


def test_otsu_and_frame_extraction_on_synthetic_frames():
    frames = nd.synth_clip(json.dumps({"width": 96, "height": 96, "frames": 3, "drop_count": 1}), seed=4)
    assert len(frames) == 3 and frames[0].dtype == np.uint8 and frames[0].shape == (96, 96)
    t = nd.otsu_threshold(frames[0])
    assert 0 <= t < 255
    drops = nd.extract_frame(frames[0])
    assert len(drops) == 1
    contour, gradient = drops[0]
    assert gradient.shape == (nd.CONTROL_POINTS,)
    assert np.all(gradient >= 0)
    assert contour.is_simple()


def test_reconstruct_keeps_the_volume():
    c, _ = nd.fit_spline(circle())
    out = nd.reconstruct(c, np.ones(nd.CONTROL_POINTS), volume=1e-3, min_cells=48)
    h = out["height"]
    assert h.ndim == 2 and h.min() >= 0
    assert out["volume"] == pytest.approx(1e-3, rel=1e-9)
    assert h.sum() * out["h"] ** 2 == pytest.approx(1e-3, rel=1e-9)


def test_near_miss_balances_classes():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 3))
    labels = [1 if k % 10 == 0 else 0 for k in range(50)]
    kept = nd.near_miss_undersample(x, labels)
    assert len(kept) == 10
    assert sum(labels[k] for k in kept) == 5
    assert kept == sorted(kept)


def test_constants():
    assert nd.incline_scale(30.0) == pytest.approx(0.5 ** (1 / 3), abs=1e-12)
    assert nd.layer_inventory("breakage")[-1] == "dense7: Dense(Sig)-1 <- dense6"
    assert len(nd.layer_inventory("contour")) == 17
    with pytest.raises(ValueError):
        nd.layer_inventory("other")


def test_simulation_steps_a_scene(tmp_path):
    for net in ("contour", "gradient", "breakage"):
        nd.save_initial_model(net, str(tmp_path / f"{net}.json"), width=4)
    scene = {
        "terrain": {"type": "plane", "incline_deg": 30},
        "models": {"contour": "contour.json", "gradient": "gradient.json", "breakage": "breakage.json"},
        "steps": 2,
        "drops": [{"circle": {"center": [0.5, 0.7], "radius": 0.05}, "gradient": "g.txt", "volume": 1e-4}],
    }
    (tmp_path / "g.txt").write_text("gradient v1\n" + " ".join(["1"] * nd.CONTROL_POINTS) + "\n")
    (tmp_path / "scene.json").write_text(json.dumps(scene))
    sim = nd.Simulation(str(tmp_path / "scene.json"))
    assert sim.configured_steps == 2
    v0 = sim.total_volume()
    assert len(sim.drops()) == 1
    for _ in range(sim.configured_steps):
        report = sim.step()
        assert set(report) == {"splits", "merges", "exits", "failures"}
    assert sim.step_index == 2
    assert sim.total_volume() == pytest.approx(v0, rel=1e-12)


def test_bad_scene_raises():
    with pytest.raises(nd.Error):
        nd.Simulation("/nonexistent/scene.json")
