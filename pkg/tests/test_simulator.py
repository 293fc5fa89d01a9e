import math
from dataclasses import replace

import numpy as np
import pytest

from calibkit.camera import chain_point, project
from calibkit.geometry import keypoints_in_base
from calibkit.simulator import (
    DISTURBANCE_LEVELS,
    DisturbanceSchedule,
    apply_disturbance,
    generate_scene,
    keypoint_errors_3d,
    pose_errors,
    random_true_state,
    score_association,
    score_run,
    stock_scene,
    visible_keypoints,
)


def clean(scene):
    return replace(scene, pixel_noise_sigma=0.0, outlier_count=0, dropout_probability=0.0)


def test_noiseless_observations_are_projections():
    scene = clean(stock_scene("sweep", seed=3, frame_count=40))
    for f in generate_scene(scene):
        pts = keypoints_in_base(scene.model, f.q)
        idx = {lbl: i for i, lbl in enumerate(scene.model.labels)}
        vis, _ = visible_keypoints(scene.model, f.q, scene.T_init, f.true_state, scene.intrinsics)
        assert set(f.labels) <= {l for l, v in zip(scene.model.labels, vis) if v}
        for obs, lbl in zip(f.observations, f.labels):
            expected = project(scene.intrinsics, chain_point(scene.T_init, f.true_state, pts[idx[lbl]]))
            np.testing.assert_allclose(obs, expected, rtol=0, atol=1e-9)


def test_seeded_scenes_are_identical():
    a = list(generate_scene(stock_scene("fast", seed=11, frame_count=30)))
    b = list(generate_scene(stock_scene("fast", seed=11, frame_count=30)))
    for fa, fb in zip(a, b):
        assert fa.observations.tobytes() == fb.observations.tobytes()
        assert fa.labels == fb.labels
    c = list(generate_scene(stock_scene("fast", seed=12, frame_count=30)))
    assert any(fa.observations.tobytes() != fc.observations.tobytes() for fa, fc in zip(a, c))


def test_outlier_count_per_frame():
    scene = stock_scene("sweep", seed=0, frame_count=50, outlier_count=3)
    for f in generate_scene(scene):
        assert f.n_outliers == 3
        assert len(f.observations) == len(f.labels)


def test_label_conservation():
    scene = stock_scene("sweep", seed=5, frame_count=80)
    for f in generate_scene(scene):
        vis, _ = visible_keypoints(scene.model, f.q, scene.T_init, f.true_state, scene.intrinsics)
        visible = {l for l, v in zip(scene.model.labels, vis) if v}
        assert {l for l in f.labels if l is not None} <= visible
        assert len({l for l in f.labels if l is not None}) == sum(l is not None for l in f.labels)


def test_pixel_noise_statistics():
    sigma = 1.7
    scene = stock_scene("sweep", seed=8, frame_count=2500, pixel_noise_sigma=sigma, outlier_count=0, dropout_probability=0.0)
    resid = []
    for f in generate_scene(scene):
        pts = keypoints_in_base(scene.model, f.q)
        idx = {lbl: i for i, lbl in enumerate(scene.model.labels)}
        exact = project(scene.intrinsics, chain_point(scene.T_init, f.true_state, pts[[idx[l] for l in f.labels]]))
        resid.append(f.observations - exact)
    r = np.concatenate(resid).ravel()
    assert len(r) >= 10_000
    assert abs(np.std(r) - sigma) < 0.05 * sigma


def test_disturbance_off_schedule_unchanged(rng):
    s = DisturbanceSchedule("high", 25)
    x = np.arange(6) * 0.01
    for i in (0, 1, 24, 26, 49):
        np.testing.assert_array_equal(apply_disturbance(x, s, i, rng), x)
    assert [i for i in range(101) if s.scheduled(i)] == [25, 50, 75, 100]
    assert not DisturbanceSchedule("off").scheduled(25)


@pytest.mark.parametrize("level,deg,cm", [("low", 1, 1), ("medium", 3, 3), ("high", 5, 5)])
def test_disturbance_bounds(level, deg, cm):
    assert DISTURBANCE_LEVELS[level] == pytest.approx((math.radians(deg), cm / 100))
    r = np.random.default_rng(0)
    s = DisturbanceSchedule(level, 25)
    d = np.array([apply_disturbance(np.zeros(6), s, 25, r) for _ in range(2000)])
    assert np.all(np.abs(d[:, :3]) <= math.radians(deg))
    assert np.all(np.abs(d[:, 3:]) <= cm / 100)
    # uniform draws should reach close to the bound
    assert np.abs(d[:, :3]).max() > 0.98 * math.radians(deg)


def test_disturbance_reproducible():
    s = DisturbanceSchedule("low", 10)
    a = apply_disturbance(np.zeros(6), s, 10, np.random.default_rng(4))
    b = apply_disturbance(np.zeros(6), s, 10, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_disturbance_schedule_validation():
    for kw in ({"level": "extreme"}, {"period": 0}, {"target": "camera"}):
        with pytest.raises(ValueError):
            DisturbanceSchedule(**kw)


def test_scene_disturbance_moves_truth_on_schedule():
    scene = replace(stock_scene("sweep", seed=1, frame_count=60), disturbance=DisturbanceSchedule("medium", 25))
    frames = list(generate_scene(scene))
    changes = [i for i in range(1, 60) if not np.array_equal(frames[i].true_state, frames[i - 1].true_state)]
    assert changes == [25, 50]
    est = replace(scene, disturbance=DisturbanceSchedule("medium", 25, "estimate"))
    kicks = [f.index for f in generate_scene(est) if f.estimate_kick is not None]
    assert kicks == [25, 50]


def test_pose_error_examples():
    x = np.array([0.1, -0.2, 0.3, 0.01, 0.02, 0.03])
    assert pose_errors(x, x) == (0.0, 0.0)
    dt, dr = pose_errors(x + [0, 0, 0, 0.01, 0, 0], x)
    assert dt == pytest.approx(10.0) and dr == 0.0


def test_pose_error_is_geodesic():
    # 2 pi - 0.1 about z is a 0.1 rad rotation
    dt, dr = pose_errors([math.pi - 0.05, 0, 0, 0, 0, 0], [-math.pi + 0.05, 0, 0, 0, 0, 0])
    assert dr == pytest.approx(0.1, abs=1e-12)


def test_association_precision_on_hand_built_frame():
    s = score_association(["rf", "rb", "pl"], ["rf", "rb", "pr"])
    assert (s.n_matched, s.n_correct, s.n_mismatched) == (3, 2, 1)
    assert s.precision == pytest.approx(2 / 3)
    s = score_association(["rf", None, None], ["rf", "pl", None])
    assert s.precision == 1.0 and s.recall == 0.5
    with pytest.raises(ValueError):
        score_association(["rf"], [])


def test_keypoint_errors_zero_at_truth(model, camera_pose):
    q = np.array([0.0, 0.0, 0.1, 0.3, 0.1, 0.0])
    x = np.array([0.01, 0.0, 0.0, 0.002, 0.0, 0.0])
    np.testing.assert_array_equal(keypoint_errors_3d(model, q, x, x, camera_pose), 0.0)
    shift = keypoint_errors_3d(model, q, x + [0, 0, 0, 0.005, 0, 0], x, camera_pose)
    np.testing.assert_allclose(shift, 5.0)


def test_score_run_summary(model, camera_pose):
    est = np.zeros((3, 6))
    tru = np.zeros((3, 6))
    tru[:, 3] = [0.0, 0.001, 0.002]
    out = score_run(est, tru, [["rf"], ["rb"], [None]], [["rf"], ["rf"], ["rb"]], wall_times=[0.01, 0.02, 0.03])
    np.testing.assert_allclose(out["dt_mm"], [0.0, 1.0, 2.0])
    assert out["summary"]["dt_mm"]["median"] == pytest.approx(1.0)
    assert out["summary"]["precision"]["mean"] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        score_run(est, tru[:2])


def test_random_true_state_in_ball():
    r = np.random.default_rng(0)
    for _ in range(200):
        x = random_true_state(r)
        dt, dr = pose_errors(x, np.zeros(6))
        assert dt <= 30.0 + 1e-9 and dr <= math.radians(3.0) + 1e-12


def test_scene_validation(model):
    base = stock_scene("sweep", frame_count=5)
    for kw in ({"frame_count": 0}, {"pixel_noise_sigma": -1.0}, {"outlier_count": -1}, {"dropout_probability": 1.5}, {"outlier_box": (10.0, 0.0, 5.0, 5.0)}):
        with pytest.raises(ValueError):
            replace(base, **kw)
    with pytest.raises(ValueError):
        stock_scene("nonexistent")
