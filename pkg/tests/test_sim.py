import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcg import expert, sim
from hcg import geometry as geo


def free_scene(**kw):
    d = dict(target_center=[0.0, 0.0], target_radius=0.02, obstacle_centers=np.zeros((0, 2)),
             obstacle_radii=np.zeros(0), start=[-0.35, 0.0, 0.0])
    d.update(kw)
    return sim.Scene(**d)


def grasp_pose(scene, angle):
    return geo.planar_pose(*sim.canonical_grasp_config(scene, angle))


def test_sample_scene_empty_and_deterministic():
    for s in range(5):
        sc = sim.sample_scene(s, 0)
        assert sc.n_obstacles == 0
        sc.validate()
    a, b = sim.sample_scene(11, 5), sim.sample_scene(11, 5)
    assert a.to_json() == b.to_json()
    assert sim.sample_scene(12, 5).to_json() != a.to_json()


def test_sample_scene_ranges():
    for s in range(10):
        sc = sim.sample_scene(s, 7)
        sc.validate()
        assert sc.n_obstacles == 7
        assert np.all((sc.obstacle_radii >= 0.03) & (sc.obstacle_radii <= 0.08))
        assert sc.workspace == ((-0.5, 0.5), (-0.5, 0.5))


def test_sample_scene_rejects_bad_count():
    with pytest.raises((ValueError, sim.SceneError)):
        sim.sample_scene(0, 8)


def test_sampled_scenes_pass_feasibility_oracle():
    for s in range(20):
        assert expert.is_feasible(sim.sample_scene(100 + s, 7))


def test_scene_json_round_trip():
    sc = sim.sample_scene(3, 4)
    d = json.loads(sc.to_json())
    assert {"seed", "workspace", "target", "obstacles", "tolerances"} <= set(d)
    assert set(d["target"]) == {"center", "radius"}
    back = sim.Scene.from_dict(d)
    assert back.to_json() == sc.to_json()


def test_identity_step_is_noop():
    sc = free_scene()
    env = sim.GraspSim(sc, rng=0)
    res = env.step(geo.identity())
    assert res.reward == 0.0 and not res.done and res.outcome is sim.Outcome.ONGOING


def test_collision_when_driving_into_obstacle():
    # finger tips sit 0.10 ahead of the palm at lateral +-0.04; leave a 0.01 gap ahead of one
    r = 0.05
    cx = 0.10 + sim.CAPSULE_RADIUS + 0.01 + r
    sc = free_scene(target_center=[0.3, 0.3], obstacle_centers=[[cx, 0.04]], obstacle_radii=[r], start=[0, 0, 0])
    assert sim.body_clearance(sc.start, sc.obstacle_centers, sc.obstacle_radii) == pytest.approx(0.01, abs=1e-12)
    env = sim.GraspSim(sc, rng=0)
    res = env.step(geo.relative(sc.start_pose(), geo.planar_pose(0.05, 0.0, 0.0)))
    assert res.outcome is sim.Outcome.COLLISION and res.reward == -1.0 and res.done


def test_swept_check_catches_tunnelling():
    # a thin obstacle that a 0.05 step would jump over with endpoint-only checks
    sc = free_scene(target_center=[0.4, 0.4], obstacle_centers=[[0.0, 0.06]], obstacle_radii=[0.005],
                    start=[0.0, 0.0, math.pi / 2])
    c0 = np.array([-0.0, -0.03, math.pi / 2])
    c1 = np.array([0.0, 0.02, math.pi / 2])
    assert not sim.in_collision(sc, c0)
    assert sim.swept_collision(sc, c0, c1)


def test_success_at_grasp_pose_with_identity():
    sc = free_scene()
    env = sim.GraspSim(sc, rng=0)
    env.reset(grasp_pose(sc, 0.7))
    res = env.step(geo.identity())
    assert res.outcome is sim.Outcome.SUCCESS and res.reward == 1.0


def test_timeout():
    env = sim.GraspSim(free_scene(), rng=0, t_max=3)
    outs = [env.step(geo.identity()) for _ in range(3)]
    assert [o.done for o in outs] == [False, False, True]
    assert outs[-1].outcome is sim.Outcome.TIMEOUT and outs[-1].reward == 0.0
    with pytest.raises(RuntimeError):
        env.step(geo.identity())


def test_action_clamped():
    env = sim.GraspSim(free_scene(target_center=[0.4, 0.4]), rng=0)
    before = env.config.copy()
    env.step(geo.compose(geo.translate(0.3, 0.1, 0.0), geo.rotz(1.0)))
    after = env.config
    assert np.linalg.norm(after[:2] - before[:2]) == pytest.approx(sim.MAX_STEP_TRANS, abs=1e-12)
    assert abs(geo.wrap_angle(after[2] - before[2])) == pytest.approx(sim.MAX_STEP_YAW, abs=1e-12)
    assert geo.is_planar(env.pose)


def test_grasp_predicate_cases():
    sc = free_scene()
    for k in range(16):
        assert sim.check_grasp_success(sc, grasp_pose(sc, 2 * math.pi * k / 16))
    assert not sim.check_grasp_success(sc, geo.planar_pose(1.0, 0.0, math.pi))
    # rotated away from the target
    cfg = sim.canonical_grasp_config(sc, 0.0)
    assert not sim.grasp_predicate(sc, cfg + np.array([0, 0, 0.5]))
    # a finger clipping an obstacle
    fingertip = np.array([cfg[0] - 0.08, cfg[1] + 0.04])
    blocked = free_scene(obstacle_centers=[fingertip + [0.0, 0.035]], obstacle_radii=[0.03])
    assert not sim.grasp_predicate(blocked, cfg)


def test_render_target_only_all_mask_one():
    sc = free_scene()
    pts, mask = sim.render_observation(sc, sc.start_pose(), np.random.default_rng(0))
    assert len(pts) > 0 and np.all(mask == 1.0)


def test_render_occluded_target():
    sc = free_scene(obstacle_centers=[[-0.17, 0.0]], obstacle_radii=[0.06])
    pts, mask = sim.render_observation(sc, sc.start_pose(), np.random.default_rng(0))
    assert len(pts) > 0 and not np.any(mask == 1.0)


def test_render_deterministic():
    sc = sim.sample_scene(5, 5)
    a = sim.render_observation(sc, sc.start_pose(), np.random.default_rng(9))
    b = sim.render_observation(sc, sc.start_pose(), np.random.default_rng(9))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_aggregate_single_frame_equals_frame():
    sc = sim.sample_scene(5, 3)
    pts, mask = sim.render_observation(sc, sc.start_pose(), np.random.default_rng(0))
    obs = sim.aggregate_observation([sim.Frame(0, sc.start_pose(), pts, mask)])
    assert len(obs) == min(len(mask), sim.N_PTS)
    if len(mask) <= sim.N_PTS:
        np.testing.assert_allclose(obs.points, pts, atol=1e-12)
        np.testing.assert_array_equal(obs.mask, mask)


def test_aggregate_frame_consistency():
    sc = free_scene()
    poses = [geo.planar_pose(-0.3, 0.0, 0.0), geo.planar_pose(-0.2, 0.1, -0.4)]
    world = np.array([[0.02, 0.0, 0.0]])
    frames = [sim.Frame(i, T, geo.transform_points(T, world), np.ones(1)) for i, T in enumerate(poses)]
    for f in frames:
        back = geo.transform_points(geo.inverse(f.pose), f.points)
        np.testing.assert_allclose(back, world, atol=1e-9)
    obs = sim.aggregate_observation(frames)
    back = geo.transform_points(geo.inverse(poses[-1]), obs.points)
    np.testing.assert_allclose(back, np.broadcast_to(world, back.shape), atol=1e-9)


def _coverage(points_base, center):
    ang = np.sort(np.arctan2(points_base[:, 1] - center[1], points_base[:, 0] - center[0]))
    gaps = np.diff(np.concatenate([ang, ang[:1] + 2 * math.pi]))
    return math.degrees(2 * math.pi - gaps.max())


def test_aggregation_covers_circled_obstacle():
    c = np.array([0.0, 0.0])
    sc = free_scene(target_center=[0.4, 0.4], obstacle_centers=[c], obstacle_radii=[0.05])
    history, single = [], []
    rng = np.random.default_rng(0)
    for i in range(10):
        th = 2 * math.pi * i / 10
        eye = c + 0.25 * np.array([math.cos(th), math.sin(th)])
        T = geo.planar_pose(eye[0], eye[1], th + math.pi)
        pts, mask = sim.render_observation(sc, T, rng, sigma=0.0)
        history.append(sim.Frame(i, T, pts, mask))
        base = geo.transform_points(geo.inverse(T), pts[mask == 0])
        single.append(_coverage(base, c))
    obs = sim.aggregate_observation(history, rng=rng)
    T = history[-1].pose
    base = geo.transform_points(geo.inverse(T), obs.points[obs.mask == 0])
    assert max(single) <= 180.0
    assert _coverage(base, c) >= 300.0


def test_aggregate_caps_points_and_order_invariance():
    sc = sim.sample_scene(2, 7)
    rng = np.random.default_rng(0)
    frames = []
    for i, x in enumerate(np.linspace(-0.35, -0.2, 6)):
        T = geo.planar_pose(x, 0.05 * i, 0.1 * i)
        pts, mask = sim.render_observation(sc, T, rng, sigma=0.0)
        frames.append(sim.Frame(i, T, pts, mask))
    a = sim.aggregate_observation(frames, n_pts=10_000)
    b = sim.aggregate_observation(frames[::-1], n_pts=10_000)
    key = lambda o: np.round(np.hstack([o.points, o.mask[:, None]]), 9)
    assert sorted(map(tuple, key(a))) == sorted(map(tuple, key(b)))
    capped = sim.aggregate_observation(frames, n_pts=50, rng=rng)
    assert len(capped) == 50
    assert np.all(capped.features()[:, 3:6] == capped.config)


def test_subsample_padding_and_reservation():
    obs = sim.Observation(np.arange(9.0).reshape(3, 3), np.array([1.0, 0.0, 0.0]), np.zeros(3))
    out = sim.subsample_points(obs, 8, np.random.default_rng(0))
    assert len(out) == 8 and set(map(tuple, out.points)) == set(map(tuple, obs.points))
    big = sim.Observation(np.random.default_rng(0).normal(size=(200, 3)), np.r_[np.ones(20), np.zeros(180)], np.zeros(3))
    out = sim.subsample_points(big, 64, np.random.default_rng(1))
    assert out.mask.sum() == 16
    empty = sim.Observation(np.zeros((0, 3)), np.zeros(0), np.zeros(3))
    assert len(sim.subsample_points(empty, 5, np.random.default_rng(0))) == 5


def test_rewards_only_terminal():
    sc = sim.sample_scene(4, 3)
    env = sim.GraspSim(sc, rng=0)
    rewards = []
    rng = np.random.default_rng(0)
    while True:
        a = geo.compose(geo.translate(*rng.normal(0, 0.03, 3)), geo.rotz(rng.normal(0, 0.2)))
        r = env.step(a)
        rewards.append(r.reward)
        if r.done:
            break
    assert all(x == 0.0 for x in rewards[:-1])
    assert rewards[-1] in (-1.0, 0.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-3.1, 3.1))
def test_property_projection_idempotent(x, y, yaw):
    T = geo.planar_pose(x, y, yaw)
    P = geo.project_planar(T)
    assert P.allclose(T, atol=1e-12)
    assert geo.project_planar(P).allclose(P, atol=1e-15)
