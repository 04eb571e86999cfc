import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcg import geometry as geo
from conftest import random_pose

XG = geo.GRIPPER_POINTS
floats = st.floats(-2.0, 2.0, allow_nan=False)
vec3 = st.tuples(floats, floats, floats)


def test_compose_examples():
    T = geo.translate(0.3, -0.2, 0.1) @ geo.rotz(0.7)
    assert geo.compose(geo.identity(), T).allclose(T)
    assert geo.compose(geo.translate(1, 0, 0), geo.translate(0, 2, 0)).allclose(geo.translate(1, 2, 0))
    assert geo.compose(geo.rotz(math.pi / 2), geo.rotz(math.pi / 2)).allclose(geo.rotz(math.pi))


def test_compose_applies_right_operand_first():
    p = np.array([[1.0, 0.0, 0.0]])
    a, b = geo.translate(1, 0, 0), geo.rotz(math.pi / 2)
    out = geo.transform_points(geo.compose(a, b), p)
    np.testing.assert_allclose(out, [[1.0, 1.0, 0.0]], atol=1e-12)


def test_compose_associative(rng):
    for _ in range(50):
        a, b, c = (random_pose(rng) for _ in range(3))
        assert geo.compose(geo.compose(a, b), c).allclose(geo.compose(a, geo.compose(b, c)), atol=1e-12)


def test_inverse_and_validity(rng):
    for _ in range(100):
        T = random_pose(rng)
        assert geo.compose(geo.inverse(T), T).allclose(geo.identity(), atol=1e-9)
        assert geo.compose(T, geo.inverse(T)).is_valid()


def test_relative_examples(rng):
    T = random_pose(rng)
    assert geo.relative(T, T).allclose(geo.identity())
    assert geo.relative(geo.translate(1, 0, 0), geo.translate(3, 0, 0)).allclose(geo.translate(2, 0, 0))
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        assert geo.compose(geo.relative(a, b), a).allclose(b, atol=1e-9)


def test_transform_points_examples():
    pts = np.array([[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]])
    np.testing.assert_allclose(geo.transform_points(geo.identity(), pts), pts)
    np.testing.assert_allclose(geo.transform_points(geo.translate(0, 0, 1), [[0, 0, 0]]), [[0, 0, 1]])
    np.testing.assert_allclose(geo.transform_points(geo.rotz(math.pi), [[1, 0, 0]]), [[-1, 0, 0]], atol=1e-15)


def test_pose_loss_examples(rng):
    T = random_pose(rng)
    assert geo.pose_loss(T, T) == 0.0
    for xg in (XG, [[0.3, -1.0, 2.0]], rng.normal(size=(7, 3))):
        assert geo.pose_loss(geo.identity(), geo.translate(0.1, 0, 0), xg) == pytest.approx(0.1, abs=1e-12)
    assert geo.pose_loss(geo.identity(), geo.rotz(math.pi), XG) == pytest.approx(0.064, abs=1e-12)


def test_pose_loss_empty_points():
    with pytest.raises(geo.GeometryError):
        geo.pose_loss(geo.identity(), geo.identity(), np.zeros((0, 3)))


def test_pose_loss_brute_force_and_symmetry(rng):
    for _ in range(200):
        a, b = random_pose(rng), random_pose(rng)
        ref = 0.0
        for x in XG:
            pa = a.rotation @ x + a.translation
            pb = b.rotation @ x + b.translation
            ref += sum(abs(pa[i] - pb[i]) for i in range(3))
        ref /= len(XG)
        assert geo.pose_loss(a, b) == pytest.approx(ref, abs=1e-10)
        assert geo.pose_loss(a, b) == pytest.approx(geo.pose_loss(b, a), abs=1e-15)


def test_pose_loss_zero_only_for_equal_poses(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        assert geo.pose_loss(a, b) > 0


def test_exp_log():
    np.testing.assert_allclose(geo.exp_map([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(geo.exp_map([0, 0, math.pi / 2]), geo.rotz(math.pi / 2).rotation, atol=1e-15)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3.0) / np.linalg.norm(w)
        worst = max(worst, np.abs(geo.log_map(geo.exp_map(w)) - w).max())
    assert worst < 1e-8


def test_exp_small_angle_branch_continuous():
    w = np.array([3e-5, -2e-5, 1e-5])
    R = geo.exp_map(w)
    assert geo.Pose(R, np.zeros(3)).is_valid(1e-12)
    np.testing.assert_allclose(geo.log_map(R), w, atol=1e-14)


def test_log_map_near_pi_raises():
    with pytest.raises(geo.GeometryError):
        geo.log_map(geo.rotz(math.pi).rotation)
    with pytest.raises(geo.GeometryError):
        geo.log_map(geo.exp_map([0, math.pi - 1e-7, 0]))


def test_expert_action_examples():
    plan = [geo.translate(0.1, 0.2, 0)] * 4
    for t in range(3):
        assert geo.extract_expert_action(plan, t).allclose(geo.identity())
    plan = [geo.identity(), geo.translate(0.05, 0, 0)]
    assert geo.extract_expert_action(plan, 0).allclose(geo.translate(0.05, 0, 0))
    with pytest.raises(IndexError):
        geo.extract_expert_action(plan, 1)


def test_telescoping_identities(rng):
    plan = [random_pose(rng) for _ in range(12)]
    T = len(plan) - 1
    acc = plan[0]
    for t in range(T):
        acc = geo.compose(geo.extract_expert_action(plan, t), acc)
    assert acc.allclose(plan[T], atol=1e-8)
    for t in range(T + 1):
        g = geo.identity()
        for k in range(t, T):
            g = geo.compose(geo.extract_expert_action(plan, k), g)
        assert geo.extract_expert_goal(plan, t).allclose(g, atol=1e-8)


def test_expert_goal_examples():
    plan = [geo.identity(), geo.translate(1, 0, 0), geo.translate(2, 0, 0)]
    assert geo.extract_expert_goal(plan, 2).allclose(geo.identity())
    assert geo.extract_expert_goal(plan, 0).allclose(geo.translate(2, 0, 0))
    with pytest.raises(IndexError):
        geo.extract_expert_goal(plan, 3)


def test_serialization_round_trip(rng):
    T = random_pose(rng)
    buf = T.to_bytes()
    assert len(buf) == 96
    assert geo.Pose.from_bytes(buf).allclose(T, atol=0)
    vals = np.frombuffer(buf, dtype="<f8")
    np.testing.assert_array_equal(vals[:9], T.rotation.reshape(-1))
    np.testing.assert_array_equal(vals[9:], T.translation)
    assert geo.Pose.from_list(T.to_list()).allclose(T, atol=0)
    with pytest.raises(geo.GeometryError):
        geo.Pose.from_list([0.0] * 11)


def test_pose_is_immutable(rng):
    T = random_pose(rng)
    with pytest.raises(ValueError):
        T.translation[0] = 1.0


def test_planar_round_trip():
    for x, y, yaw in [(0.1, -0.2, 0.3), (-0.4, 0.0, -3.0), (0.0, 0.0, 0.0)]:
        T = geo.planar_pose(x, y, yaw)
        assert geo.is_planar(T)
        np.testing.assert_allclose(geo.planar_config(T), [x, y, yaw], atol=1e-12)


def test_planar_action_translation_is_palm_displacement():
    a = geo.planar_pose(0.1, 0.2, 0.5)
    b = geo.planar_pose(0.13, 0.24, 0.7)
    act = geo.relative(a, b)
    assert np.linalg.norm(act.translation) == pytest.approx(0.05, abs=1e-12)
    # gripper-frame rotation is the transpose of the world heading change
    assert abs(geo.yaw_of(act)) == pytest.approx(0.2, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(vec3, vec3)
def test_property_relative_round_trip(w, t):
    a = geo.Pose(geo.exp_map(np.array(w) * 0.7), t)
    b = geo.Pose(geo.exp_map(np.array(t) * 0.5), w)
    assert geo.compose(geo.relative(a, b), a).allclose(b, atol=1e-9)
    assert geo.relative(a, b).is_valid()


@settings(max_examples=60, deadline=None)
@given(vec3, vec3)
def test_property_pose_loss_symmetric_nonnegative(w, t):
    a = geo.Pose(geo.exp_map(np.array(w)), t)
    b = geo.Pose(geo.exp_map(np.array(t)), w)
    assert geo.pose_loss(a, b) >= 0.0
    assert geo.pose_loss(a, b) == pytest.approx(geo.pose_loss(b, a), abs=1e-15)
