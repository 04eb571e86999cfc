import math

import numpy as np
import pytest

from hcg import demos, geometry as geo, models, offline, sim
from hcg.models import ModelBundle, ModelConfig
from hcg.nn import autodiff as ad
from conftest import rel_error

TINY = ModelConfig(points=8, point_hidden=6, feat=5, hidden=7, z_dim=4, c_dim=2, max_waypoints=3)


def sampled_grad_check(loss_fn, params, rng, n_entries=6, h=1e-5):
    """Max relative error between analytic and central-difference gradients on sampled entries."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        num, ana = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = float(loss_fn().data)
            flat[i] = old - h
            fm = float(loss_fn().data)
            flat[i] = old
            num.append((fp - fm) / (2 * h))
            ana.append(p.grad.reshape(-1)[i])
        if np.max(np.abs(num)) > 1e-9:
            worst = max(worst, rel_error(ana, num))
    return worst


def tiny_obs(rng, n=8):
    pts = rng.uniform(-0.2, 0.2, size=(n, 3))
    pts[:, 2] = 0.0
    mask = (rng.random(n) < 0.3).astype(float)
    return sim.Observation(pts, mask, np.array([0.01, -0.02, 0.3]))


def tiny_plan(k=3):
    return [geo.planar_pose(0.03 * i, 0.01 * i, 0.1 * i) for i in range(k)]


def straight_demo(n_steps=10, step=0.05, points=8):
    """Pure-translation demonstration along the gripper's forward axis."""
    scene = sim.Scene(np.array([0.6, 0.0]), 0.02, np.zeros((0, 2)), np.zeros(0), start=np.array([0.0, 0.0, 0.0]))
    plan = [geo.planar_pose(step * i, 0.0, 0.0) for i in range(n_steps + 1)]
    actions = [geo.extract_expert_action(plan, t) for t in range(n_steps)]
    goals = [geo.extract_expert_goal(plan, t) for t in range(n_steps)]
    clouds = np.zeros((n_steps, points, 4))
    clouds[:, :, 0] = np.linspace(0.1, 0.2, points)
    configs = np.array([geo.planar_config(plan[t]) for t in range(n_steps)])
    return demos.Demonstration(scene, plan, 0, math.pi, clouds, configs, actions, goals)


def identity_policy(cfg=TINY):
    b = ModelBundle(cfg, seed=0)
    last = b.pi.head.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = 0.0
    return b.pi


# -- inputs ------------------------------------------------------------------


def test_plan_cloud_sequence_single_and_time_channel(rng):
    obs = tiny_obs(rng)
    local, glob = models.plan_to_cloud_sequence(obs, [geo.identity()])
    np.testing.assert_allclose(local[0, :, :3], obs.points)
    assert set(glob[:, 7]) == {0.0}
    local, glob = models.plan_to_cloud_sequence(obs, tiny_plan(5))
    times = glob.reshape(5, 8, 8)[:, 0, 7]
    assert times[0] == 0.0 and times[-1] == 1.0
    with pytest.raises(ValueError):
        models.plan_to_cloud_sequence(obs, [])


def test_plan_cloud_transform_by_hand():
    obs = sim.Observation(np.array([[0.2, 0.0, 0.0]]), np.array([1.0]), np.zeros(3))
    local, _ = models.plan_to_cloud_sequence(obs, [geo.identity(), geo.translate(-0.2, 0.0, 0.0)])
    np.testing.assert_allclose(local[1, 0, :3], [0.0, 0.0, 0.0], atol=1e-15)


def test_padding_is_max_pool_neutral(rng):
    b = ModelBundle(TINY, seed=1)
    obs = tiny_obs(rng)
    local, glob = models.plan_to_cloud_sequence(obs, tiny_plan(2))
    lp, gp = models.pad_plan_clouds(local, glob, 3)
    z1 = b.theta(local[None], glob[None]).data
    z2 = b.theta(lp[None], gp[None]).data
    np.testing.assert_allclose(z1, z2, atol=1e-15)


# -- networks ------------------------------------------------------------------


def test_permutation_invariance_and_determinism(rng):
    b = ModelBundle(TINY, seed=2)
    obs = tiny_obs(rng)
    perm = rng.permutation(8)
    pobs = sim.Observation(obs.points[perm], obs.mask[perm], obs.config)
    plan = tiny_plan()
    z = models.encode_plan(obs, plan, b.theta)
    np.testing.assert_array_equal(z, models.encode_plan(pobs, plan, b.theta))
    np.testing.assert_array_equal(z, models.encode_plan(obs, plan, b.theta))
    a1, g1 = models.policy_forward(obs, z, b.pi)
    a2, g2 = models.policy_forward(pobs, z, b.pi)
    np.testing.assert_array_equal(a1.matrix(), a2.matrix())
    assert a1.is_valid() and g1.is_valid()
    c = np.array([0.3, -1.0])
    np.testing.assert_array_equal(models.vae_decode(obs, c, b.phi), models.vae_decode(pobs, c, b.phi))


def test_prior_sampling(rng):
    b = ModelBundle(TINY, seed=3)
    obs = tiny_obs(rng)
    z1 = models.prior_sample_plan(obs, b.phi, np.random.default_rng(5))
    z2 = models.prior_sample_plan(obs, b.phi, np.random.default_rng(5))
    np.testing.assert_array_equal(z1, z2)
    codes = np.random.default_rng(0).standard_normal((8, 2))
    zs = models.prior_sample_plans(obs.features(), b.phi, codes)
    assert len({tuple(z) for z in zs}) == 8
    np.testing.assert_array_equal(models.prior_sample_plans(obs.features(), b.phi, np.zeros((1, 2)))[0],
                                  models.vae_decode(obs, np.zeros(2), b.phi))


# -- losses ------------------------------------------------------------------


@pytest.mark.parametrize("mu,log_var,expected", [
    ((0.0, 0.0), (0.0, 0.0), 0.0),
    ((1.0, 0.0), (0.0, 0.0), 0.5),
    ((0.0, 0.0), (1.0, 0.0), 0.5 * (math.e - 2)),
    ((2.0, 0.0), (0.0, 0.0), 2.0),
])
def test_kl_closed_form(mu, log_var, expected):
    assert float(models.kl_loss(np.array(mu), np.array(log_var)).data) == pytest.approx(expected, abs=1e-12)


def test_reparam_zero_noise_is_mean():
    c = models.reparam_sample(np.array([0.4, -0.2]), np.array([0.3, -1.0]), np.zeros(2))
    np.testing.assert_array_equal(c.data, [0.4, -0.2])


def test_traj_loss_oracle_and_hand_sum():
    d = straight_demo()
    pi = identity_policy()
    # each action contributes 0.05; the goal at step t is 0.05 * (10 - t) away
    expected = sum(0.05 * (10 - t) + 0.05 for t in range(10)) / 10
    assert models.traj_loss(d, np.zeros(TINY.z_dim), pi) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.325)


def test_traj_loss_zero_for_exact_outputs():
    d = straight_demo()
    batch = models.make_batch([(d, 0)], points=None, rng=None, with_plan=False)

    class Oracle:
        def __call__(self, obs, z):
            rows = []
            for a, g in zip(d.actions, d.goals):
                rows.append(np.concatenate([a.translation, geo.log_map(a.rotation), g.translation, geo.log_map(g.rotation)]))
            return ad.Tensor(np.array(rows))

    assert float(models.traj_loss_batch(Oracle(), batch, np.zeros((1, 4))).data) == pytest.approx(0.0, abs=1e-12)


def test_sampler_loss_terms(rng):
    b = ModelBundle(TINY, seed=4)
    d = straight_demo()
    batch = models.make_batch([(d, 0)], points=8, rng=None)
    z_theta = rng.normal(size=(1, TINY.z_dim))
    total, parts = models.sampler_loss_batch(b.phi, b.pi, batch, z_theta, np.zeros((1, 2)))
    feat = b.phi.state_feature(batch.start_obs)
    mu, lv = b.phi.encode(feat, z_theta)
    z_phi = b.phi.decode(feat, mu).data
    assert float(parts["recons"].data) == pytest.approx(float(((z_phi - z_theta) ** 2).sum()))
    kl = float(models.kl_loss(mu.data[0], lv.data[0]).data)
    lt = float(models.traj_loss_batch(b.pi, batch, z_phi).data)
    assert float(total.data) == pytest.approx(0.02 * kl + float(parts["recons"].data) + lt, rel=1e-12)
    assert float(ad.tsum(ad.square(ad.as_tensor(np.eye(4)[0]))).data) == 1.0


def test_sampler_loss_does_not_touch_theta(rng):
    b = ModelBundle(TINY, seed=5)
    d = straight_demo()
    batch = models.make_batch([(d, 0)], points=8, rng=None)
    z = b.theta(batch.plan_local, batch.plan_global)
    with b.pi.frozen():
        loss, _ = models.sampler_loss_batch(b.phi, b.pi, batch, z.data, rng.normal(size=(1, 2)))
        loss.backward()
    assert all(p.grad is None for p in b.theta.parameters())
    assert all(p.grad is None for p in b.pi.parameters())
    assert any(p.grad is not None for p in b.phi.parameters())


# -- composite gradients ---------------------------------------------------------


def test_gradient_encode_policy_traj(rng):
    b = ModelBundle(TINY, seed=6)
    d = straight_demo(n_steps=2, step=0.03)
    d.clouds[:, :, 1] = rng.uniform(-0.1, 0.1, size=(2, 8))
    d.clouds[:, :, 3] = (rng.random((2, 8)) < 0.5)
    batch = models.make_batch([(d, 0)], points=8, rng=None, w_max=3)

    def loss():
        return models.traj_loss_batch(b.pi, batch, b.theta(batch.plan_local, batch.plan_global))

    assert sampled_grad_check(loss, b.theta.parameters() + b.pi.parameters(), rng) < 1e-4


def test_gradient_cvae_chain(rng):
    b = ModelBundle(TINY, seed=7)
    d = straight_demo(n_steps=2, step=0.03)
    d.clouds[:, :, 1] = rng.uniform(-0.1, 0.1, size=(2, 8))
    batch = models.make_batch([(d, 0)], points=8, rng=None, w_max=3)
    z_theta = rng.normal(size=(1, TINY.z_dim))
    noise = rng.normal(size=(1, 2))

    def loss():
        return models.sampler_loss_batch(b.phi, b.pi, batch, z_theta, noise)[0]

    assert sampled_grad_check(loss, b.phi.parameters(), rng) < 1e-4


def test_gradient_pose_points_rotation(rng):
    trans = rng.normal(size=(3, 3)) * 0.1
    omega = rng.normal(size=(3, 3))
    omega[0] *= 1e-4  # series branch
    target = rng.normal(size=(3, len(geo.GRIPPER_POINTS), 3))
    w = ad.Tensor(omega, requires_grad=True)

    def loss():
        return ad.tsum(models.pose_l1(models.pose_points(ad.Tensor(trans), w), target))

    assert sampled_grad_check(loss, [w], rng, n_entries=9) < 1e-4


def test_pose_points_match_exp_map(rng):
    for _ in range(10):
        t, w = rng.normal(size=3), rng.normal(size=3)
        pts = models.pose_points(ad.Tensor(t[None]), ad.Tensor(w[None])).data[0]
        np.testing.assert_allclose(pts, geo.transform_points(geo.pose_from_vectors(t, w), geo.GRIPPER_POINTS),
                                   atol=1e-12)


# -- training ------------------------------------------------------------------


def _small_dataset(n_scenes=2, seed=3):
    return demos.generate_dataset(demos.DatasetConfig(n_scenes=n_scenes, obstacles_range=(3, 3), goals_per_scene=1,
                                                      seed=seed))


def test_memorize_single_demo():
    ds = _small_dataset(1)[:1]
    b = ModelBundle(seed=0)
    z0 = models.encode_plan(ds[0].observation(0), ds[0].plan, b.theta)
    before = models.traj_loss(ds[0], z0, b.pi)
    offline.train_offline(ds, b, offline.OfflineConfig(epochs=500, batch_size=1, seed=0, heldout_fraction=0.0))
    z1 = models.encode_plan(ds[0].observation(0), ds[0].plan, b.theta)
    assert models.traj_loss(ds[0], z1, b.pi) < 0.05 * before


def test_training_is_deterministic(tmp_path):
    ds = _small_dataset(3)
    paths = []
    for k in range(2):
        res = offline.train_offline(ds, cfg=offline.OfflineConfig(epochs=2, seed=9))
        paths.append(tmp_path / f"m{k}.ckpt")
        res.bundle.save(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_bc_variant_ignores_theta_and_phi():
    ds = _small_dataset(2)
    b = ModelBundle(seed=0)
    before = b.checksums()
    offline.train_offline(ds, b, offline.OfflineConfig(epochs=1, variant="bc", seed=0))
    after = b.checksums()
    assert before["theta"] == after["theta"] and before["phi"] == after["phi"]
    assert before["pi"] != after["pi"]
    with pytest.raises(ValueError):
        offline.train_offline(ds, cfg=offline.OfflineConfig(variant="nope"))
    with pytest.raises(ValueError):
        offline.train_offline([])


def test_checkpoint_round_trip(tmp_path):
    b = ModelBundle(TINY, seed=8)
    b.save(tmp_path / "m.ckpt", {"note": "x"})
    c = ModelBundle.load(tmp_path / "m.ckpt")
    assert c.cfg == TINY and c.meta["note"] == "x"
    for k, v in b.state_dict().items():
        np.testing.assert_array_equal(c.state_dict()[k], v.astype(np.float32).astype(np.float64))
