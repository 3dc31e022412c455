import numpy as np
import pytest
from hypothesis import given, strategies as st

from hjblearn import rlh
from hjblearn.errors import ConfigurationError
from hjblearn.problems import BoundaryConditionSet

CFG = rlh.RewardConfig()
EPS = 1e-9


@pytest.mark.parametrize("residual,case", [
    (CFG.l1 + EPS, rlh.CASE_FAR),
    (CFG.l1, rlh.CASE_NEAR),
    (CFG.l1 - EPS, rlh.CASE_NEAR),
    (CFG.l2 + EPS, rlh.CASE_NEAR),
    (CFG.l2, rlh.CASE_REACHED),
    (CFG.l2 - EPS, rlh.CASE_REACHED),
])
def test_reward_case_boundaries(residual, case):
    assert rlh.reward_case(residual, 0.6, CFG)[1] == case


def test_reward_values():
    assert rlh.reward_case(0.0, 0.6, CFG) == (0.6, rlh.CASE_REACHED)
    assert rlh.reward_case(0.1, 0.6, CFG)[0] == pytest.approx(10 * 0.1 + 0.6)
    assert rlh.reward_case(1.0, 0.6, CFG)[0] == pytest.approx(50.6)
    assert rlh.reward_case(np.inf, 0.3, CFG) == (100.0, rlh.CASE_DIVERGED)
    assert rlh.reward_case(0.0, np.nan, CFG) == (100.0, rlh.CASE_DIVERGED)


def test_reward_of_diverged_rollout(hyper):
    value, traj = rlh.reward(hyper, BoundaryConditionSet([1.0], [1.5], 2.0), [0.0], CFG)
    assert value == CFG.n1 and not traj.completed


def test_reward_of_exact_label(brach):
    bc = BoundaryConditionSet([0.0], [1.0], 1.0)
    value, traj = rlh.reward(brach, bc, [-2.247741383452209], CFG)
    assert value == traj.objective


@pytest.mark.parametrize("kwargs", [{"l2": 0.6}, {"n1": 10.0}, {"n2": 0.0}, {"beta_f": 0.0}])
def test_reward_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        rlh.RewardConfig(**kwargs)


def memory(**kw):
    args = dict(capacity=10, good_capacity=3, state_dim=3, action_dim=1, r_l=5.0)
    args.update(kw)
    return rlh.ReplayMemory(**args)


def tr(r, a=0.0):
    return rlh.Transition(np.zeros(3), [a], r)


def test_good_buffer_is_strict():
    m = memory()
    assert not m.remember(tr(5.0))
    assert m.remember(tr(5.0 - 1e-12))
    assert len(m) == 2 and m.good.size == 1


def test_good_buffer_fifo():
    m = memory(good_capacity=1)
    m.remember(tr(1.0, a=1.0))
    m.remember(tr(2.0, a=2.0))
    assert m.good.size == 1
    assert m.good_rows().a[0, 0] == 2.0


@given(st.lists(st.floats(0, 10), min_size=1, max_size=60), st.integers(1, 5))
def test_good_membership_invariant(rewards, decay_every):
    m = memory(capacity=20, good_capacity=8)
    for i, r in enumerate(rewards):
        m.remember(tr(r))
        if i % decay_every == 0:
            m.decay_threshold()
    rows = m.good_rows()
    assert np.all(rows.r < m.good_thresholds())
    assert len(m) <= 20 and m.good.size <= 8


@pytest.mark.parametrize("phi,n_good_rows,expect_good", [(0.0, 5, 0), (1.0, 0, 0), (0.5, 5, 500)])
def test_sample_quotas(phi, n_good_rows, expect_good):
    m = memory(capacity=5000, good_capacity=50, phi=phi)
    for _ in range(n_good_rows):
        m.remember(tr(1.0, a=-1.0))
    for _ in range(600):
        m.remember(tr(9.0, a=1.0))
    batch = m.sample_batch(1000, np.random.default_rng(0))
    assert len(batch) == 1000
    drawn_good = int(np.sum(batch.a[:, 0] == -1.0))
    if expect_good:
        # the main buffer can also hold good rows; at least the quota is good
        assert drawn_good >= expect_good
    elif phi == 0.0:
        assert drawn_good <= n_good_rows * 1000 // 605 + 50
    else:
        assert drawn_good == 0


def test_sample_from_empty_memory():
    with pytest.raises(Exception):
        memory().sample_batch(4, np.random.default_rng(0))


def make_agent(seed=0, **kw):
    cfg = rlh.RlhConfig(**kw)
    rng = np.random.default_rng(seed)
    return rlh.DdpgAgent(3, [-2.0], [1.0], np.zeros(3), np.ones(3), cfg, rng), rng


def test_zero_actor_outputs_box_center():
    agent, _ = make_agent()
    agent.actor.set_params(np.zeros(agent.actor.n_params))
    assert agent.act(np.array([0.2, 0.5, 0.9]))[0] == -0.5


def test_act_deterministic_without_noise():
    agent, rng = make_agent()
    s = np.array([0.2, 0.5, 0.9])
    np.testing.assert_array_equal(agent.act(s), agent.act(s))
    noisy = agent.act(s, 0.3, rng)
    assert -2.0 <= noisy[0] <= 1.0


def test_sigma_schedule_endpoints():
    assert rlh.sigma_schedule(0, 7000, 0.3, 0.01) == pytest.approx(0.3)
    assert rlh.sigma_schedule(6999, 7000, 0.3, 0.01) <= 0.01 + 1e-15


@given(st.floats(0.0, 1.0))
def test_soft_update_is_convex(eta):
    agent, rng = make_agent()
    agent.actor.set_params(rng.normal(size=agent.actor.n_params))
    before = np.max(np.abs(agent.actor_target.get_params() - agent.actor.get_params()))
    agent.soft_update(eta)
    after = np.max(np.abs(agent.actor_target.get_params() - agent.actor.get_params()))
    assert after <= before + 1e-12
    assert after == pytest.approx((1 - eta) * before, rel=1e-9, abs=1e-12)


def test_soft_update_limits():
    agent, rng = make_agent()
    agent.critic.set_params(rng.normal(size=agent.critic.n_params))
    target = agent.critic_target.get_params()
    agent.soft_update(0.0)
    np.testing.assert_array_equal(agent.critic_target.get_params(), target)
    agent.soft_update(1.0)
    np.testing.assert_array_equal(agent.critic_target.get_params(), agent.critic.get_params())


def batch_of(agent, rng, n):
    s = rng.uniform(0, 1, (n, 3))
    a = rng.uniform(-2, 1, (n, 1))
    return rlh.TransitionBatch(s, a, rng.normal(size=n))


def test_critic_gradient_matches_finite_difference():
    agent, rng = make_agent()
    b = batch_of(agent, rng, 1)
    _, g = agent.critic_gradient(b)
    p0 = agent.critic.get_params()
    h = 1e-6
    for i in rng.choice(p0.size, 12, replace=False):
        p = p0.copy(); p[i] += h; agent.critic.set_params(p)
        fp = agent.critic_loss(b)
        p[i] -= 2 * h; agent.critic.set_params(p)
        fm = agent.critic_loss(b)
        agent.critic.set_params(p0)
        assert g[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)


def test_actor_gradient_matches_finite_difference():
    agent, rng = make_agent()
    s = rng.uniform(0, 1, (4, 3))
    _, g = agent.actor_gradient(s)
    p0 = agent.actor.get_params()
    h = 1e-6

    def objective():
        return float(np.mean(agent.critic(np.hstack([s, agent.actor(s)]))))

    for i in rng.choice(p0.size, 12, replace=False):
        p = p0.copy(); p[i] += h; agent.actor.set_params(p)
        fp = objective()
        p[i] -= 2 * h; agent.actor.set_params(p)
        fm = objective()
        agent.actor.set_params(p0)
        assert g[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)


def test_perfect_critic_has_zero_loss():
    agent, rng = make_agent()
    b = batch_of(agent, rng, 8)
    b.r = agent.critic(np.hstack([b.s, b.a]))[:, 0]
    loss, g = agent.critic_gradient(b)
    assert loss == 0.0
    assert np.all(g == 0.0)


def test_critic_regression_decreases():
    agent, rng = make_agent()
    b = batch_of(agent, rng, 200)
    # targets on the scale the critic sees: penalties near N2 with O(10) spread
    b.r = 50.0 + 10.0 * (np.sin(3 * b.a[:, 0]) + b.s[:, 0])
    losses = []
    for _ in range(100):
        loss, g = agent.critic_gradient(b)
        losses.append(loss)
        agent.critic.set_params(agent.critic_opt.step(agent.critic.get_params(), g))
    assert np.all(np.diff(losses) < 0)


def test_gamma_has_no_effect():
    a1, rng1 = make_agent(gamma=0.0)
    a2, rng2 = make_agent(gamma=0.99)
    b = batch_of(a1, np.random.default_rng(5), 16)
    a1.update_step(b)
    a2.update_step(b)
    np.testing.assert_array_equal(a1.critic.get_params(), a2.critic.get_params())
    np.testing.assert_array_equal(a1.actor.get_params(), a2.actor.get_params())


@pytest.mark.parametrize("kwargs", [{"eta": 0.0}, {"eta": 1.5}, {"episodes": 0},
                                    {"sigma_end": 0.5, "sigma_start": 0.1}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        rlh.RlhConfig(**kwargs)


def test_unknown_hyperparameter():
    with pytest.raises(ConfigurationError, match="unknown"):
        rlh.RlhConfig.from_dict({"episodes": 5, "temperature": 1.0})


def test_training_is_seed_deterministic(brach):
    bc = BoundaryConditionSet([0.0], [1.0], 1.0)
    cfg = rlh.RlhConfig.profile("smoke", episodes=60, seed=3, window=20)
    a = rlh.train_rlh(brach, rlh.BcSampler.fixed(bc), cfg)
    b = rlh.train_rlh(brach, rlh.BcSampler.fixed(bc), cfg)
    assert a.log.to_csv() == b.log.to_csv()
    np.testing.assert_array_equal(a.agent.actor.get_params(), b.agent.actor.get_params())
    assert len(a.log.episode) == 3
    assert a.log.to_csv().splitlines()[0] == "episode,mean_reward,min_reward,R_l,sigma"


def test_agent_checkpoint(tmp_path, brach):
    bc = BoundaryConditionSet([0.0], [1.0], 1.0)
    res = rlh.train_rlh(brach, rlh.BcSampler.fixed(bc),
                        rlh.RlhConfig.profile("smoke", episodes=10, seed=0))
    rlh.save_agent(res, tmp_path, "brachistochrone")
    agent, meta = rlh.load_agent(tmp_path)
    s = bc.as_vector()
    np.testing.assert_array_equal(agent.act(s), res.agent.act(s))
    assert meta["hyperparameters"]["episodes"] == 10
