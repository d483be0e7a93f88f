
import numpy as np
import pytest

from ctdrl.agents import (
    DauAgent,
    DsupAgent,
    ExplorationSchedule,
    QrdqnAgent,
    ReplayBuffer,
    TrainConfig,
    TrainingDiverged,
    Transition,
    dau_loss_grads,
    dau_update,
    dsup_loss_grads,
    dsup_prediction,
    dsup_target,
    dsup_update,
    evaluate_policy,
    explore_action,
    greedy_action,
    shifted_dsup_greedy,
    store_subsampled,
    train,
)
from ctdrl.dist import DistortionMeasure
from ctdrl.envs import GbmParams, OptionTradingEnv


def make_agent(m=4, n_actions=2, h=0.25, q=0.5, advantage_head=False, seed=0, **kw):
    return DsupAgent(
        state_dim=1,
        n_actions=n_actions,
        h=h,
        q=q,
        m=m,
        hidden=(8, 8),
        discount=kw.pop("discount", 1.0),
        horizon=kw.pop("horizon", 1.0),
        advantage_head=advantage_head,
        seed=seed,
        **kw,
    )


def pin_heads(agent, theta_bias=None, phi_heads=None, adv=None):
    """Zero every weight so outputs equal the final-layer biases."""
    for net in (agent.theta, agent.phi):
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
    if theta_bias is not None:
        agent.theta.biases[-1][:] = theta_bias
    if phi_heads is not None:
        flat = np.concatenate([np.asarray(h, dtype=float) for h in phi_heads])
        agent.phi.biases[-1][: flat.size] = flat
    if adv is not None:
        agent.phi.biases[-1][agent.n_actions * agent.m :] = adv
    agent.sync_target()
    return agent


def single_transition(t=0.0, x=0.0, a=0, r=0.0, x_next=0.0, done=False):
    return Transition(t, np.array([x]), a, r, np.array([x_next]), done)


# ---------------------------------------------------------------- greedy


def test_greedy_action_tie_breaks_to_lowest_index():
    agent = pin_heads(make_agent())
    assert greedy_action(agent, 0.1, [0.3]) == 0


def test_greedy_action_follows_means():
    agent = pin_heads(make_agent(m=2), phi_heads=[[1.0, 1.0], [3.0, 3.0]])
    assert greedy_action(agent, 0.0, [0.0]) == 1


def test_greedy_action_cvar_prefers_light_left_tail():
    agent = make_agent(m=4, risk=DistortionMeasure.cvar(0.25))
    pin_heads(agent, phi_heads=[[0.0, 0.0, 0.0, 0.0], [-2.0, 1.0, 1.0, 1.0]])
    assert greedy_action(agent, 0.0, [0.0]) == 0
    mean_agent = pin_heads(
        make_agent(m=4), phi_heads=[[0.0, 0.0, 0.0, 0.0], [-2.0, 1.0, 1.0, 1.0]]
    )
    assert greedy_action(mean_agent, 0.0, [0.0]) == 1


def test_explore_action_endpoints():
    agent = pin_heads(make_agent(m=2), phi_heads=[[1.0, 1.0], [3.0, 3.0]])
    rng = np.random.default_rng(0)
    agent.schedule = ExplorationSchedule(0.0, 0.0, 1)
    assert all(explore_action(agent, 0.0, [0.0], rng, s) == 1 for s in range(20))

    agent.schedule = ExplorationSchedule(1.0, 1.0, 10**9)
    counts = np.zeros(2)
    for step in range(10_000):
        counts[explore_action(agent, 0.0, [0.0], rng, step)] += 1
    chi2 = np.sum((counts - 5000.0) ** 2 / 5000.0)
    assert chi2 < 6.635  # dof 1 critical value at p = 0.01


def test_schedule_decay_shape():
    sched = ExplorationSchedule(1.0, 0.02, 1000)
    assert sched.epsilon(0) == 1.0
    eps = [sched.epsilon(s) for s in range(0, 3000, 50)]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    assert sched.epsilon(1000) == pytest.approx(0.02)
    assert sched.epsilon(250_000) == pytest.approx(0.02)


# ------------------------------------------------------------- predictions


def test_dsup_prediction_pins_to_theta_at_greedy():
    for head in (False, True):
        agent = make_agent(m=6, advantage_head=head, seed=3)
        t, x = 0.3, [0.7]
        a_star = (
            shifted_dsup_greedy(agent, t, x) if head else greedy_action(agent, t, x)
        )
        pred = dsup_prediction(agent, t, x, a_star)
        theta = agent.theta.forward(agent.observe(t, x))[0]
        np.testing.assert_array_equal(pred.values, theta)


def test_dsup_prediction_h_one_drops_rescale():
    agent = make_agent(m=2, h=1.0, q=0.77)
    pin_heads(agent, theta_bias=[0.5, 0.5], phi_heads=[[1.0, 2.0], [4.0, 3.0]])
    # utilities 1.5 vs 3.5 so the greedy head is index 1
    pred = dsup_prediction(agent, 0.0, [0.0], 0)
    np.testing.assert_allclose(pred.values, [0.5 + (1 - 4), 0.5 + (2 - 3)])


def test_dsup_prediction_hand_value_with_shifted_greedy():
    # theta = 0, phi = ([2,2], [1,1]), advantage pushes the greedy index to the
    # low head; prediction at the other action is 0.25**0.5 * ([2,2]-[1,1])
    agent = make_agent(m=2, h=0.25, q=0.5, advantage_head=True)
    pin_heads(agent, phi_heads=[[2.0, 2.0], [1.0, 1.0]], adv=[0.0, 10.0])
    assert shifted_dsup_greedy(agent, 0.0, [0.0]) == 1
    pred = dsup_prediction(agent, 0.0, [0.0], 0)
    np.testing.assert_allclose(pred.values, [0.5, 0.5])


def test_dsup_target_examples():
    agent = make_agent(m=3, h=0.5, discount=1.0)
    pin_heads(agent)
    done_zero = dsup_target(agent, single_transition(a=0, r=0.0, done=True))
    np.testing.assert_array_equal(done_zero.values, 0.0)

    agent2 = make_agent(m=3, h=0.5, discount=0.9)
    pin_heads(agent2, theta_bias=[2.0, 2.0, 2.0])
    tgt = dsup_target(agent2, single_transition(r=3.0, done=False))
    np.testing.assert_allclose(tgt.values, 0.5 * 3.0 + 0.9**0.5 * 2.0)

    agent3 = DsupAgent(
        state_dim=1, n_actions=2, h=0.5, q=0.5, m=2, hidden=(4,),
        discount=1.0, horizon=1.0, seed=0,
        terminal_reward=lambda X: np.ones(np.atleast_2d(X).shape[0]),
    )
    tgt3 = dsup_target(agent3, single_transition(r=2.0, done=True))
    np.testing.assert_allclose(tgt3.values, 2.0)  # 0.5*2 + 1*1


def test_dsup_update_zero_loss_leaves_params_unchanged():
    agent = make_agent(m=3, h=0.5, discount=1.0)
    pin_heads(agent, theta_bias=[1.0, 1.0, 1.0])
    tr = single_transition(a=0, r=0.0, done=False)
    before = [p.copy() for p in agent.theta.params + agent.phi.params]
    loss = dsup_update(agent, [tr])
    assert loss == 0.0
    for p, b in zip(agent.theta.params + agent.phi.params, before):
        np.testing.assert_array_equal(p, b)


def test_dsup_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    agent = make_agent(m=5, h=0.25, q=0.5, seed=4)
    batch = [
        single_transition(t=0.0, x=0.2, a=0, r=0.4, x_next=0.3, done=False),
        single_transition(t=0.25, x=-0.5, a=1, r=-0.2, x_next=0.1, done=True),
    ]
    loss, grads, a_star = dsup_loss_grads(agent, batch)
    step = 1e-5
    for net_name, net in (("theta", agent.theta), ("phi", agent.phi)):
        for gi, p in zip(grads[net_name], net.params):
            flat_g = gi.ravel()
            flat_p = p.ravel()
            check = rng.choice(flat_p.size, size=min(10, flat_p.size), replace=False)
            for idx in check:
                old = flat_p[idx]
                flat_p[idx] = old + step
                up = dsup_loss_grads(agent, batch, a_star)[0]
                flat_p[idx] = old - step
                down = dsup_loss_grads(agent, batch, a_star)[0]
                flat_p[idx] = old
                fd = (up - down) / (2 * step)
                assert flat_g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_dsup_overfits_single_transition():
    agent = make_agent(m=4, h=0.5, lr=3e-3, seed=5)
    tr = single_transition(a=1, r=1.0, x_next=0.4, done=True)
    losses = [dsup_update(agent, [tr]) for _ in range(400)]
    tail = losses[50:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert losses[-1] < 0.05 * losses[0]


# ------------------------------------------------------------------- dau


def test_dau_fixpoint_has_zero_loss():
    h, gamma, r = 0.5, 0.999, 1.0
    v_star = h * r / (1.0 - gamma**h)
    agent = DauAgent(state_dim=1, n_actions=2, h=h, hidden=(4,), discount=gamma,
                     horizon=1.0, seed=0)
    for net in (agent.vnet, agent.anet):
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
    agent.vnet.biases[-1][:] = v_star
    agent.sync_target()
    tr = single_transition(a=0, r=r, done=False)
    loss, _, _ = dau_loss_grads(agent, [tr])
    assert loss == pytest.approx(0.0, abs=1e-24)


def test_dau_advantage_is_pinned_at_greedy():
    agent = DauAgent(state_dim=1, n_actions=3, h=0.25, hidden=(8,), discount=1.0,
                     horizon=1.0, seed=1)
    obs = agent.observe(0.2, [0.5])
    a_star = int(np.argmax(agent.anet.forward(obs), axis=1)[0])
    tr = single_transition(t=0.2, x=0.5, a=a_star, r=0.3, x_next=0.5, done=False)
    loss, _, _ = dau_loss_grads(agent, [tr])
    v = agent.vnet.forward(obs)[0, 0]
    v_next = agent.v_target.forward(agent.observe(0.45, [0.5]))[0, 0]
    tq = 0.25 * 0.3 + v_next
    assert loss == pytest.approx(0.5 * (v - tq) ** 2, rel=1e-12)


def test_dau_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    step = 1e-5
    batch = [
        single_transition(t=0.0, x=0.3, a=1, r=0.5, x_next=0.2, done=False),
        single_transition(t=0.25, x=-0.2, a=0, r=0.1, x_next=0.0, done=True),
    ]

    agent = DauAgent(state_dim=1, n_actions=2, h=0.25, hidden=(6,), discount=0.99,
                     horizon=1.0, seed=2)
    loss, grads, a_star = dau_loss_grads(agent, batch)
    for name, net in (("v", agent.vnet), ("a", agent.anet)):
        for gi, p in zip(grads[name], net.params):
            flat_g, flat_p = gi.ravel(), p.ravel()
            check = rng.choice(flat_p.size, size=min(8, flat_p.size), replace=False)
            for idx in check:
                old = flat_p[idx]
                flat_p[idx] = old + step
                up = dau_loss_grads(agent, batch, a_star)[0]
                flat_p[idx] = old - step
                down = dau_loss_grads(agent, batch, a_star)[0]
                flat_p[idx] = old
                fd = (up - down) / (2 * step)
                assert flat_g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    shared = make_agent(m=4, advantage_head=True, seed=3, discount=0.99)
    loss, grads, a_star = dau_loss_grads(shared, batch)
    for gi, p in zip(grads["phi"], shared.phi.params):
        flat_g, flat_p = gi.ravel(), p.ravel()
        check = rng.choice(flat_p.size, size=min(8, flat_p.size), replace=False)
        for idx in check:
            old = flat_p[idx]
            flat_p[idx] = old + step
            up = dau_loss_grads(shared, batch, a_star)[0]
            flat_p[idx] = old - step
            down = dau_loss_grads(shared, batch, a_star)[0]
            flat_p[idx] = old
            fd = (up - down) / (2 * step)
            assert flat_g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_dau_update_requires_advantage_capable_agent():
    plain = make_agent()
    with pytest.raises(ValueError):
        dau_update(plain, [single_transition()])
    qr = QrdqnAgent(state_dim=1, n_actions=2, h=0.25, m=4, hidden=(4,), seed=0)
    with pytest.raises(TypeError):
        dau_update(qr, [single_transition()])


# --------------------------------------------------------------- shifted


def test_shifted_greedy_equals_plain_greedy_at_q_one():
    agent = make_agent(m=5, h=0.3, q=1.0, advantage_head=True, seed=6)
    rng = np.random.default_rng(0)
    for _ in range(25):
        t = float(rng.uniform(0, 1))
        x = [float(rng.normal())]
        assert shifted_dsup_greedy(agent, t, x) == greedy_action(agent, t, x)


def test_shifted_greedy_follows_dominant_advantage():
    agent = make_agent(m=3, h=0.01, q=0.5, advantage_head=True)
    pin_heads(agent, adv=[0.0, 5.0])
    assert shifted_dsup_greedy(agent, 0.0, [0.0]) == 1
    assert greedy_action(agent, 0.0, [0.0]) == 0


def test_shifted_greedy_hand_computed():
    agent = make_agent(m=2, h=0.01, q=0.5, advantage_head=True)
    pin_heads(agent, phi_heads=[[1.0, 1.0], [0.0, 0.0]], adv=[0.0, 30.0])
    # shift factor 1 - 0.01**0.5 = 0.9: utilities 1.0 vs 0 + 27
    assert shifted_dsup_greedy(agent, 0.0, [0.0]) == 1


def test_shifted_greedy_requires_head():
    with pytest.raises(ValueError):
        shifted_dsup_greedy(make_agent(), 0.0, [0.0])


# ----------------------------------------------------------------- replay


def test_replay_buffer_ring_overwrite():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(single_transition(r=float(i)))
    assert len(buf) == 3
    stored = sorted(tr.r for tr in buf._items)
    assert stored == [2.0, 3.0, 4.0]
    rng = np.random.default_rng(0)
    sample = buf.sample(10, rng)
    assert len(sample) == 10
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_store_subsampled_rules():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(10**6)
    for _ in range(50):
        assert store_subsampled(buf, single_transition(done=False), 1.0, rng)
        assert store_subsampled(buf, single_transition(done=True), 1e-9, rng)
    with pytest.raises(ValueError):
        store_subsampled(buf, single_transition(), 0.0, rng)

    kept = 0
    offers = 100_000
    for _ in range(offers):
        kept += store_subsampled(buf, single_transition(done=False), 0.1, rng)
    assert abs(kept / offers - 0.1) < 0.01


# -------------------------------------------------------- structure checks


def test_qrdqn_target_reduces_to_dsup_target_on_shared_bootstrap():
    # with every action head of the target network equal, the next-state
    # greedy selection is irrelevant and both targets are the h-scaled
    # quantile TD target
    m, h = 4, 0.5
    common = np.array([0.3, 0.6, 0.9, 1.2])
    qr = QrdqnAgent(state_dim=1, n_actions=2, h=h, m=m, hidden=(6,), discount=0.99,
                    horizon=1.0, seed=0)
    for w in qr.zeta.weights:
        w[:] = 0.0
    for b in qr.zeta.biases:
        b[:] = 0.0
    qr.zeta.biases[-1][:] = np.concatenate([common, common])
    qr.sync_target()

    ds = make_agent(m=m, h=h, discount=0.99)
    pin_heads(ds, theta_bias=common)

    for tr in (
        single_transition(r=0.7, done=False),
        single_transition(r=0.0, x_next=0.5, done=True),
    ):
        np.testing.assert_array_equal(
            qr.target(tr).values, dsup_target(ds, tr).values
        )


def test_rescale_consistency_of_prediction_family():
    # positional transport gap of the predicted return family equals h**q
    # times the gap of the proxy-difference family
    agent = make_agent(m=6, n_actions=3, h=0.25, q=0.5, seed=7)
    t, x = 0.4, [0.2]
    obs = agent.observe(t, x)
    heads, _ = agent._phi_split(agent.phi.forward(obs))
    a_star = greedy_action(agent, t, x)
    preds = [dsup_prediction(agent, t, x, a).values for a in range(3)]
    deltas = [heads[0, a] - heads[0, a_star] for a in range(3)]
    for p in (1, 2):
        for i in range(3):
            for j in range(i + 1, 3):
                gap_pred = float(np.mean(np.abs(preds[i] - preds[j]) ** p) ** (1 / p))
                gap_delta = float(np.mean(np.abs(deltas[i] - deltas[j]) ** p) ** (1 / p))
                assert gap_pred == pytest.approx(0.25**0.5 * gap_delta, rel=1e-12, abs=1e-15)


def test_updates_are_bitwise_reproducible():
    batch = [
        single_transition(t=0.0, x=0.1, a=0, r=0.2, x_next=0.15, done=False),
        single_transition(t=0.25, x=0.4, a=1, r=-0.1, x_next=0.0, done=True),
    ]
    agents_pair = [make_agent(m=5, seed=11, advantage_head=True) for _ in range(2)]
    for agent in agents_pair:
        for _ in range(3):
            dsup_update(agent, batch)
            dau_update(agent, batch)
    for pa, pb in zip(agents_pair[0].phi.params, agents_pair[1].phi.params):
        np.testing.assert_array_equal(pa, pb)
    for pa, pb in zip(agents_pair[0].theta.params, agents_pair[1].theta.params):
        np.testing.assert_array_equal(pa, pb)


def test_no_gradient_reaches_target_network():
    agent = make_agent(m=5, seed=12)
    batch = [single_transition(a=1, r=0.3, x_next=0.2, done=False)]
    before = [p.copy() for p in agent.theta_target.params]
    for _ in range(5):
        dsup_update(agent, batch)
    for p, b in zip(agent.theta_target.params, before):
        np.testing.assert_array_equal(p, b)


# ------------------------------------------------------------------ train


class BanditEnv:
    """One decision per episode; the next state records the action taken and
    the terminal reward reads it back."""

    horizon = 1.0
    discount = 1.0
    n_actions = 2
    state_dim = 1

    def reset(self, rng):
        return np.zeros(1)

    def step_batch(self, t, X, actions, h, rng):
        X = np.atleast_2d(X)
        nxt = np.asarray(actions, dtype=float).reshape(-1, 1)
        return nxt, np.zeros(X.shape[0]), np.ones(X.shape[0], dtype=bool)

    def terminal_reward(self, X):
        return np.atleast_2d(X)[:, 0]


def test_train_zero_updates_empty_log():
    env = BanditEnv()
    agent = make_agent(h=1.0, horizon=1.0, terminal_reward=env.terminal_reward)
    assert train(agent, env, 0) == []


def test_train_learns_bandit():
    env = BanditEnv()
    agent = DsupAgent(
        state_dim=1, n_actions=2, h=1.0, q=0.5, m=8, hidden=(16, 16),
        lr=5e-3, discount=1.0, horizon=1.0,
        terminal_reward=env.terminal_reward,
        schedule=ExplorationSchedule(1.0, 0.02, 100),
        seed=0,
    )
    cfg = TrainConfig(batch_size=16, buffer_capacity=500, target_period=25,
                      eval_every=0, seed=0)
    train(agent, env, 300, cfg)
    assert agent.act_greedy(0.0, [0.0]) == 1


def test_train_is_seed_reproducible():
    env = BanditEnv()

    def run():
        agent = DsupAgent(
            state_dim=1, n_actions=2, h=1.0, q=0.5, m=4, hidden=(8,),
            lr=1e-3, discount=1.0, horizon=1.0,
            terminal_reward=env.terminal_reward,
            schedule=ExplorationSchedule(1.0, 0.1, 50), seed=3,
        )
        cfg = TrainConfig(batch_size=8, buffer_capacity=100, target_period=20,
                          eval_every=25, eval_episodes=10, seed=3)
        return train(agent, env, 100, cfg), agent

    log_a, agent_a = run()
    log_b, agent_b = run()
    assert log_a == log_b
    for pa, pb in zip(agent_a.theta.params, agent_b.theta.params):
        np.testing.assert_array_equal(pa, pb)


def test_train_aborts_on_divergence_with_partial_log():
    class InfEnv(BanditEnv):
        def terminal_reward(self, X):
            return np.full(np.atleast_2d(X).shape[0], np.inf)

    env = InfEnv()
    agent = DsupAgent(
        state_dim=1, n_actions=2, h=1.0, q=0.5, m=4, hidden=(8,), lr=1e-3,
        discount=1.0, horizon=1.0, terminal_reward=env.terminal_reward, seed=0,
    )
    cfg = TrainConfig(batch_size=4, buffer_capacity=100, target_period=100,
                      eval_every=0, seed=0)
    with pytest.raises(TrainingDiverged):
        train(agent, env, 50, cfg)


def test_evaluate_immediate_execute_is_exactly_zero():
    env = OptionTradingEnv(GbmParams(0.0, 0.2))
    rng = np.random.default_rng(0)
    mean_ret, cvar_ret, gains = evaluate_policy(
        env, lambda t, X: np.ones(X.shape[0], dtype=int), 64, rng, h=0.2
    )
    np.testing.assert_array_equal(gains, 0.0)
    assert mean_ret == 0.0 and cvar_ret == 0.0
