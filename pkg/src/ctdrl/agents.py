"""Value-based learners at decision frequency 1/h.

Four agent kinds share the same training loop: a quantile return model with a
superiority proxy (optionally carrying an advantage head on a shared torso),
a plain quantile-regression baseline, and an advantage-updating baseline.
All updates are pure functions of (parameters, batch, rng draw) so runs are
bitwise reproducible under fixed seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .approx import AdamState, Mlp, adam_step
from .ctmdp import TIME_TOL, substream
from .dist import DistortionMeasure, EmpiricalDist, QuantileRep, risk_measure, to_quantile_rep

__all__ = [
    "Transition",
    "ReplayBuffer",
    "ExplorationSchedule",
    "TrainingDiverged",
    "DsupAgent",
    "QrdqnAgent",
    "DauAgent",
    "TrainConfig",
    "TrainRow",
    "greedy_action",
    "explore_action",
    "shifted_dsup_greedy",
    "dsup_prediction",
    "dsup_target",
    "dsup_loss_grads",
    "dsup_update",
    "dau_loss_grads",
    "dau_update",
    "store_subsampled",
    "train",
    "evaluate",
    "evaluate_policy",
]


@dataclass(frozen=True, eq=False)
class Transition:
    t: float
    x: np.ndarray
    a: int
    r: float
    x_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring with uniform with-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items = []
        self._pos = 0

    def add(self, tr: Transition):
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._pos] = tr
            self._pos = (self._pos + 1) % self.capacity

    def sample(self, k: int, rng: np.random.Generator):
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=k)
        return [self._items[i] for i in idx]

    def __len__(self):
        return len(self._items)


@dataclass(frozen=True)
class ExplorationSchedule:
    """Linear epsilon decay, clamped at the end value."""

    eps_start: float = 1.0
    eps_end: float = 0.02
    decay_steps: int = 10_000

    def epsilon(self, step: int) -> float:
        if self.decay_steps <= 0:
            return self.eps_end
        frac = min(1.0, max(0.0, step / self.decay_steps))
        return self.eps_start + (self.eps_end - self.eps_start) * frac


class TrainingDiverged(RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


def _risk_utilities(heads, weights):
    """Distortion-measure value of each action head after canonicalizing."""
    return np.einsum("...am,m->...a", np.sort(heads, axis=-1), weights)


def _zero_terminal(X):
    X = np.atleast_2d(X)
    return np.zeros(X.shape[0])


class _AgentBase:
    def observe(self, t, X) -> np.ndarray:
        """Network input: normalized clamped time then the state coordinates."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        tau = min(max(t / self.horizon, 0.0), 1.0)
        return np.concatenate([np.full((X.shape[0], 1), tau), X], axis=1)

    def act_greedy(self, t, x) -> int:
        return int(self.act_greedy_batch(t, np.atleast_2d(x))[0])

    def _terminal(self, X):
        return np.asarray(self.terminal_reward(np.atleast_2d(X)), dtype=np.float64)


class DsupAgent(_AgentBase):
    """Paired return-quantile and superiority-proxy networks.

    theta maps (t, x) to m return quantiles; phi maps (t, x) to one m-atom
    proxy head per action, plus one scalar advantage head per action when
    ``advantage_head`` is set (the two-timescale variant). The proxy
    difference phi(a) - phi(a*) models the rescaled superiority, so the
    prediction at the greedy action is exactly theta.
    """

    def __init__(
        self,
        state_dim: int,
        n_actions: int,
        h: float,
        q: float = 0.5,
        m: int = 100,
        hidden=(100, 100),
        risk: DistortionMeasure | None = None,
        lr: float = 1e-4,
        kappa: float = 1.0,
        discount: float = 0.999,
        horizon: float = 100.0,
        terminal_reward=None,
        advantage_head: bool = False,
        schedule: ExplorationSchedule | None = None,
        seed: int = 0,
    ):
        if h <= 0:
            raise ValueError("h must be positive")
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.h = h
        self.q = q
        self.m = m
        self.kappa = kappa
        self.discount = discount
        self.gamma_h = discount**h
        self.horizon = horizon
        self.advantage_head = advantage_head
        self.terminal_reward = terminal_reward or _zero_terminal
        self.risk = risk or DistortionMeasure.expected_value()
        self._risk_w = self.risk.level_weights(m)
        self.schedule = schedule or ExplorationSchedule()
        rng = np.random.default_rng(seed)
        obs_dim = state_dim + 1
        phi_out = n_actions * m + (n_actions if advantage_head else 0)
        self.theta = Mlp.from_sizes([obs_dim, *hidden, m], rng)
        self.phi = Mlp.from_sizes([obs_dim, *hidden, phi_out], rng)
        self.theta_target = self.theta.copy()
        self.adam_theta = AdamState(self.theta.params, lr=lr)
        self.adam_phi = AdamState(self.phi.params, lr=lr)

    @property
    def kind(self) -> str:
        return "dau+dsup" if self.advantage_head else "dsup"

    def _phi_split(self, phi_out):
        b = phi_out.shape[0]
        heads = phi_out[:, : self.n_actions * self.m].reshape(
            b, self.n_actions, self.m
        )
        adv = phi_out[:, self.n_actions * self.m :] if self.advantage_head else None
        return heads, adv

    def _utilities(self, heads, adv, shifted: bool):
        util = _risk_utilities(heads, self._risk_w)
        if shifted:
            if adv is None:
                raise ValueError("agent has no advantage head")
            util = util + (1.0 - self.h ** (1.0 - self.q)) * adv
        return util

    def _greedy_indices(self, obs):
        heads, adv = self._phi_split(self.phi.forward(obs))
        util = self._utilities(heads, adv, shifted=self.advantage_head)
        return np.argmax(util, axis=1)

    def act_greedy_batch(self, t, X) -> np.ndarray:
        return self._greedy_indices(self.observe(t, X))

    def sync_target(self):
        self.theta_target = self.theta.copy()

    def train_step(self, batch) -> float:
        loss = dsup_update(self, batch)
        if self.advantage_head:
            loss += dau_update(self, batch)
        return loss

    def named_params(self) -> dict:
        out = {}
        for net_name, net in (("theta", self.theta), ("phi", self.phi)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{net_name}.w{i}"] = w
                out[f"{net_name}.b{i}"] = b
        return out


class QrdqnAgent(_AgentBase):
    """Quantile-regression baseline: one m-atom head per action, trained with
    the same h-scaled rewards and gamma**h discounting as the superiority
    agents so frequency sweeps compare like with like."""

    kind = "qrdqn"

    def __init__(
        self,
        state_dim: int,
        n_actions: int,
        h: float,
        m: int = 100,
        hidden=(100, 100),
        risk: DistortionMeasure | None = None,
        lr: float = 1e-4,
        kappa: float = 1.0,
        discount: float = 0.999,
        horizon: float = 100.0,
        terminal_reward=None,
        schedule: ExplorationSchedule | None = None,
        seed: int = 0,
    ):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.h = h
        self.m = m
        self.kappa = kappa
        self.discount = discount
        self.gamma_h = discount**h
        self.horizon = horizon
        self.terminal_reward = terminal_reward or _zero_terminal
        self.risk = risk or DistortionMeasure.expected_value()
        self._risk_w = self.risk.level_weights(m)
        self.schedule = schedule or ExplorationSchedule()
        rng = np.random.default_rng(seed)
        obs_dim = state_dim + 1
        self.zeta = Mlp.from_sizes([obs_dim, *hidden, n_actions * m], rng)
        self.zeta_target = self.zeta.copy()
        self.adam = AdamState(self.zeta.params, lr=lr)

    def _heads(self, net, obs):
        return net.forward(obs).reshape(obs.shape[0], self.n_actions, self.m)

    def act_greedy_batch(self, t, X) -> np.ndarray:
        util = _risk_utilities(self._heads(self.zeta, self.observe(t, X)), self._risk_w)
        return np.argmax(util, axis=1)

    def sync_target(self):
        self.zeta_target = self.zeta.copy()

    def target(self, tr: Transition) -> QuantileRep:
        obs_next = self.observe(tr.t + self.h, tr.x_next)
        heads = self._heads(self.zeta_target, obs_next)
        util = _risk_utilities(heads, self._risk_w)
        a_star = int(np.argmax(util, axis=1)[0])
        boot = heads[0, a_star]
        g = float(self._terminal(tr.x_next)[0])
        done = float(tr.done)
        atoms = self.h * tr.r + self.gamma_h * ((1.0 - done) * boot + done * g)
        return QuantileRep(np.broadcast_to(atoms, (self.m,)).copy())

    def train_step(self, batch) -> float:
        b = len(batch)
        obs = np.concatenate([self.observe(tr.t, tr.x) for tr in batch])
        obs_next = np.concatenate(
            [self.observe(tr.t + self.h, tr.x_next) for tr in batch]
        )
        a_idx = np.array([tr.a for tr in batch])
        r = np.array([tr.r for tr in batch])
        done = np.array([float(tr.done) for tr in batch])
        g = np.concatenate([self._terminal(tr.x_next) for tr in batch])

        out, cache = self.zeta.forward_cached(obs)
        heads = out.reshape(b, self.n_actions, self.m)
        pred = heads[np.arange(b), a_idx]

        t_heads = self._heads(self.zeta_target, obs_next)
        t_util = _risk_utilities(t_heads, self._risk_w)
        a_star = np.argmax(t_util, axis=1)
        boot = t_heads[np.arange(b), a_star]
        tgt = (self.h * r)[:, None] + self.gamma_h * (
            (1.0 - done)[:, None] * boot + (done * g)[:, None]
        )

        loss, grad_pred = kernels.quantile_huber_batch(pred, tgt, self.kappa)
        grad_heads = np.zeros_like(heads)
        grad_heads[np.arange(b), a_idx] = grad_pred
        grads, _ = self.zeta.backward(cache, grad_heads.reshape(b, -1))
        adam_step(self.adam, self.zeta.params, grads)
        return float(loss)

    def named_params(self) -> dict:
        return {
            f"zeta.{kind}{i}": arr
            for i, (w, bias) in enumerate(zip(self.zeta.weights, self.zeta.biases))
            for kind, arr in (("w", w), ("b", bias))
        }


class DauAgent(_AgentBase):
    """Advantage-updating baseline: a scalar value network and a per-action
    advantage network pinned to zero at the greedy action."""

    kind = "dau"

    def __init__(
        self,
        state_dim: int,
        n_actions: int,
        h: float,
        hidden=(100, 100),
        lr: float = 1e-4,
        discount: float = 0.999,
        horizon: float = 100.0,
        terminal_reward=None,
        schedule: ExplorationSchedule | None = None,
        seed: int = 0,
    ):
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.h = h
        self.discount = discount
        self.gamma_h = discount**h
        self.horizon = horizon
        self.terminal_reward = terminal_reward or _zero_terminal
        self.schedule = schedule or ExplorationSchedule()
        rng = np.random.default_rng(seed)
        obs_dim = state_dim + 1
        self.vnet = Mlp.from_sizes([obs_dim, *hidden, 1], rng)
        self.anet = Mlp.from_sizes([obs_dim, *hidden, n_actions], rng)
        self.v_target = self.vnet.copy()
        self.adam_v = AdamState(self.vnet.params, lr=lr)
        self.adam_a = AdamState(self.anet.params, lr=lr)

    def act_greedy_batch(self, t, X) -> np.ndarray:
        return np.argmax(self.anet.forward(self.observe(t, X)), axis=1)

    def sync_target(self):
        self.v_target = self.vnet.copy()

    def train_step(self, batch) -> float:
        return dau_update(self, batch)

    def named_params(self) -> dict:
        out = {}
        for net_name, net in (("v", self.vnet), ("a", self.anet)):
            for i, (w, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{net_name}.w{i}"] = w
                out[f"{net_name}.b{i}"] = b
        return out


def greedy_action(agent, t, x) -> int:
    """Risk-greedy action from the raw proxy heads; ties go to the lowest index."""
    obs = agent.observe(t, x)
    heads, adv = agent._phi_split(agent.phi.forward(obs))
    util = agent._utilities(heads, adv, shifted=False)
    return int(np.argmax(util, axis=1)[0])


def shifted_dsup_greedy(agent, t, x) -> int:
    """Greedy over proxy heads shifted by (1 - h**(1-q)) times the advantage."""
    if not getattr(agent, "advantage_head", False):
        raise ValueError("agent has no advantage head")
    obs = agent.observe(t, x)
    heads, adv = agent._phi_split(agent.phi.forward(obs))
    util = agent._utilities(heads, adv, shifted=True)
    return int(np.argmax(util, axis=1)[0])


def explore_action(agent, t, x, rng: np.random.Generator, step: int) -> int:
    """Epsilon-greedy: uniform over actions with probability epsilon(step)."""
    eps = agent.schedule.epsilon(step)
    if rng.random() < eps:
        return int(rng.integers(agent.n_actions))
    return agent.act_greedy(t, x)


def dsup_prediction(agent: DsupAgent, t, x, a: int) -> QuantileRep:
    """theta(t, x) + h**q (phi(t, x, a) - phi(t, x, a*)); equals theta at a*."""
    obs = agent.observe(t, x)
    theta = agent.theta.forward(obs)[0]
    heads, adv = agent._phi_split(agent.phi.forward(obs))
    util = agent._utilities(heads, adv, shifted=agent.advantage_head)
    a_star = int(np.argmax(util, axis=1)[0])
    scale = agent.h**agent.q
    return QuantileRep(theta + scale * (heads[0, a] - heads[0, a_star]))


def dsup_target(agent: DsupAgent, tr: Transition) -> QuantileRep:
    """h r + gamma**h ((1 - done) theta_bar(t+h, x') + done g(x')), per atom.

    Computed from the target network; no gradients flow through it.
    """
    obs_next = agent.observe(tr.t + agent.h, tr.x_next)
    boot = agent.theta_target.forward(obs_next)[0]
    g = float(agent._terminal(tr.x_next)[0])
    done = float(tr.done)
    atoms = agent.h * tr.r + agent.gamma_h * ((1.0 - done) * boot + done * g)
    return QuantileRep(np.broadcast_to(atoms, (agent.m,)).copy())


def _batch_arrays(agent, batch):
    obs = np.concatenate([agent.observe(tr.t, tr.x) for tr in batch])
    obs_next = np.concatenate(
        [agent.observe(tr.t + agent.h, tr.x_next) for tr in batch]
    )
    a_idx = np.array([tr.a for tr in batch])
    r = np.array([tr.r for tr in batch])
    done = np.array([float(tr.done) for tr in batch])
    g = np.concatenate([agent._terminal(tr.x_next) for tr in batch])
    return obs, obs_next, a_idx, r, done, g


def dsup_loss_grads(agent: DsupAgent, batch, a_star=None):
    """Quantile-Huber loss over a batch plus gradients per network.

    The greedy index is recomputed per batch element from the current phi
    unless one is passed in (gradient checks freeze it); either way it is
    treated as constant inside the update. The bootstrap is read from the
    frozen theta copy. Returns (loss, {"theta": grads, "phi": grads}, a_star).
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    b = len(batch)
    obs, obs_next, a_idx, r, done, g = _batch_arrays(agent, batch)

    theta_out, theta_cache = agent.theta.forward_cached(obs)
    phi_out, phi_cache = agent.phi.forward_cached(obs)
    heads, adv = agent._phi_split(phi_out)
    if a_star is None:
        util = agent._utilities(heads, adv, shifted=agent.advantage_head)
        a_star = np.argmax(util, axis=1)

    rows = np.arange(b)
    scale = agent.h**agent.q
    pred = theta_out + scale * (heads[rows, a_idx] - heads[rows, a_star])

    boot = agent.theta_target.forward(obs_next)
    tgt = (agent.h * r)[:, None] + agent.gamma_h * (
        (1.0 - done)[:, None] * boot + (done * g)[:, None]
    )

    loss, grad_pred = kernels.quantile_huber_batch(pred, tgt, agent.kappa)

    theta_grads, _ = agent.theta.backward(theta_cache, grad_pred)
    grad_heads = np.zeros_like(heads)
    grad_heads[rows, a_idx] += scale * grad_pred
    grad_heads[rows, a_star] -= scale * grad_pred
    grad_phi_out = np.zeros_like(phi_out)
    grad_phi_out[:, : agent.n_actions * agent.m] = grad_heads.reshape(b, -1)
    phi_grads, _ = agent.phi.backward(phi_cache, grad_phi_out)
    return float(loss), {"theta": theta_grads, "phi": phi_grads}, a_star


def dsup_update(agent: DsupAgent, batch) -> float:
    """One joint Adam step on theta and phi from the quantile-Huber loss."""
    loss, grads, _ = dsup_loss_grads(agent, batch)
    adam_step(agent.adam_theta, agent.theta.params, grads["theta"])
    adam_step(agent.adam_phi, agent.phi.params, grads["phi"])
    return loss


def dau_loss_grads(agent, batch, a_star=None):
    """Half mean squared Bellman error on Q = V + h A, with gradients.

    For the two-timescale agent, V is read as the mean of theta (a constant
    in this loss) and gradients flow through the advantage head and shared
    phi torso only. The standalone advantage agent owns a scalar V network
    and bootstraps from its frozen copy; both its networks get gradients.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    b = len(batch)
    obs, obs_next, a_idx, r, done, g = _batch_arrays(agent, batch)
    rows = np.arange(b)
    h = agent.h

    if isinstance(agent, DsupAgent):
        if not agent.advantage_head:
            raise ValueError("agent has no advantage head")
        phi_out, phi_cache = agent.phi.forward_cached(obs)
        heads, adv = agent._phi_split(phi_out)
        if a_star is None:
            util = agent._utilities(heads, adv, shifted=True)
            a_star = np.argmax(util, axis=1)
        a_vals = adv[rows, a_idx] - adv[rows, a_star]
        v_now = agent.theta.forward(obs).mean(axis=1)
        v_next = agent.theta.forward(obs_next).mean(axis=1)
        q = v_now + h * a_vals
        tq = h * r + agent.gamma_h * ((1.0 - done) * v_next + done * g)
        diff = q - tq
        loss = 0.5 * float(np.mean(diff**2))
        dq = diff / b
        grad_adv = np.zeros_like(adv)
        grad_adv[rows, a_idx] += h * dq
        grad_adv[rows, a_star] -= h * dq
        grad_phi_out = np.zeros_like(phi_out)
        grad_phi_out[:, agent.n_actions * agent.m :] = grad_adv
        phi_grads, _ = agent.phi.backward(phi_cache, grad_phi_out)
        return loss, {"phi": phi_grads}, a_star

    if isinstance(agent, DauAgent):
        v_out, v_cache = agent.vnet.forward_cached(obs)
        a_out, a_cache = agent.anet.forward_cached(obs)
        if a_star is None:
            a_star = np.argmax(a_out, axis=1)
        a_vals = a_out[rows, a_idx] - a_out[rows, a_star]
        q = v_out[:, 0] + h * a_vals
        v_next = agent.v_target.forward(obs_next)[:, 0]
        tq = h * r + agent.gamma_h * ((1.0 - done) * v_next + done * g)
        diff = q - tq
        loss = 0.5 * float(np.mean(diff**2))
        dq = diff / b
        v_grads, _ = agent.vnet.backward(v_cache, dq[:, None])
        grad_a = np.zeros_like(a_out)
        grad_a[rows, a_idx] += h * dq
        grad_a[rows, a_star] -= h * dq
        a_grads, _ = agent.anet.backward(a_cache, grad_a)
        return loss, {"v": v_grads, "a": a_grads}, a_star

    raise TypeError(f"no advantage update for agent type {type(agent)}")


def dau_update(agent, batch) -> float:
    """One Adam step on the advantage Bellman error."""
    loss, grads, _ = dau_loss_grads(agent, batch)
    if isinstance(agent, DsupAgent):
        adam_step(agent.adam_phi, agent.phi.params, grads["phi"])
    else:
        adam_step(agent.adam_v, agent.vnet.params, grads["v"])
        adam_step(agent.adam_a, agent.anet.params, grads["a"])
    return loss


def store_subsampled(buffer: ReplayBuffer, tr: Transition, h: float, rng) -> bool:
    """Bernoulli(h) acceptance; terminal transitions are always kept."""
    if h <= 0:
        raise ValueError("h must be positive")
    keep = tr.done or rng.random() < min(1.0, h)
    if keep:
        buffer.add(tr)
    return keep


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    buffer_capacity: int = 20_000
    target_period: int = 1000
    eval_every: int = 1000
    eval_episodes: int = 100
    eval_cvar_alpha: float = 0.25
    seed: int = 0


@dataclass(frozen=True)
class TrainRow:
    wall_step: int
    env_time: float
    loss: float
    eval_mean_return: float
    eval_cvar_return: float
    epsilon: float


def _env_step_single(env, t, x, a, h, rng):
    X, r, done = env.step_batch(t, np.atleast_2d(x), np.array([a]), h, rng)
    return X[0], float(r[0]), bool(done[0])


def evaluate_policy(env, action_fn, episodes: int, rng, h: float, cvar_alpha=0.25):
    """Mean and CVaR of discounted returns over lockstep greedy episodes.

    Terminal payoffs are credited at the end of the decision interval,
    matching the bootstrap-target convention.
    """
    x0 = env.reset(rng)
    X = np.tile(np.atleast_2d(x0), (episodes, 1))
    gains = np.zeros(episodes)
    alive = np.ones(episodes, dtype=bool)
    gamma = env.discount
    t = 0.0
    while alive.any() and t < env.horizon - TIME_TOL:
        idx = np.flatnonzero(alive)
        acts = action_fn(t, X[idx])
        xn, rew, done = env.step_batch(t, X[idx], acts, h, rng)
        gains[idx] += gamma**t * rew * h
        t_end = min(t + h, env.horizon)
        if np.any(done):
            done_idx = idx[done]
            gains[done_idx] += gamma**t_end * np.asarray(
                env.terminal_reward(xn[done]), dtype=np.float64
            )
            alive[done_idx] = False
        X[idx] = xn
        t += h
    returns = EmpiricalDist(gains)
    rep = to_quantile_rep(returns, min(episodes, 512))
    cvar = risk_measure(DistortionMeasure.cvar(cvar_alpha), rep)
    return float(np.mean(gains)), float(cvar), gains


def evaluate(agent, env, episodes: int, rng, cvar_alpha=0.25):
    mean_ret, cvar_ret, _ = evaluate_policy(
        env, agent.act_greedy_batch, episodes, rng, agent.h, cvar_alpha
    )
    return mean_ret, cvar_ret


def train(agent, env, total_updates: int, cfg: TrainConfig = TrainConfig()):
    """Interleaved interaction and learning, one gradient step per
    floor(1/h) env interactions; returns the evaluation log rows.

    Raises TrainingDiverged (with the partial log attached) on a non-finite
    loss.
    """
    log = []
    if total_updates <= 0:
        return log
    rng = substream(cfg.seed, 21)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    h = agent.h
    interactions_per_update = max(1, int(math.floor(1.0 / h + 1e-9)))
    env_steps = 0
    updates = 0
    last_loss = float("nan")
    fresh = True
    t_cur = 0.0
    x_cur = None
    for u in range(total_updates):
        for _ in range(interactions_per_update):
            if fresh:
                x_cur = env.reset(rng)
                t_cur = 0.0
                fresh = False
            a = explore_action(agent, t_cur, x_cur, rng, env_steps)
            x_next, r, done = _env_step_single(env, t_cur, x_cur, a, h, rng)
            tr = Transition(t_cur, np.array(x_cur), a, r, np.array(x_next), done)
            store_subsampled(buffer, tr, min(1.0, h), rng)
            env_steps += 1
            t_cur += h
            x_cur = x_next
            fresh = done
        if len(buffer) >= cfg.batch_size:
            batch = buffer.sample(cfg.batch_size, rng)
            last_loss = agent.train_step(batch)
            if not math.isfinite(last_loss):
                raise TrainingDiverged(f"non-finite loss at update {updates}", log)
            updates += 1
            if cfg.target_period and updates % cfg.target_period == 0:
                agent.sync_target()
        if cfg.eval_every and (u + 1) % cfg.eval_every == 0:
            ev_rng = substream(cfg.seed, 22, u)
            mean_ret, cvar_ret = evaluate(
                agent, env, cfg.eval_episodes, ev_rng, cfg.eval_cvar_alpha
            )
            log.append(
                TrainRow(
                    wall_step=u + 1,
                    env_time=env_steps * h,
                    loss=last_loss,
                    eval_mean_return=mean_ret,
                    eval_cvar_return=cvar_ret,
                    epsilon=agent.schedule.epsilon(env_steps),
                )
            )
    return log
