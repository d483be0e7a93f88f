"""Fixture environments and market-data ingestion.

Two analytic-oracle MDPs (a Brownian gap construction and a drift-10
illustration), an option-trading environment driven by geometric Brownian
motion, GBM maximum-likelihood estimation, and a small price-CSV format.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .ctmdp import TIME_TOL, ContinuousMdp, SimConfig, _em_apply

__all__ = [
    "GbmParams",
    "brownian_gap_env",
    "illustration_env",
    "brownian_gap_w1_oracle",
    "OptionTradingEnv",
    "MdpEpisodicEnv",
    "option_step",
    "estimate_gbm",
    "load_price_csv",
    "save_price_csv",
]


@dataclass(frozen=True)
class GbmParams:
    """Geometric Brownian motion drift (1/time) and volatility (1/sqrt(time))."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"volatility must be nonnegative, got {self.sigma}")


def brownian_gap_env(horizon: float = 1.0, discount: float = 1.0) -> ContinuousMdp:
    """Two actions on the line: action 1 turns on unit Brownian noise, action 0
    freezes the state; the reward is the state itself, no terminal reward.

    Under the always-0 policy from (t, x) the return is deterministic:
    x * (T - t) at discount 1, else x * (gamma**(T-t) - 1) / ln(gamma).
    """
    return ContinuousMdp(
        state_dim=1,
        actions=(0, 1),
        drift=lambda t, X, a: 0.0,
        diffusion=lambda t, X, a: 1.0 if a == 1 else 0.0,
        reward=lambda t, X: X[:, 0],
        terminal_reward=lambda X: np.zeros(X.shape[0]),
        horizon=horizon,
        discount=discount,
    )


def brownian_gap_w1_oracle(h: float, horizon: float = 1.0) -> float:
    """Closed-form W1 action gap of brownian_gap_env at (t, x) = (0, 0), gamma=1.

    The action-return difference is Gaussian with variance
    h^3/3 + (T-h)^2 h + (T-h) h^2 (integrated-Brownian, endpoint, and cross
    terms of the shared Brownian path), and W1 against the deterministic
    alternative is sigma * sqrt(2/pi).
    """
    var = h**3 / 3.0 + (horizon - h) ** 2 * h + (horizon - h) * h**2
    return math.sqrt(var) * math.sqrt(2.0 / math.pi)


def illustration_env(
    horizon: float = 10.0,
    discount: float = 1.0,
    drift: float = 10.0,
    move_diffusion: float = 1.0,
) -> ContinuousMdp:
    """Action 1 drifts at a constant rate with unit-by-default noise, action 0
    freezes the state; reward is the signed distance to zero."""
    return ContinuousMdp(
        state_dim=1,
        actions=(0, 1),
        drift=lambda t, X, a: drift if a == 1 else 0.0,
        diffusion=lambda t, X, a: move_diffusion if a == 1 else 0.0,
        reward=lambda t, X: X[:, 0],
        terminal_reward=lambda X: np.zeros(X.shape[0]),
        horizon=horizon,
        discount=discount,
    )


@dataclass(frozen=True)
class OptionTradingEnv:
    """Price process under GBM; action 0 holds, action 1 executes.

    Executing (or reaching the horizon) ends the episode and pays
    max(0, 1 - price) through the terminal-reward channel; running reward is
    identically zero. Prices step by the exact GBM solution so positivity is
    guaranteed; an Euler mode exists behind a flag.
    """

    gbm: GbmParams
    horizon: float = 100.0
    start_price: float = 1.0
    discount: float = 0.999
    euler: bool = False

    n_actions = 2
    state_dim = 1

    def reset(self, rng=None) -> np.ndarray:
        return np.array([self.start_price])

    def running_reward(self, t, X) -> np.ndarray:
        return np.zeros(np.shape(X)[0])

    def terminal_reward(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.maximum(0.0, 1.0 - X[:, 0])

    def _evolve(self, prices, delta, rng):
        mu, sig = self.gbm.mu, self.gbm.sigma
        noise = rng.standard_normal(prices.shape)
        if self.euler:
            return prices * (1.0 + mu * delta + sig * math.sqrt(delta) * noise)
        return prices * np.exp(
            (mu - 0.5 * sig**2) * delta + sig * math.sqrt(delta) * noise
        )

    def step_batch(self, t, X, actions, h, rng):
        """Advance a bundle of episodes one decision step.

        Returns (next states, running rewards, done flags); the terminal
        payoff is read through terminal_reward on the returned state.
        """
        if t >= self.horizon - TIME_TOL:
            raise ValueError(f"step at t={t} is past the horizon {self.horizon}")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if np.any(X[:, 0] <= 0):
            raise ValueError("prices must stay positive")
        actions = np.asarray(actions)
        out = X.copy()
        done = np.zeros(X.shape[0], dtype=bool)
        execute = actions == 1
        done[execute] = True
        hold = ~execute
        if np.any(hold):
            delta = min(h, self.horizon - t)
            out[hold, 0] = self._evolve(X[hold, 0], delta, rng)
        if t + h >= self.horizon - TIME_TOL:
            done[:] = True
        return out, np.zeros(X.shape[0]), done


def option_step(env: OptionTradingEnv, x: float, t: float, a: int, h: float, rng):
    """Single-episode step: (price', running reward, done)."""
    if x <= 0:
        raise ValueError(f"price must be positive, got {x}")
    X, rew, done = env.step_batch(t, np.array([[x]]), np.array([a]), h, rng)
    return float(X[0, 0]), float(rew[0]), bool(done[0])


class MdpEpisodicEnv:
    """Decision-resolution wrapper around a ContinuousMdp.

    Each decision applies one action for h time units, integrated with EM
    substeps; the running reward reported for the step is the left-endpoint
    rate r(t, x).
    """

    def __init__(self, mdp: ContinuousMdp, x0, cfg: SimConfig | None = None):
        self.mdp = mdp
        self.x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
        self.cfg = cfg if cfg is not None else SimConfig()
        self.horizon = mdp.horizon
        self.discount = mdp.discount
        self.n_actions = mdp.n_actions
        self.state_dim = mdp.state_dim

    def reset(self, rng=None) -> np.ndarray:
        return self.x0.copy()

    def running_reward(self, t, X) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.mdp.reward(t, np.atleast_2d(X)), dtype=np.float64),
            (np.atleast_2d(X).shape[0],),
        ).copy()

    def terminal_reward(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.broadcast_to(
            np.asarray(self.mdp.terminal_reward(X), dtype=np.float64), (X.shape[0],)
        ).copy()

    def step_batch(self, t, X, actions, h, rng):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        actions = np.asarray(actions, dtype=np.intp)
        delta_total = min(h, self.horizon - t)
        dt = self.cfg.resolve_dt(h)
        k = max(1, int(round(delta_total / dt)))
        sub = delta_total / k
        rew = self.running_reward(t, X)
        cur = X
        for j in range(k):
            noise = rng.standard_normal(cur.shape)
            cur = _em_apply(self.mdp, t + j * sub, cur, actions, sub, noise)
        done = np.full(X.shape[0], t + h >= self.horizon - TIME_TOL)
        return cur, rew, done


def estimate_gbm(prices, dt: float) -> GbmParams:
    """Maximum-likelihood GBM parameters from a uniformly spaced price series.

    With log increments l_i: sigma^2 = mean((l - lbar)^2)/dt and
    mu = lbar/dt + sigma^2/2.
    """
    prices = np.asarray(prices, dtype=np.float64).reshape(-1)
    if prices.size < 3:
        raise ValueError(f"need at least 3 prices, got {prices.size}")
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    log_inc = np.diff(np.log(prices))
    lbar = float(np.mean(log_inc))
    sigma_sq = float(np.mean((log_inc - lbar) ** 2)) / dt
    mu = lbar / dt + 0.5 * sigma_sq
    return GbmParams(mu=mu, sigma=math.sqrt(sigma_sq))


def load_price_csv(path):
    """Read a `step,price` CSV; returns (steps, prices) arrays.

    Malformed or nonpositive rows are rejected with their line number.
    """
    steps, prices = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["step", "price"]:
            raise ValueError(f"{path}: expected header 'step,price'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected two columns")
            try:
                step = int(row[0])
                price = float(row[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: unparseable row {row!r}") from exc
            if price <= 0:
                raise ValueError(f"{path}:{lineno}: nonpositive price {price}")
            steps.append(step)
            prices.append(price)
    if not prices:
        raise ValueError(f"{path}: no data rows")
    return np.array(steps), np.array(prices)


def save_price_csv(path, prices, steps=None):
    prices = np.asarray(prices, dtype=np.float64).reshape(-1)
    if steps is None:
        steps = np.arange(prices.size)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "price"])
        for s, p in zip(steps, prices):
            writer.writerow([int(s), f"{p:.17g}"])
