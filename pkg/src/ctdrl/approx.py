"""Minimal function-approximation stack.

Fixed rectifier MLPs with module-local reverse-mode gradients, a bias-corrected
Adam optimizer, the quantile Huber loss, and a versioned checkpoint format.
No general autodiff: two fixed architectures do not justify a tape system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as kernels
from .dist import QuantileRep

CHECKPOINT_VERSION = "ctdrl-checkpoint-1"


@dataclass
class LossReport:
    loss: float
    grad_pred: np.ndarray
    param_grads: list | None = None


class Mlp:
    """Affine layers with rectifier hidden activations and identity output.

    Parameters are kept as alternating [W0, b0, W1, b1, ...]; each W has
    shape (fan_in, fan_out).
    """

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching nonempty weight/bias lists")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("weight/bias shape mismatch")

    @classmethod
    def from_sizes(cls, sizes, rng: np.random.Generator):
        """Glorot-uniform weights, zero biases; the rng fully determines them."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        weights = [np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(o) for o in sizes[1:]]
        return cls(weights, biases)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameter_count(self) -> int:
        return sum((w.shape[0] + 1) * w.shape[1] for w in self.weights)

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params):
        for i in range(len(self.weights)):
            self.weights[i] = np.asarray(params[2 * i], dtype=np.float64)
            self.biases[i] = np.asarray(params[2 * i + 1], dtype=np.float64)

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def _promote(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input dim {x.shape[1]}, network expects {self.in_dim}")
        return x, single

    def forward(self, x) -> np.ndarray:
        out, _ = self.forward_cached(x)
        return out

    def forward_cached(self, x):
        """Forward pass keeping per-layer activations for backward()."""
        x, single = self._promote(x)
        acts = [x]
        cur = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cur = cur @ w + b
            if i < last:
                cur = np.maximum(cur, 0.0)
            acts.append(cur)
        out = cur[0] if single else cur
        return out, (acts, single)

    def backward(self, cache, grad_out):
        """Reverse accumulation: gradients per parameter plus d/d(input)."""
        acts, single = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        param_grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            param_grads[2 * i] = acts[i].T @ g
            param_grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        grad_in = g[0] if single else g
        return param_grads, grad_in


class AdamState:
    """First/second moment accumulators with bias correction."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]


def adam_step(state: AdamState, params, grads):
    """One Adam update; mutates params and state in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("param/grad/state lengths differ")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ValueError("param/grad shape mismatch")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def _atoms(x):
    return x.values if isinstance(x, QuantileRep) else np.asarray(x, dtype=np.float64)


def quantile_huber(pred, target, kappa: float = 1.0) -> LossReport:
    """Quantile Huber loss between a prediction rep and a target rep.

    loss = (1/(m * m' * kappa)) sum_ij |tau_i - 1{u_ij < 0}| * L_kappa(u_ij)
    with u_ij = target_j - pred_i and tau_i = (i - 1/2)/m. The gradient is
    with respect to the prediction atoms (positional, no sorting).
    """
    p = _atoms(pred)
    t = _atoms(target)
    loss, grad = kernels.quantile_huber_batch(p[None, :], t[None, :], kappa)
    return LossReport(loss=float(loss), grad_pred=grad[0])


def save_checkpoint(path, named_arrays: dict):
    """Write named parameter tensors with a version header entry."""
    for name in named_arrays:
        if name.startswith("__"):
            raise ValueError(f"reserved name {name!r}")
    np.savez(path, __version__=np.array(CHECKPOINT_VERSION), **named_arrays)


def load_checkpoint(path) -> dict:
    with np.load(path) as data:
        version = str(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version!r}")
        return {k: data[k] for k in data.files if k != "__version__"}
