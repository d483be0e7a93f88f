"""One-dimensional distribution machinery on quantile representations.

A QuantileRep with values ``v_1..v_m`` encodes the distribution whose
tau_i = (i - 1/2)/m quantile is ``v_i``; equivalently the uniform mixture of
point masses at the (sorted) values. Values may be stored unsorted because
learned quantile heads are positional; every metric and statistic here
canonicalizes (sorts) internally before interpreting values as quantiles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kernels

__all__ = [
    "QuantileRep",
    "EmpiricalDist",
    "DistortionMeasure",
    "Cdr",
    "canonicalize",
    "quantile_function",
    "wasserstein",
    "wasserstein_bruteforce",
    "risk_measure",
    "superiority",
    "independent_cdr",
    "rescale",
    "advantage_shift",
    "mean",
    "variance",
    "to_quantile_rep",
]

_SUPPORTED_P = (1, 2)


def _frozen_vector(raw, name):
    arr = np.array(raw, dtype=np.float64).reshape(-1)
    if arr.size < 1:
        raise ValueError(f"{name} needs at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class QuantileRep:
    """Fixed-size m-quantile representation of a distribution on the reals."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_vector(self.values, "values"))

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def levels(self) -> np.ndarray:
        return (np.arange(self.m) + 0.5) / self.m


@dataclass(frozen=True, eq=False)
class EmpiricalDist:
    """A bag of Monte-Carlo samples, convertible to a QuantileRep."""

    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen_vector(self.samples, "samples"))

    @property
    def n(self) -> int:
        return self.samples.size


@dataclass(frozen=True, eq=False)
class Cdr:
    """Samples from a coupled difference representation of two distributions."""

    samples: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "samples", _frozen_vector(self.samples, "samples"))


@dataclass(frozen=True, eq=False)
class DistortionMeasure:
    """Distortion risk measure: a weighting of quantile levels.

    ``expected_value`` weights all levels equally, ``cvar(alpha)`` spreads
    U(0, alpha) over the level buckets by exact integration (so the weights
    are continuous in alpha), and ``discrete`` pins user weights to the m
    levels of the rep it is applied to.
    """

    kind: str
    alpha: float = 1.0
    weights: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.kind not in ("expected_value", "cvar", "discrete"):
            raise ValueError(f"unknown distortion measure kind {self.kind!r}")
        if self.kind == "cvar" and not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"cvar alpha must be in (0, 1], got {self.alpha}")
        if self.kind == "discrete":
            w = _frozen_vector(self.weights, "weights")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            total = float(w.sum())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights must sum to 1, got {total}")
            w = w / total
            w.flags.writeable = False
            object.__setattr__(self, "weights", w)

    @classmethod
    def expected_value(cls):
        return cls(kind="expected_value")

    @classmethod
    def cvar(cls, alpha: float):
        return cls(kind="cvar", alpha=float(alpha))

    @classmethod
    def discrete(cls, weights):
        return cls(kind="discrete", weights=np.asarray(weights, dtype=np.float64))

    def level_weights(self, m: int) -> np.ndarray:
        """Weights over the m quantile levels (i - 1/2)/m; they sum to 1."""
        if self.kind == "expected_value":
            return np.full(m, 1.0 / m)
        if self.kind == "cvar":
            grid = np.arange(m + 1) / m
            mass = np.minimum(self.alpha, grid[1:]) - np.minimum(self.alpha, grid[:-1])
            return mass / self.alpha
        if self.weights.size != m:
            raise ValueError(
                f"discrete weights have size {self.weights.size}, rep has m={m}"
            )
        return np.asarray(self.weights)


def canonicalize(rep: QuantileRep) -> QuantileRep:
    """Sorted copy of the representation; identity on already-sorted values."""
    return QuantileRep(np.sort(rep.values))


def quantile_function(rep: QuantileRep, tau: float) -> float:
    """Step-function inverse CDF: values[i] for tau in ((i-1)/m, i/m]."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    vals = np.sort(rep.values)
    idx = int(math.ceil(tau * rep.m))
    idx = min(max(idx, 1), rep.m)
    return float(vals[idx - 1])


def _check_p(p):
    if p not in _SUPPORTED_P:
        raise ValueError(f"p must be one of {_SUPPORTED_P}, got {p}")


def wasserstein(p: int, a: QuantileRep, b: QuantileRep) -> float:
    """Exact W_p between the two uniform atom mixtures.

    Representations of unequal size are re-quantized to their lcm, which
    reproduces each atom exactly.
    """
    _check_p(p)
    va = np.sort(a.values)
    vb = np.sort(b.values)
    if a.m != b.m:
        common = math.lcm(a.m, b.m)
        va = np.repeat(va, common // a.m)
        vb = np.repeat(vb, common // b.m)
    return kernels.wasserstein_sorted(va, vb, p)


def wasserstein_bruteforce(
    p: int, a: EmpiricalDist, b: EmpiricalDist, method: str = "auto"
) -> float:
    """Independent transport oracle on equal-size samples.

    ``exhaustive`` enumerates all assignments (size capped at 8);
    ``sorted`` uses the monotone matching. Both realize the coupling
    infimum as a min-cost matching.
    """
    _check_p(p)
    if a.n != b.n:
        raise ValueError(f"sample sizes differ: {a.n} vs {b.n}")
    if method == "auto":
        method = "exhaustive" if a.n <= 8 else "sorted"
    if method == "exhaustive":
        if a.n > 8:
            raise ValueError("exhaustive mode supports at most 8 samples")
        perms = np.array(list(itertools.permutations(range(b.n))))
        costs = np.abs(a.samples[None, :] - b.samples[perms]) ** p
        best = float(costs.mean(axis=1).min())
        return best ** (1.0 / p)
    if method == "sorted":
        sa = np.sort(a.samples)
        sb = np.sort(b.samples)
        return float(np.mean(np.abs(sa - sb) ** p) ** (1.0 / p))
    raise ValueError(f"unknown method {method!r}")


def risk_measure(measure: DistortionMeasure, rep: QuantileRep) -> float:
    """Weighted sum of the canonical quantile values under the measure."""
    w = measure.level_weights(rep.m)
    return float(np.dot(w, np.sort(rep.values)))


def superiority(zeta: QuantileRep, eta: QuantileRep) -> QuantileRep:
    """Comonotone-coupling difference of two return representations.

    The elementwise difference of the sorted values is the quantile-level
    pairing, so the output is already the correct pushforward sample set and
    is deliberately not re-sorted.
    """
    if zeta.m != eta.m:
        raise ValueError(f"rep sizes differ: {zeta.m} vs {eta.m}")
    return QuantileRep(np.sort(zeta.values) - np.sort(eta.values))


def independent_cdr(
    mu: EmpiricalDist, nu: EmpiricalDist, rng: np.random.Generator, n_samples=None
) -> Cdr:
    """Samples of Z - W with Z, W drawn independently (product coupling)."""
    n = int(n_samples) if n_samples is not None else max(mu.n, nu.n)
    z = rng.choice(mu.samples, size=n, replace=True)
    w = rng.choice(nu.samples, size=n, replace=True)
    return Cdr(z - w)


def rescale(psi: QuantileRep, h: float, q: float) -> QuantileRep:
    """Multiply every outcome by h**(-q)."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    return QuantileRep(psi.values * h ** (-q))


def advantage_shift(psi_q: QuantileRep, advantage: float, h: float, q: float) -> QuantileRep:
    """Shift every outcome by (1 - h**(1-q)) * advantage."""
    return QuantileRep(psi_q.values + (1.0 - h ** (1.0 - q)) * advantage)


def _values_of(obj):
    if isinstance(obj, QuantileRep):
        return obj.values
    if isinstance(obj, (EmpiricalDist, Cdr)):
        return obj.samples
    raise TypeError(f"expected QuantileRep, EmpiricalDist or Cdr, got {type(obj)}")


def mean(obj) -> float:
    return float(np.mean(_values_of(obj)))


def variance(obj) -> float:
    """Population variance for reps (the atoms are the distribution),
    sample variance for empirical collections."""
    vals = _values_of(obj)
    if isinstance(obj, QuantileRep):
        return float(np.var(vals))
    if vals.size < 2:
        return 0.0
    return float(np.var(vals, ddof=1))


def to_quantile_rep(dist: EmpiricalDist, m: int) -> QuantileRep:
    """Empirical quantiles at midpoint levels (i - 1/2)/m, interpolated
    linearly between order statistics. At m = n this recovers the sorted
    samples exactly."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    levels = (np.arange(m) + 0.5) / m
    return QuantileRep(np.quantile(dist.samples, levels, method="hazen"))
