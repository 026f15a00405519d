"""System reward functions.

Each reward exposes the instantaneous form ``V(S, t)`` on a (collision-masked)
outcome vector and the expected form ``v(lam)``: the expected reward when the
M outcomes are independent Bernoulli with means ``lam``.  For laws other than
Bernoulli, ``expected_reward`` enumerates the joint support exactly.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .sim import Distribution

ENUMERATION_GUARD = 1 << 20

# kernel kinds understood by the compiled oracles (see _kernels.py)
AFFINE, PRODUCT, MINIMUM, TOPL = 0, 1, 2, 3


class UnsupportedCapability(TypeError):
    pass


class UnsupportedExpectation(ValueError):
    pass


def _per_player(x, M, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        return np.full(M, float(a))
    if a.shape != (M,):
        raise ValueError(f"{name} has {a.size} entries, expected {M}")
    return a


class RewardFunction:
    name = "abstract"
    has_instantaneous = True
    # v stays monotone when fed values outside [0, 1] (UCB indices)
    monotone_extension = True

    def instantaneous(self, outcomes):
        raise NotImplementedError

    def v(self, lam):
        raise NotImplementedError

    def lipschitz_B(self, M: int):
        return None

    def kernel_spec(self, M: int):
        """(kind, a, b, L) for the compiled oracles, or None."""
        return None

    def params(self) -> dict:
        return {}

    def config(self) -> dict:
        return {"name": self.name, **self.params()}

    def __repr__(self):
        p = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({p})"


class Linear(RewardFunction):
    name = "linear"

    def instantaneous(self, outcomes):
        return np.sum(outcomes, axis=-1)

    def v(self, lam):
        return np.sum(lam, axis=-1)

    def lipschitz_B(self, M):
        return float(M)

    def kernel_spec(self, M):
        return AFFINE, np.zeros(M), np.ones(M), 0


class ProportionalFairness(RewardFunction):
    name = "proportional_fairness"

    def __init__(self, epsilon=0.01, weights=1.0):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        self.epsilon = float(epsilon)
        self.weights = w

    def _w(self, M):
        return _per_player(self.weights, M, "weights")

    def instantaneous(self, outcomes):
        o = np.asarray(outcomes, dtype=float)
        return np.sum(self._w(o.shape[-1]) * np.log(self.epsilon + o), axis=-1)

    def _coef(self, M):
        w = self._w(M)
        lo, hi = math.log(self.epsilon), math.log(1.0 + self.epsilon)
        return w * lo, w * (hi - lo)

    def v(self, lam):
        lam = np.asarray(lam, dtype=float)
        a, b = self._coef(lam.shape[-1])
        return np.sum(a + b * lam, axis=-1)

    def lipschitz_B(self, M):
        return float(np.sum(self._coef(M)[1]))

    def kernel_spec(self, M):
        a, b = self._coef(M)
        return AFFINE, a, b, 0

    def params(self):
        w = self.weights.tolist()
        return {"epsilon": self.epsilon, "weights": w}


class Minimal(RewardFunction):
    name = "minimal"

    def instantaneous(self, outcomes):
        return np.min(outcomes, axis=-1)

    def v(self, lam):
        # min of independent Bernoulli outcomes is 1 iff all are 1
        return np.prod(lam, axis=-1)

    def lipschitz_B(self, M):
        return float(M)

    def kernel_spec(self, M):
        return PRODUCT, np.zeros(M), np.zeros(M), 0


class Threshold(RewardFunction):
    name = "threshold"

    def __init__(self, thresholds):
        phi = np.asarray(thresholds, dtype=float)
        if np.any(phi <= 0) or np.any(phi > 1):
            raise ValueError("thresholds must lie in (0, 1]")
        self.thresholds = phi

    def instantaneous(self, outcomes):
        o = np.asarray(outcomes, dtype=float)
        phi = _per_player(self.thresholds, o.shape[-1], "thresholds")
        return np.sum(o >= phi, axis=-1).astype(float)

    def v(self, lam):
        # P(X >= phi) = P(X = 1) for a Bernoulli X and phi in (0, 1]
        return np.sum(lam, axis=-1)

    def kernel_spec(self, M):
        return AFFINE, np.zeros(M), np.ones(M), 0

    def params(self):
        return {"thresholds": self.thresholds.tolist()}


class PiecewiseLinear:
    """Concave non-decreasing piecewise-linear map of [0, 1]."""

    def __init__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.shape != y.shape or x.size < 2:
            raise ValueError("breakpoints need matching x and y lists of length >= 2")
        if x[0] != 0.0 or x[-1] != 1.0 or np.any(np.diff(x) <= 0):
            raise ValueError("breakpoint x must increase strictly from 0 to 1")
        slopes = np.diff(y) / np.diff(x)
        if np.any(np.diff(slopes) > 1e-12):
            raise ValueError("slopes must be non-increasing (concave curve)")
        if np.any(slopes < 0):
            raise ValueError("slopes must be non-negative (monotone curve)")
        self.x, self.y, self.slopes = x, y, slopes

    def __call__(self, o):
        return np.interp(o, self.x, self.y)


class VideoQuality(RewardFunction):
    name = "video_quality"

    def __init__(self, curves):
        if isinstance(curves, PiecewiseLinear):
            curves = [curves]
        self.curves = [c if isinstance(c, PiecewiseLinear) else PiecewiseLinear(*c) for c in curves]

    def _curves(self, M):
        if len(self.curves) == 1:
            return self.curves * M
        if len(self.curves) != M:
            raise ValueError(f"{len(self.curves)} curves for {M} players")
        return self.curves

    def instantaneous(self, outcomes):
        o = np.asarray(outcomes, dtype=float)
        cs = self._curves(o.shape[-1])
        return sum(c(o[..., m]) for m, c in enumerate(cs))

    def _coef(self, M):
        cs = self._curves(M)
        a = np.array([c.y[0] for c in cs])
        return a, np.array([c.y[-1] for c in cs]) - a

    def v(self, lam):
        lam = np.asarray(lam, dtype=float)
        a, b = self._coef(lam.shape[-1])
        return np.sum(a + b * lam, axis=-1)

    def lipschitz_B(self, M):
        return float(np.sum(self._coef(M)[1]))

    def kernel_spec(self, M):
        a, b = self._coef(M)
        return AFFINE, a, b, 0

    def params(self):
        return {"curves": [{"x": c.x.tolist(), "y": c.y.tolist()} for c in self.curves]}


class TopL(RewardFunction):
    name = "top_L"
    # the Bernoulli polynomial is not monotone outside [0, 1]^M
    monotone_extension = False

    def __init__(self, L: int):
        if int(L) < 1:
            raise ValueError("L must be >= 1")
        self.L = int(L)

    def instantaneous(self, outcomes):
        o = np.asarray(outcomes, dtype=float)
        if self.L > o.shape[-1]:
            raise ValueError("L exceeds the number of players")
        return np.sum(np.sort(o, axis=-1)[..., o.shape[-1] - self.L:], axis=-1)

    def v(self, lam):
        # E[min(L, N)] with N ~ Poisson-binomial(lam)
        lam = np.asarray(lam, dtype=float)
        M = lam.shape[-1]
        if self.L > M:
            raise ValueError("L exceeds the number of players")
        dist = np.zeros(lam.shape[:-1] + (M + 1,))
        dist[..., 0] = 1.0
        for m in range(M):
            p = lam[..., m:m + 1]
            shifted = np.zeros_like(dist)
            shifted[..., 1:] = dist[..., :-1]
            dist = dist * (1 - p) + shifted * p
        return dist @ np.minimum(np.arange(M + 1), self.L)

    def lipschitz_B(self, M):
        return float(M)

    def kernel_spec(self, M):
        return TOPL, np.zeros(M), np.zeros(M), self.L

    def params(self):
        return {"L": self.L}


class MaxMin(RewardFunction):
    """min of the expected outcomes; there is no per-step random form."""
    name = "max_min"
    has_instantaneous = False

    def instantaneous(self, outcomes):
        raise UnsupportedCapability("max_min reward is defined on expectations only")

    def v(self, lam):
        return np.min(lam, axis=-1)

    def lipschitz_B(self, M):
        return 1.0

    def kernel_spec(self, M):
        return MINIMUM, np.zeros(M), np.zeros(M), 0


class CustomReward(RewardFunction):
    """Wrap user callables; used for tests and experiments outside the built-ins."""

    def __init__(self, name, v, instantaneous=None, monotone_extension=False):
        self.name = name
        self._v = v
        self._inst = instantaneous
        self.has_instantaneous = instantaneous is not None
        self.monotone_extension = monotone_extension

    def instantaneous(self, outcomes):
        if self._inst is None:
            raise UnsupportedCapability(f"{self.name} has no instantaneous form")
        return self._inst(np.asarray(outcomes, dtype=float))

    def v(self, lam):
        return self._v(np.asarray(lam, dtype=float))


REWARDS = {cls.name: cls for cls in (Linear, ProportionalFairness, Minimal, Threshold,
                                     VideoQuality, TopL, MaxMin)}


def make_reward(cfg) -> RewardFunction:
    """Build a reward from a config block such as ``{"name": "top_L", "L": 2}``."""
    if isinstance(cfg, RewardFunction):
        return cfg
    if isinstance(cfg, str):
        cfg = {"name": cfg}
    cfg = dict(cfg)
    name = cfg.pop("name", None)
    if name not in REWARDS:
        raise ValueError(f"unknown reward {name!r}; choose from {sorted(REWARDS)}")
    if name == "proportional_fairness":
        r = ProportionalFairness(epsilon=cfg.pop("epsilon", 0.01), weights=cfg.pop("weights", 1.0))
    elif name == "threshold":
        r = Threshold(cfg.pop("thresholds"))
    elif name == "video_quality":
        curves = cfg.pop("curves")
        if isinstance(curves, dict):
            curves = [curves]
        r = VideoQuality([PiecewiseLinear(c["x"], c["y"]) for c in curves])
    elif name == "top_L":
        r = TopL(cfg.pop("L"))
    else:
        r = REWARDS[name]()
    if cfg:
        raise ValueError(f"unexpected parameters for {name}: {sorted(cfg)}")
    return r


def instantaneous(reward: RewardFunction, outcomes):
    return reward.instantaneous(outcomes)


def _masked_laws(mu_S, eta_S, dists):
    laws = []
    for m in range(len(mu_S)):
        if not eta_S[m]:
            laws.append(Distribution.point(0.0))
        elif dists is None:
            laws.append(Distribution.bernoulli(mu_S[m]))
        else:
            laws.append(dists[m])
    return laws


def enumerate_expectation(reward: RewardFunction, laws) -> float:
    """Exact E[V] by summing over the joint support of independent laws."""
    sizes = [d.support.size for d in laws]
    if math.prod(sizes) > ENUMERATION_GUARD:
        raise UnsupportedExpectation(f"joint support of size {math.prod(sizes)} exceeds guard")
    grids = np.array(list(itertools.product(*[d.support for d in laws])))
    weights = np.prod(np.array(list(itertools.product(*[d.probs for d in laws]))), axis=1)
    return float(weights @ reward.instantaneous(grids))


def expected_reward(reward: RewardFunction, mu_S, eta_S, dists=None) -> float:
    """E[V(S, t)] for a matching with per-player means, no-collision mask and laws."""
    mu_S = np.asarray(mu_S, dtype=float)
    eta_S = np.asarray(eta_S, dtype=bool)
    if mu_S.shape != eta_S.shape or (dists is not None and len(dists) != mu_S.size):
        raise ValueError("inconsistent input lengths")
    lam = mu_S * eta_S
    if isinstance(reward, (Linear, MaxMin)):
        return float(reward.v(lam))
    if dists is None or all(d.is_bernoulli for d, e in zip(dists, eta_S) if e):
        if not isinstance(reward, CustomReward):
            # the Bernoulli polynomial equals the enumerated expectation
            return float(reward.v(lam))
    if not reward.has_instantaneous:
        raise UnsupportedExpectation(f"{reward.name} has no instantaneous form to enumerate")
    return enumerate_expectation(reward, _masked_laws(mu_S, eta_S, dists))


def expected_reward_mc(reward: RewardFunction, mu_S, eta_S, dists=None, n=100_000, seed=0):
    """Monte Carlo estimate of E[V(S, t)]; returns ``(mean, standard_error)``."""
    if not reward.has_instantaneous:
        v = float(reward.v(np.asarray(mu_S, dtype=float) * np.asarray(eta_S, dtype=bool)))
        return v, 0.0
    rng = np.random.default_rng(seed)
    laws = _masked_laws(np.asarray(mu_S, dtype=float), np.asarray(eta_S, dtype=bool), dists)
    O = np.empty((n, len(laws)))
    for m, d in enumerate(laws):
        O[:, m] = d.support[np.searchsorted(d.cdf(), rng.random(n), side="right")]
    vals = reward.instantaneous(O)
    if np.ptp(vals) == 0:   # constant reward, e.g. every entry collided
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))


def matching_value(instance, reward: RewardFunction, arms) -> float:
    """Expected system reward of the joint action ``arms`` on ``instance``."""
    from .sim import collision_mask
    arms = np.asarray(arms)
    M = arms.size
    eta = collision_mask(arms)
    mu_S = instance.mu[arms, np.arange(M)]
    dists = None if instance.all_bernoulli else [instance.dists[arms[m]][m] for m in range(M)]
    return expected_reward(reward, mu_S, eta, dists)


def check_monotone(reward: RewardFunction, trials: int = 1000, seed: int = 0, M: int = 3) -> dict:
    """Sample pairs lam <= lam' in [0, 1]^M and look for v(lam) > v(lam')."""
    rng = np.random.default_rng(seed)
    for i in range(trials):
        lo = rng.random(M)
        hi = lo + rng.random(M) * (1 - lo)
        a, b = float(reward.v(lo)), float(reward.v(hi))
        if a > b + 1e-12:
            return {"passed": False, "trials": i + 1,
                    "counterexample": {"lam": lo.tolist(), "lam_prime": hi.tolist(),
                                       "v_lam": a, "v_lam_prime": b}}
    return {"passed": True, "trials": trials, "counterexample": None}
