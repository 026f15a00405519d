"""Matching oracles and gap statistics.

All solvers return injective matchings as 0-indexed arm vectors.  Ties are
resolved towards the lexicographically smallest arm vector; two values count
as tied when they differ by less than ``1e-12 * (1 + |V|)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .rewards import Linear, RewardFunction
from .sim import STREAM_ORACLE, UtilityMatrix

ENUMERATION_GUARD = 10**7


class OracleSizeError(ValueError):
    pass


def n_injective(K: int, M: int) -> int:
    return math.perm(K, M)


def _check_shape(values):
    values = np.ascontiguousarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("values must be a K x M matrix")
    K, M = values.shape
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got K={K}, M={M}")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    return values


def _guard(K, M, guard):
    n = n_injective(K, M)
    if n > guard:
        raise OracleSizeError(f"{n} injective matchings for K={K}, M={M} exceed the guard of {guard}")


@lru_cache(maxsize=16)
def injective_matchings(K: int, M: int) -> np.ndarray:
    """All injective arm vectors in lexicographic order, shape (K!/(K-M)!, M)."""
    _guard(K, M, ENUMERATION_GUARD)
    dt = np.int8 if K < 128 else np.int16
    out = np.fromiter(itertools.chain.from_iterable(itertools.permutations(range(K), M)),
                      dtype=dt, count=n_injective(K, M) * M).reshape(-1, M)
    out.setflags(write=False)
    return out


def matching_values(values, reward: RewardFunction, perms=None) -> np.ndarray:
    """v(values_S) for every row of ``perms`` (collision-free, eta all ones)."""
    values = np.asarray(values, dtype=float)
    K, M = values.shape
    if perms is None:
        perms = injective_matchings(K, M)
    gathered = values[perms, np.arange(M)]
    spec = reward.kernel_spec(M)
    if spec is not None:
        kind, a, b, L = spec
        return _kernels.v_rows(kind, a, b, L, gathered)
    return np.asarray(reward.v(gathered), dtype=float)


def hungarian_argmax(weights) -> np.ndarray:
    """Injective matching maximizing sum_m weights[arms[m], m]."""
    w = _check_shape(weights)
    return _kernels.hungarian_lex(w)


def _can_prune(values, reward, M):
    if not reward.monotone_extension and (values.min() < 0 or values.max() > 1):
        return False
    spec = reward.kernel_spec(M)
    if spec is not None and spec[0] == _kernels.PRODUCT and values.min() < 0:
        return False
    return True


def exhaustive_general(values, reward: RewardFunction, prune: bool = False,
                       guard: int = ENUMERATION_GUARD) -> np.ndarray:
    """Best injective matching for reward ``v`` by depth-first enumeration."""
    values = _check_shape(values)
    K, M = values.shape
    _guard(K, M, guard)
    spec = reward.kernel_spec(M)
    if spec is not None:
        kind, a, b, L = spec
        prune = prune and _can_prune(values, reward, M)
        arms, _ = _kernels.exhaustive(values, kind, a, b, L, prune)
        return arms
    # reward without a compiled form: vectorized enumeration in lexicographic order
    vals = matching_values(values, reward)
    vmax = vals.max()
    i = int(np.argmax(vals >= vmax - _kernels.tie_tol(vmax)))
    return injective_matchings(K, M)[i].astype(np.int64)


def approx_oracle(values, reward: RewardFunction, alpha: float, beta: float, rng) -> np.ndarray:
    """Synthetic (alpha, beta)-approximation oracle.

    With probability beta the exact maximizer; otherwise the best injective
    matching worth strictly less than alpha * V*, or the worst one if none is.
    """
    if not (0 <= alpha <= 1 and 0 <= beta <= 1):
        raise ValueError("alpha and beta must lie in [0, 1]")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    values = _check_shape(values)
    K, M = values.shape
    _guard(K, M, ENUMERATION_GUARD)
    if rng.random() < beta:
        return exact_argmax(values, reward)
    vals = matching_values(values, reward)
    perms = injective_matchings(K, M)
    vstar = vals.max()
    bad = vals < alpha * vstar
    if bad.any():
        target = vals[bad].max()
        i = int(np.flatnonzero(bad & (vals >= target - _kernels.tie_tol(target)))[0])
    else:
        i = int(np.argmin(vals))
    return perms[i].astype(np.int64)


def exact_argmax(values, reward: RewardFunction, prune: bool = True) -> np.ndarray:
    """Same answer as ``exhaustive_general`` but solved as an assignment problem
    whenever v is affine, or a product of positive values."""
    values = _check_shape(values)
    spec = reward.kernel_spec(values.shape[1])
    if spec is None:
        return exhaustive_general(values, reward, prune=prune)
    kind, a, b, L = spec
    return _kernels.solve(values, kind, a, b, L, prune and _can_prune(values, reward, values.shape[1]))


class ExactOracle:
    """Exact maximizer over injective matchings (assignment solver or enumeration)."""
    kind = "exact"

    def __init__(self, reward: RewardFunction, prune: bool = True):
        self.reward = reward
        self.prune = prune
        self.calls = 0

    def __call__(self, values) -> np.ndarray:
        self.calls += 1
        if isinstance(self.reward, Linear):
            return hungarian_argmax(values)
        return exact_argmax(values, self.reward, self.prune)


class ApproxOracle:
    """Wraps ``approx_oracle`` and logs, per call, whether the output was alpha-good."""
    kind = "approx"

    def __init__(self, reward: RewardFunction, alpha: float, beta: float, seed: int = 0):
        self.reward = reward
        self.alpha, self.beta = float(alpha), float(beta)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(STREAM_ORACLE,))))
        self.log: list[tuple[float, float]] = []

    def __call__(self, values) -> np.ndarray:
        arms = approx_oracle(values, self.reward, self.alpha, self.beta, self.rng)
        vals = matching_values(values, self.reward)
        got = float(matching_values(values, self.reward, arms[None, :])[0])
        self.log.append((got, float(vals.max())))
        return arms

    @property
    def successes(self) -> np.ndarray:
        if not self.log:
            return np.zeros(0, dtype=bool)
        got, best = np.array(self.log).T
        return got >= self.alpha * best - _kernels.TIE_RTOL * (1 + np.abs(best))


def make_oracle(kind, reward: RewardFunction, seed: int = 0):
    """``kind`` is "exact" or ``{"approx": {"alpha": a, "beta": b}}``."""
    if kind in (None, "exact"):
        return ExactOracle(reward)
    if isinstance(kind, dict) and "approx" in kind:
        p = kind["approx"]
        return ApproxOracle(reward, p["alpha"], p["beta"], seed=seed)
    raise ValueError(f"unknown oracle kind {kind!r}")


@dataclass
class GapStats:
    V_star: float
    optimal_matchings: list
    delta_min_per_pair: np.ndarray
    delta_max_per_pair: np.ndarray
    delta_min: float
    delta_max: float
    delta_c: float | None = None

    def to_json(self) -> dict:
        def fin(a):
            return [[None if not np.isfinite(x) else float(x) for x in row] for row in a]
        return {
            "V_star": self.V_star,
            "optimal_matchings": [[int(a) + 1 for a in s] for s in self.optimal_matchings],
            # rows are arms, columns players, both 1-indexed by position
            "delta_min_per_pair": fin(self.delta_min_per_pair),
            "delta_max_per_pair": fin(self.delta_max_per_pair),
            "delta_min": None if not np.isfinite(self.delta_min) else self.delta_min,
            "delta_max": None if not np.isfinite(self.delta_max) else self.delta_max,
            "delta_c": self.delta_c,
        }


FULL_ENUMERATION_GUARD = 10**6


def _all_values(instance: UtilityMatrix, reward, perms) -> np.ndarray:
    if instance.all_bernoulli:
        return matching_values(instance.mu, reward, perms)
    from .rewards import matching_value
    return np.array([matching_value(instance, reward, s) for s in perms])


def gap_stats(instance: UtilityMatrix, reward: RewardFunction, guard: int = ENUMERATION_GUARD) -> GapStats:
    K, M = instance.K, instance.M
    _guard(K, M, guard)
    perms = injective_matchings(K, M)
    vals = _all_values(instance, reward, perms)
    vstar = float(vals.max())
    tol = _kernels.tie_tol(vstar)
    opt = vals >= vstar - tol

    delta_c = None
    if K**M <= FULL_ENUMERATION_GUARD and M > 1:
        full = np.array(list(itertools.product(range(K), repeat=M)), dtype=np.int64)
        # entry m is clean iff no other player shares its arm
        alone = (full[:, :, None] == full[:, None, :]).sum(axis=2) == 1
        collided = ~alone.all(axis=1)
        if instance.all_bernoulli:
            lam = instance.mu[full, np.arange(M)] * alone
            fv = np.asarray(reward.v(lam), dtype=float)
        else:
            from .rewards import matching_value
            fv = np.array([matching_value(instance, reward, s) for s in full])
        if fv.max() > vstar + tol:
            raise AssertionError("a collided matching beats every collision-free one; reward is not monotone")
        delta_c = float(vstar - fv[collided].min())

    dmin = np.full((K, M), np.inf)
    dmax = np.full((K, M), -np.inf)
    sub = ~opt
    gaps = vstar - vals[sub]
    subp = perms[sub]
    for m in range(M):
        np.minimum.at(dmin[:, m], subp[:, m], gaps)
        np.maximum.at(dmax[:, m], subp[:, m], gaps)
    finite = np.isfinite(dmin)
    return GapStats(
        V_star=vstar,
        optimal_matchings=[perms[i].astype(int).tolist() for i in np.flatnonzero(opt)],
        delta_min_per_pair=dmin,
        delta_max_per_pair=dmax,
        delta_min=float(dmin[finite].min()) if finite.any() else np.inf,
        delta_max=float(dmax[np.isfinite(dmax)].max()) if finite.any() else -np.inf,
        delta_c=delta_c,
    )


def optimal_value(instance: UtilityMatrix, reward: RewardFunction) -> float:
    """V* on the true utilities, without the full gap computation when avoidable."""
    if isinstance(reward, Linear):
        arms = hungarian_argmax(instance.mu)
        return float(instance.mu[arms, np.arange(instance.M)].sum())
    if instance.all_bernoulli:
        arms = exact_argmax(instance.mu, reward)
        return float(matching_values(instance.mu, reward, arms[None, :])[0])
    return gap_stats(instance, reward).V_star
