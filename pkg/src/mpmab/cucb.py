"""Centralized CUCB baseline: one controller sees every player's outcome."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .matching import ExactOracle
from .rewards import Linear, RewardFunction, matching_value
from .sim import ACTIVATION, NONE, Environment, Trace, UtilityMatrix


@dataclass
class CucbState:
    counts: np.ndarray   # (K, M) int64
    sums: np.ndarray     # (K, M) float
    t: int               # 1-based global index of the next step

    @classmethod
    def fresh(cls, K: int, M: int) -> "CucbState":
        return cls(np.zeros((K, M), dtype=np.int64), np.zeros((K, M)), 1)

    def ucb(self) -> np.ndarray:
        rad = 3.0 * math.log(self.t) / 2.0   # same operation order as the compiled loop
        return self.sums / self.counts + np.sqrt(rad / self.counts)

    def update(self, arms, x) -> None:
        cols = np.arange(len(arms))
        self.counts[arms, cols] += 1
        self.sums[arms, cols] += x
        self.t += 1


def warm_start_arms(K: int, M: int) -> np.ndarray:
    """K joint actions; player m pulls arm (m + k) mod K at step k."""
    return (np.arange(M)[None, :] + np.arange(K)[:, None]) % K


def _step(state, env, oracle):
    arms = np.asarray(oracle(state.ucb()), dtype=np.int64)
    x = env.sample_block(arms, 1)[0]
    state.update(arms, x)
    return arms, x


def cucb_step(state: CucbState, env: Environment, reward: RewardFunction, oracle=None) -> np.ndarray:
    """Play one UCB matching and absorb its M outcomes."""
    return _step(state, env, oracle if oracle is not None else ExactOracle(reward))[0]


def _fill_trace(trace: Trace, instance: UtilityMatrix, reward: RewardFunction, start: int) -> None:
    arms = trace.arms[start:].astype(np.int64)
    M = instance.M
    if instance.all_bernoulli and reward.kernel_spec(M) is not None:
        kind, a, b, L = reward.kernel_spec(M)
        lam = instance.mu[arms, np.arange(M)]
        trace.expected[start:] = _kernels.v_rows(kind, a, b, L, np.ascontiguousarray(lam))
    else:
        uniq, inv = np.unique(arms, axis=0, return_inverse=True)
        vals = np.array([matching_value(instance, reward, u) for u in uniq])
        trace.expected[start:] = vals[inv.reshape(-1)]
    if reward.has_instantaneous:
        trace.realized[start:] = reward.instantaneous(trace.outcomes[start:])
    else:
        trace.realized[start:] = trace.expected[start:]


def _run_compiled(state, env, reward, spec, trace, start, horizon, B):
    K, M = state.counts.shape
    inst = env.instance
    kind, a, b, L = spec
    prune = bool(reward.monotone_extension)
    ubuf = np.empty((K, M, B))
    upos = np.zeros((K, M), dtype=np.int64)
    i = start
    while i < horizon:
        for k in range(K):
            for m in range(M):
                ubuf[k, m] = env.stream(k, m).peek(B)
        upos[:] = 0
        n = _kernels.cucb_run(state.t, horizon - i, state.counts, state.sums, kind, a, b, L,
                              prune, inst._support, inst._cdf, inst._size, ubuf, upos,
                              trace.arms[i:], trace.outcomes[i:])
        for k in range(K):
            for m in range(M):
                if upos[k, m]:
                    env.stream(k, m).take(int(upos[k, m]))
        state.t += n
        i += n


def run_cucb(instance: UtilityMatrix, horizon: int, seed: int, reward: RewardFunction | None = None,
             fast: bool = True, buffer: int = 4096) -> Trace:
    """Warm start plus UCB play up to ``horizon``.

    ``fast`` runs the main loop compiled; both paths consume the per-pair
    random streams identically, so traces match bit for bit.
    """
    reward = reward if reward is not None else Linear()
    env = Environment(instance, seed)
    K, M = instance.K, instance.M
    trace = Trace.empty(horizon, M)
    state = CucbState.fresh(K, M)
    w = min(K, horizon)
    for i, a in enumerate(warm_start_arms(K, M)[:w]):
        x = env.sample_block(a, 1)[0]
        state.update(a, x)
        trace.arms[i], trace.outcomes[i] = a, x
    trace.phases[:w] = ACTIVATION

    spec = reward.kernel_spec(M)
    if fast and spec is not None:
        _run_compiled(state, env, reward, spec, trace, w, horizon, buffer)
    else:
        oracle = ExactOracle(reward)
        for i in range(w, horizon):
            trace.arms[i], trace.outcomes[i] = _step(state, env, oracle)
    trace.phases[w:] = NONE
    _fill_trace(trace, instance, reward, 0)
    trace.meta.update({"algorithm": "cucb", "seed": int(seed)})
    return trace
