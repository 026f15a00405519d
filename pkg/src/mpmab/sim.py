"""Bandit environment, collision-sensing feedback and the lockstep scheduler.

Arms and players are 0-indexed internally.  Anything written for humans
(CSV, JSON, wire logs) is 1-indexed.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

PHASES = ("none", "orthogonalization", "activation", "communication",
          "exploration", "signaling")
NONE, ORTHOGONALIZATION, ACTIVATION, COMMUNICATION, EXPLORATION, SIGNALING = range(6)
PHASE_CODE = {name: i for i, name in enumerate(PHASES)}

# spawn_key prefixes for SeedSequence substreams
STREAM_ENV = 0
STREAM_AGENT = 1
STREAM_ORACLE = 2


class InvalidAction(ValueError):
    pass


class Distribution:
    """Finite-support outcome law on [0, 1]."""

    def __init__(self, support, probs):
        support = np.asarray(support, dtype=float)
        probs = np.asarray(probs, dtype=float)
        if support.ndim != 1 or support.shape != probs.shape or support.size == 0:
            raise ValueError("support and probs must be equal-length 1-d arrays")
        if np.any(support < 0) or np.any(support > 1):
            raise ValueError("support must lie in [0, 1]")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must be a probability vector")
        order = np.argsort(support, kind="stable")
        self.support = support[order]
        self.probs = probs[order]

    @classmethod
    def bernoulli(cls, p: float) -> "Distribution":
        return cls([0.0, 1.0], [1.0 - p, p])

    @classmethod
    def point(cls, x: float) -> "Distribution":
        return cls([x], [1.0])

    @property
    def mean(self) -> float:
        return float(self.support @ self.probs)

    @property
    def is_bernoulli(self) -> bool:
        return self.support.size == 2 and self.support[0] == 0.0 and self.support[1] == 1.0

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c

    def __repr__(self):
        return f"Distribution(support={self.support.tolist()}, probs={self.probs.tolist()})"


class UtilityMatrix:
    """K x M expected utilities ``mu[k, m]`` plus the outcome law of every pair."""

    def __init__(self, mu, dists=None):
        mu = np.array(mu, dtype=float)
        if mu.ndim != 2:
            raise ValueError("mu must be a K x M matrix")
        K, M = mu.shape
        if not 1 <= M <= K:
            raise ValueError(f"need 1 <= M <= K, got K={K}, M={M}")
        if np.any(mu < 0) or np.any(mu > 1) or not np.all(np.isfinite(mu)):
            raise ValueError("utilities must lie in [0, 1]")
        if dists is None:
            dists = [[Distribution.bernoulli(mu[k, m]) for m in range(M)] for k in range(K)]
        for k in range(K):
            for m in range(M):
                if abs(dists[k][m].mean - mu[k, m]) > 1e-12:
                    raise ValueError(f"dist[{k}][{m}] mean {dists[k][m].mean} != mu {mu[k, m]}")
        self.mu = mu
        self.mu.setflags(write=False)
        self.dists = dists
        self.K, self.M = K, M
        self.all_bernoulli = all(d.is_bernoulli for row in dists for d in row)

        S = max(d.support.size for row in dists for d in row)
        self._support = np.ones((K, M, S))
        self._cdf = np.ones((K, M, S))
        self._size = np.zeros((K, M), dtype=np.int64)
        for k in range(K):
            for m in range(M):
                d = dists[k][m]
                n = d.support.size
                self._support[k, m, :n] = d.support
                self._support[k, m, n:] = d.support[-1]
                self._cdf[k, m, :n] = d.cdf()
                self._size[k, m] = n

    @classmethod
    def from_player_rows(cls, rows) -> "UtilityMatrix":
        """Build from an M x K table (one row per player), the printed layout."""
        return cls(np.asarray(rows, dtype=float).T)

    def inverse_cdf(self, k: int, m: int, u: np.ndarray) -> np.ndarray:
        n = self._size[k, m]
        j = np.searchsorted(self._cdf[k, m, :n], u, side="right")
        return self._support[k, m, j]

    def __repr__(self):
        return f"UtilityMatrix(K={self.K}, M={self.M})"


def collision_mask(arms) -> np.ndarray:
    """eta: True where the player is alone on her arm."""
    arms = np.asarray(arms)
    _, inv, counts = np.unique(arms, return_inverse=True, return_counts=True)
    return counts[inv.reshape(-1)] == 1


@dataclass
class StepOutcome:
    outcome: float
    collided: bool


class _PairStream:
    """Sequential uniforms for one (arm, player) pair, drawn lazily in chunks.

    numpy's ``Generator.random`` consumes one 64-bit word per double, so the
    sequence does not depend on how draws are batched.
    """
    CHUNK = 1024

    __slots__ = ("rng", "buf", "pos")

    def __init__(self, seedseq):
        self.rng = np.random.Generator(np.random.PCG64(seedseq))
        self.buf = np.empty(0)
        self.pos = 0

    def peek(self, n: int) -> np.ndarray:
        have = self.buf.size - self.pos
        if have < n:
            extra = self.rng.random(max(n - have, self.CHUNK))
            self.buf = np.concatenate([self.buf[self.pos:], extra])
            self.pos = 0
        return self.buf[self.pos:self.pos + n]

    def take(self, n: int) -> np.ndarray:
        out = self.peek(n)
        self.pos += n
        return out


class Environment:
    """Seeded sampler for a UtilityMatrix.

    Every (k, m) pair owns an independent uniform stream derived from the
    master seed; a sample is drawn from that stream on every pull of the pair,
    collided or not.
    """

    def __init__(self, instance: UtilityMatrix, seed: int):
        self.instance = instance
        self.seed = int(seed)
        self.K, self.M = instance.K, instance.M
        self._streams = [[_PairStream(np.random.SeedSequence(self.seed, spawn_key=(STREAM_ENV, k, m)))
                          for m in range(self.M)] for k in range(self.K)]

    def stream(self, k: int, m: int) -> _PairStream:
        return self._streams[k][m]

    def check_actions(self, arms) -> np.ndarray:
        arms = np.asarray(arms)
        if arms.shape != (self.M,):
            raise InvalidAction(f"expected {self.M} actions, got shape {arms.shape}")
        bad = np.flatnonzero((arms < 0) | (arms >= self.K))
        if bad.size:
            raise InvalidAction(f"arm index out of range for player {bad[0] + 1}: {arms[bad[0]]}")
        return arms

    def sample_block(self, arms, n: int) -> np.ndarray:
        """Raw utilities X for ``n`` consecutive steps of a fixed joint action."""
        X = np.empty((n, self.M))
        for m, k in enumerate(arms):
            X[:, m] = self.instance.inverse_cdf(k, m, self._streams[k][m].take(n))
        return X

    def step(self, arms) -> list[StepOutcome]:
        arms = self.check_actions(arms)
        eta = collision_mask(arms)
        X = self.sample_block(arms, 1)[0]
        return [StepOutcome(float(X[m]) if eta[m] else 0.0, not eta[m]) for m in range(self.M)]


def env_step(env: Environment, actions) -> list[StepOutcome]:
    return env.step(actions)


class Pull(NamedTuple):
    """One step on ``arm``; feedback is ``(outcome, collided)``."""
    arm: int
    phase: int = NONE
    event: int = 0


class Hold(NamedTuple):
    """Stay on ``arm`` for ``steps`` steps (None: unbounded).

    With ``stop_on_collision`` the hold ends on the first collided step, which
    is included.  Feedback is ``(outcomes, collided)`` arrays.
    """
    arm: int
    steps: int | None
    phase: int = NONE
    stop_on_collision: bool = False
    event: int = 0


class GeneratorAgent:
    """Agent whose behaviour is a generator yielding Pull/Hold requests."""

    is_leader = False

    def __init__(self):
        self._gen = None
        self._req = None
        self.clock = 1  # global index of the next step this agent will play

    def program(self):
        raise NotImplementedError

    def act(self, t: int):
        if self._gen is None:
            self.clock = t
            self._gen = self.program()
            self._req = next(self._gen, None)
        if self._req is None:
            raise StopIteration
        return self._req

    def observe(self, t, arm, outcome, collided):
        self.clock = t + 1
        self._advance((outcome, collided))

    def observe_hold(self, t0, arm, outcomes, collided):
        self.clock = t0 + len(outcomes)
        self._advance((outcomes, collided))

    def _advance(self, feedback):
        try:
            self._req = self._gen.send(feedback)
        except StopIteration:
            self._req = None


@dataclass
class Trace:
    """Per-step record of a run.  Row ``i`` is global step ``t = i + 1``."""
    arms: np.ndarray          # (T, M) int16
    outcomes: np.ndarray      # (T, M) float64, zero where collided
    collided: np.ndarray      # (T, M) bool
    phases: np.ndarray        # (T, M) uint8, each agent's own label
    events: np.ndarray        # (T, M) uint8, protocol event tags
    realized: np.ndarray      # (T,)
    expected: np.ndarray      # (T,)
    label_source: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, horizon: int, M: int) -> "Trace":
        return cls(arms=np.zeros((horizon, M), dtype=np.int16),
                   outcomes=np.zeros((horizon, M)),
                   collided=np.zeros((horizon, M), dtype=bool),
                   phases=np.zeros((horizon, M), dtype=np.uint8),
                   events=np.zeros((horizon, M), dtype=np.uint8),
                   realized=np.zeros(horizon),
                   expected=np.zeros(horizon))

    @property
    def horizon(self) -> int:
        return self.arms.shape[0]

    @property
    def M(self) -> int:
        return self.arms.shape[1]

    @property
    def t(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    @property
    def phase(self) -> np.ndarray:
        return self.phases[:, self.label_source]

    @property
    def n_collisions(self) -> np.ndarray:
        return self.collided.sum(axis=1)

    _ARRAYS = ("arms", "outcomes", "collided", "phases", "events", "realized", "expected")

    def to_bytes(self) -> bytes:
        """Compact binary fixture: JSON header line followed by raw arrays."""
        header = {"label_source": self.label_source, "meta": self.meta, "arrays": []}
        blobs = []
        for name in self._ARRAYS:
            a = np.ascontiguousarray(getattr(self, name))
            header["arrays"].append([name, a.dtype.str, list(a.shape)])
            blobs.append(a.tobytes())
        head = json.dumps(header, sort_keys=True).encode()
        return b"MPMABTR1\n" + len(head).to_bytes(8, "little") + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Trace":
        if not data.startswith(b"MPMABTR1\n"):
            raise ValueError("not a trace fixture")
        off = 9
        n = int.from_bytes(data[off:off + 8], "little")
        off += 8
        header = json.loads(data[off:off + n])
        off += n
        arrays = {}
        for name, dt, shape in header["arrays"]:
            dt = np.dtype(dt)
            size = int(np.prod(shape)) * dt.itemsize
            arrays[name] = np.frombuffer(data[off:off + size], dtype=dt).reshape(shape).copy()
            off += size
        return cls(label_source=header["label_source"], meta=header["meta"], **arrays)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Trace":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def rows(self, stride: int = 1):
        idx = np.arange(stride - 1, self.horizon, stride)
        if self.horizon and (idx.size == 0 or idx[-1] != self.horizon - 1):
            idx = np.append(idx, self.horizon - 1)
        return idx

    def to_csv(self, fh, stride: int = 1):
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        phase, ncol = self.phase, self.n_collisions
        for i in self.rows(stride):
            w.writerow([i + 1, PHASES[phase[i]], ";".join(str(int(a) + 1) for a in self.arms[i]),
                        int(ncol[i]), repr(float(self.realized[i])), repr(float(self.expected[i]))])

    def csv_text(self, stride: int = 1) -> str:
        buf = io.StringIO()
        self.to_csv(buf, stride)
        return buf.getvalue()


TRACE_COLUMNS = ("t", "phase", "arms", "collisions", "realized_reward", "expected_reward")


def read_trace_csv(fh) -> dict:
    """Parse a trace CSV back into arrays (arms 0-indexed again)."""
    rows = list(csv.DictReader(fh))
    return {
        "t": np.array([int(r["t"]) for r in rows], dtype=np.int64),
        "phase": np.array([PHASE_CODE[r["phase"]] for r in rows], dtype=np.uint8),
        "arms": np.array([[int(a) - 1 for a in r["arms"].split(";")] for r in rows], dtype=np.int16),
        "collisions": np.array([int(r["collisions"]) for r in rows], dtype=np.int64),
        "realized_reward": np.array([float(r["realized_reward"]) for r in rows]),
        "expected_reward": np.array([float(r["expected_reward"]) for r in rows]),
    }


def _request(agent, t):
    req = agent.act(t)
    if isinstance(req, (Pull, Hold)):
        return req
    return Pull(int(req))


def run_lockstep(agents: Sequence, env: Environment, horizon: int, reward=None) -> Trace:
    """Drive ``agents`` one global step at a time until ``horizon``.

    Each agent sees only its own ``(arm, outcome, collided)`` and the step
    index.  When every agent is inside a Hold and the joint action is
    collision-free, the scheduler advances several steps at once; the sample
    path is identical to stepping one at a time.
    """
    from .rewards import Linear, matching_value  # local: rewards imports sim

    if reward is None:
        reward = Linear()
    M = len(agents)
    if M != env.M:
        raise ValueError(f"{M} agents for an environment with {env.M} players")
    K = env.K
    trace = Trace.empty(horizon, M)
    value_cache: dict = {}
    INF = np.iinfo(np.int64).max

    reqs = [None] * M
    rem = [0] * M
    t0 = [0] * M
    acc_out = [None] * M
    acc_col = [None] * M

    def fetch(i, t):
        while True:
            try:
                r = _request(agents[i], t)
            except StopIteration:
                raise RuntimeError(f"agent {i + 1} program ended at step {t}") from None
            if not (0 <= r.arm < K):
                raise InvalidAction(f"player {i + 1} chose arm {r.arm} at step {t} (K={K})")
            if isinstance(r, Hold):
                if r.steps is not None and r.steps <= 0:
                    agents[i].observe_hold(t, r.arm, np.zeros(0), np.zeros(0, dtype=bool))
                    continue
                rem[i] = INF if r.steps is None else int(r.steps)
                t0[i] = t
                acc_out[i] = []
                acc_col[i] = []
            reqs[i] = r
            return

    for i in range(M):
        fetch(i, 1)

    t = 1
    while t <= horizon:
        arms = np.fromiter((r.arm for r in reqs), dtype=np.int64, count=M)
        eta = np.bincount(arms, minlength=K)[arms] == 1
        if not eta.all() or any(type(r) is Pull for r in reqs):
            n = 1
        else:
            n = min(min(rem), horizon - t + 1)
        X = env.sample_block(arms, n)
        out = X * eta
        sl = slice(t - 1, t - 1 + n)
        trace.arms[sl] = arms
        trace.outcomes[sl] = out
        trace.collided[sl] = ~eta
        trace.phases[sl] = [r.phase for r in reqs]
        trace.events[sl] = [r.event for r in reqs]
        key = arms.tobytes()
        v = value_cache.get(key)
        if v is None:
            v = value_cache[key] = matching_value(env.instance, reward, arms)
        trace.expected[sl] = v
        trace.realized[sl] = reward.instantaneous(out) if reward.has_instantaneous else v

        for i in range(M):
            r = reqs[i]
            if type(r) is Pull:
                agents[i].observe(t, r.arm, float(out[0, i]), bool(not eta[i]))
                fetch(i, t + 1)
            else:
                acc_out[i].append(out[:, i])
                acc_col[i].append(np.full(n, not eta[i]))
                if rem[i] != INF:
                    rem[i] -= n
                if rem[i] == 0 or (r.stop_on_collision and not eta[i]):
                    agents[i].observe_hold(t0[i], r.arm, np.concatenate(acc_out[i]),
                                           np.concatenate(acc_col[i]))
                    fetch(i, t + n)
        t += n

    for i, a in enumerate(agents):
        fix = getattr(a, "phase_corrections", None)
        if fix is not None:
            for start, stop, ph in fix():
                lo, hi = max(start, 1), min(stop, horizon)
                if lo <= hi:
                    trace.phases[lo - 1:hi, i] = ph
    leaders = [i for i, a in enumerate(agents) if getattr(a, "is_leader", False)]
    trace.label_source = leaders[0] if leaders else 0
    return trace
