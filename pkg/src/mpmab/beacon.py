"""BEACON: decentralized batched exploration with implicit communication.

Players first spread out over distinct arms and learn an index and the
player count.  Player 1 (the leader) then runs epochs: followers upload
quantized statistics through forced collisions, the leader picks a matching
from UCB indices, broadcasts it, and everybody explores it for 2^p steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import adc
from .adc import (EV_ABIT0, EV_ABIT1, EV_INIT, EV_START, EV_STOP, ZERO, ChannelEndpoint,
                  ProtocolCorruption, delta_decode, delta_encode, frac_bits_for,
                  idle, index_bits, quantize_ceil, receive_bits, receive_frame, transmit_frame)
from .matching import ExactOracle
from .rewards import Linear
from .sim import (ACTIVATION, COMMUNICATION, EXPLORATION, ORTHOGONALIZATION, SIGNALING,
                  STREAM_AGENT, GeneratorAgent, Hold, Pull, Trace)


class InitializationError(RuntimeError):
    pass


def default_block_cap(K: int, M: int | None = None) -> int:
    """10 * ceil(K^2 / (K - M + 1)); without M the worst case M = K is assumed."""
    M = K if M is None else M
    return 10 * math.ceil(K * K / (K - M + 1))


def floor_log2(T) -> np.ndarray:
    """Elementwise floor(log2 T), with -1 where T == 0."""
    T = np.asarray(T, dtype=np.int64)
    out = np.full(T.shape, -1, dtype=np.int64)
    pos = T > 0
    out[pos] = np.frexp(T[pos].astype(float))[1] - 1
    return out


def ucb_index(tilde, p, t_r: int) -> np.ndarray:
    """tilde + sqrt(3 ln t_r / 2^(p+1)), elementwise."""
    return np.asarray(tilde) + np.sqrt(3.0 * math.log(t_r) / np.ldexp(1.0, np.asarray(p) + 1))


# ---- initialization building blocks (generator fragments) ----

def orthogonalize(K: int, rng: np.random.Generator, block_cap: int):
    """Random hopping until every player owns a distinct arm.  Returns the arm."""
    fixed = None
    for _ in range(block_cap):
        if fixed is None:
            a = int(rng.integers(K))
            _, col = yield Pull(a, ORTHOGONALIZATION)
            if not col:
                fixed = a
        else:
            yield Pull(fixed, ORTHOGONALIZATION)
        if fixed is None:
            for a in range(K):
                yield Pull(a, ORTHOGONALIZATION)
        else:
            _, col = yield Hold(fixed, K, ORTHOGONALIZATION)
            if not col[fixed]:
                return fixed
    raise InitializationError(f"orthogonalization did not settle within {block_cap} blocks")


def rank_assign(K: int, arm: int):
    """2K-step round robin; returns (0-indexed rank, player count).

    The owner of arm k (1-indexed) sits still for 2k steps and then hops one
    arm per step.  While sitting she is hit once by every owner of a smaller
    arm; while hopping she hits every owner of a larger arm once.
    """
    k1 = arm + 1
    _, col = yield Hold(arm, 2 * k1, ORTHOGONALIZATION)
    rank = int(col.sum())
    hits = 0
    for i in range(1, 2 * K - 2 * k1 + 1):
        _, c = yield Pull((arm + i) % K, ORTHOGONALIZATION)
        hits += int(c)
    return rank, rank + hits + 1


def activation(K: int, rank: int, ledger: "ArmLedger"):
    """One pull of every arm, offset by rank so nobody collides."""
    for k in range(K):
        a = (rank + k) % K
        x, col = yield Pull(a, ACTIVATION)
        ledger.add(a, [x])


class ArmLedger:
    """Exploratory sample bookkeeping for one player's K arms.

    ``checkpoints[k][j]`` is the sum of the first 2^j samples of arm k, so the
    mean at counter p never needs the raw samples.
    """

    def __init__(self, K: int, keep_samples: bool = False):
        self.K = K
        self.T = np.zeros(K, dtype=np.int64)
        self._sum = np.zeros(K)
        self.checkpoints: list[list[float]] = [[] for _ in range(K)]
        self.samples = [[] for _ in range(K)] if keep_samples else None

    def add(self, k: int, xs) -> None:
        xs = np.asarray(xs, dtype=float)
        n = xs.size
        if n == 0:
            return
        n0 = int(self.T[k])
        cs = self._sum[k] + np.cumsum(xs)
        ck = self.checkpoints[k]
        j = len(ck)
        while (1 << j) <= n0 + n:
            ck.append(float(cs[(1 << j) - n0 - 1]))
            j += 1
        self._sum[k] = cs[-1]
        self.T[k] = n0 + n
        if self.samples is not None:
            self.samples[k].extend(xs.tolist())

    @property
    def p(self) -> np.ndarray:
        return floor_log2(self.T)

    def hat(self, k: int, p: int | None = None) -> float:
        if p is None:
            p = int(self.p[k])
        if p < 0:
            raise ValueError(f"arm {k} has no samples")
        return self.checkpoints[k][p] / (1 << p)


@dataclass
class EpochRecord:
    r: int
    t_r: int
    S: list = field(default_factory=list)
    p_r: int = -1
    uploads: list = field(default_factory=list)        # (k, m) 0-indexed
    payload_lengths: list = field(default_factory=list)
    upload_steps: list = field(default_factory=list)
    completed: bool = False

    def to_json(self) -> dict:
        return {"r": self.r, "t_r": self.t_r, "S_r": [int(a) + 1 for a in self.S], "p_r": self.p_r,
                "uploads": len(self.uploads), "upload_steps": int(sum(self.upload_steps)),
                "payload_lengths": list(self.payload_lengths), "completed": self.completed}


def _snapshot(r, T, p, tilde) -> dict:
    flat = list(np.ravel(np.asarray(tilde, dtype=object)))
    return {"r": r, "T": np.asarray(T).ravel().tolist(), "p": np.asarray(p).ravel().tolist(),
            "num": [d.numerator for d in flat], "bits": [d.frac_bits for d in flat]}


class BeaconPlayer(GeneratorAgent):
    """One decentralized player.  Knows K and its own observations only.

    ``fault`` (an epoch index) makes a follower flip the last payload bit of its
    first multi-bit upload from that epoch on; used to test the auditor.
    """

    def __init__(self, K: int, seed: int, slot: int, reward=None, oracle=None,
                 block_cap: int | None = None, keep_samples: bool = False, fault: int | None = None,
                 init_only: bool = False):
        super().__init__()
        self.K = K
        self.reward = reward if reward is not None else Linear()
        self.oracle = oracle if oracle is not None else ExactOracle(self.reward)
        self.block_cap = block_cap if block_cap is not None else default_block_cap(K)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(STREAM_AGENT, slot))))
        self.keep_samples = keep_samples
        self.fault = fault
        self.init_only = init_only
        self.rank: int | None = None
        self.is_leader = False
        self.M: int | None = None
        self.fixed_arm: int | None = None
        self.init_steps: int | None = None
        self.ledger: ArmLedger | None = None
        self.snapshots: list[dict] = []
        self.epochs: list[EpochRecord] = []
        self.corruptions: list[str] = []
        self._corrections: list[tuple[int, int, int]] = []

    def phase_corrections(self):
        return list(self._corrections)

    def program(self):
        K = self.K
        self.fixed_arm = yield from orthogonalize(K, self.rng, self.block_cap)
        self.rank, self.M = yield from rank_assign(K, self.fixed_arm)
        self.init_steps = self.clock - 1
        self.is_leader = self.rank == 0
        if self.init_only:
            while True:
                yield Hold(self.fixed_arm, None)
        self.ledger = ArmLedger(K, self.keep_samples)
        yield from activation(K, self.rank, self.ledger)
        if self.is_leader:
            yield from self._lead()
        else:
            yield from self._follow()

    # ---- leader ----

    def _lead(self):
        K, M, own = self.K, self.M, self.ledger
        T = np.ones((K, M), dtype=np.int64)
        p_prev = np.full((K, M), -1, dtype=np.int64)
        tilde = [[ZERO] * M for _ in range(K)]
        comm = list(range(M))
        r = 0
        while True:
            r += 1
            rec = EpochRecord(r=r, t_r=self.clock)
            self.epochs.append(rec)
            T[:, 0] = own.T
            p = floor_log2(T)
            for k in np.flatnonzero(p[:, 0] > p_prev[:, 0]):
                tilde[k][0] = quantize_ceil(own.hat(k, p[k, 0]), frac_bits_for(p[k, 0]))
            for k in range(K):
                for m in range(1, M):
                    if p[k, m] <= p_prev[k, m]:
                        continue
                    rec.uploads.append((k, m))
                    yield Pull(comm[m], COMMUNICATION, EV_START)
                    ep = ChannelEndpoint(comm[0], comm[m], "receiver")
                    msg, steps = yield from receive_frame(ep, frac_bits_for(p[k, m]))
                    rec.payload_lengths.append(msg.length)
                    rec.upload_steps.append(steps + 1)
                    try:
                        tilde[k][m] = delta_decode(tilde[k][m], msg)
                    except ProtocolCorruption as e:
                        self.corruptions.append(f"epoch {r}, arm {k + 1}, player {m + 1}: {e}")
            p_prev = p
            self.snapshots.append(_snapshot(r, T, p, tilde))

            est = np.array([[d.value for d in row] for row in tilde])
            ucb = ucb_index(est, p, rec.t_r)
            S = [int(a) for a in self.oracle(ucb)]
            p_r = int(min(p[S[m], m] for m in range(M)))
            rec.S, rec.p_r = S, p_r

            for m in range(1, M):
                yield Pull(comm[m], COMMUNICATION, EV_INIT)
                for bit in adc.encode_assignment(S[0], S[m], K):
                    yield Pull(comm[m] if bit else comm[0], COMMUNICATION, EV_ABIT1 if bit else EV_ABIT0)

            n = 1 << p_r
            out, col = yield Hold(S[0], n, EXPLORATION)
            if col.any():
                self.corruptions.append(f"epoch {r}: collision during exploration")
            own.add(S[0], out)
            for m in range(1, M):
                T[S[m], m] += n
            for m in range(1, M):
                yield Pull(S[m], SIGNALING, EV_STOP)
            rec.completed = True
            comm = S

    # ---- follower ----

    def _follow(self):
        K, M, j, own = self.K, self.M, self.rank, self.ledger
        nb = index_bits(K)
        p_prev = np.full(K, -1, dtype=np.int64)
        tilde = [ZERO] * K
        comm_self, comm_leader = j, 0
        fault_armed = self.fault is not None
        r = 0
        while True:
            r += 1
            p = own.p
            ep = ChannelEndpoint(comm_self, comm_leader, "sender")
            for k in np.flatnonzero(p > p_prev):
                yield from idle(ep, None, until_collision=True)
                new = quantize_ceil(own.hat(k, p[k]), frac_bits_for(p[k]))
                msg = delta_encode(new, tilde[k])
                if fault_armed and r >= self.fault and msg.length >= 2:
                    flipped = msg.payload[:-1] + ("0" if msg.payload[-1] == "1" else "1")
                    msg = adc.DeltaMessage(msg.sign, flipped, msg.target_frac_bits)
                    fault_armed = False
                yield from transmit_frame(ep, msg)
                tilde[k] = new
            p_prev = p
            self.snapshots.append(_snapshot(r, own.T, p, tilde))

            yield from idle(ep, None, until_collision=True)
            bits = yield from receive_bits(ep, 2 * nb)
            s1, sm = adc.decode_assignment(bits, K)
            yield from idle(ep, (M - 1 - j) * (1 + 2 * nb))

            start = self.clock
            out, col = yield Hold(sm, None, EXPLORATION, stop_on_collision=True)
            n = len(out) - 1 - (j - 1)
            if n < 1 or n & (n - 1):
                raise ProtocolCorruption(f"player {j + 1}: stop signal after {len(out) - 1} clean steps")
            own.add(sm, out[:n])
            self._corrections.append((start + n, start + n + M - 2, SIGNALING))
            if M - 1 - j:
                yield Hold(sm, M - 1 - j, SIGNALING)
            comm_self, comm_leader = sm, s1

    def audit_record(self) -> dict:
        return {"rank": self.rank, "M": self.M, "snapshots": self.snapshots,
                "epochs": [e.to_json() for e in self.epochs], "corruptions": self.corruptions}


def make_players(K: int, M: int, seed: int, reward=None, oracle=None, **kw) -> list[BeaconPlayer]:
    kw.setdefault("block_cap", default_block_cap(K, M))
    return [BeaconPlayer(K, seed, slot, reward=reward, oracle=oracle, **kw) for slot in range(M)]


@lru_cache(maxsize=8)
def _silent_instance(K, M):
    from .sim import UtilityMatrix
    return UtilityMatrix(np.zeros((K, M)))


def run_initialization(K: int, M: int, seed: int, block_cap: int | None = None):
    """Orthogonalization plus rank assignment only.

    Returns ``(ranks, learned_M, steps)`` where ``steps`` is the common
    duration; raises InitializationError past the block cap.
    """
    from .sim import Environment, run_lockstep
    cap = block_cap if block_cap is not None else default_block_cap(K, M)
    players = [BeaconPlayer(K, seed, slot, block_cap=cap, init_only=True) for slot in range(M)]
    horizon = cap * (K + 1) + 2 * K + 1
    run_lockstep(players, Environment(_silent_instance(K, M), seed), horizon)
    steps = {p.init_steps for p in players}
    if None in steps or len(steps) != 1:
        raise InitializationError(f"players finished at different steps: {sorted(map(str, steps))}")
    return [p.rank for p in players], [p.M for p in players], steps.pop()


def attach_audit(trace: Trace, players) -> Trace:
    """Store the ledgers needed by ``mirror_audit`` inside the trace metadata."""
    trace.meta["beacon"] = [p.audit_record() for p in players]
    return trace


@dataclass
class AuditReport:
    mirror_mismatches: list
    unattributed_collisions: list
    missed_signals: list
    exploration_collisions: int
    desync_steps: int
    corruptions: list
    epochs_checked: int

    @property
    def passed(self) -> bool:
        return not (self.mirror_mismatches or self.unattributed_collisions or self.missed_signals
                    or self.exploration_collisions or self.desync_steps or self.corruptions)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def _compare_mirror(records) -> tuple[list, int]:
    leader = next((r for r in records if r["rank"] == 0), None)
    if leader is None or leader["M"] == 1:
        return [], 0
    M = leader["M"]
    lead = {s["r"]: s for s in leader["snapshots"]}
    bad, checked = [], 0
    for rec in records:
        m = rec["rank"]
        if m == 0:
            continue
        for s in rec["snapshots"]:
            L = lead.get(s["r"])
            if L is None:
                continue
            checked += 1
            for key in ("T", "p", "num", "bits"):
                mirror = L[key][m::M]
                if list(mirror) != list(s[key]):
                    bad.append({"epoch": s["r"], "player": m + 1, "field": key})
    return bad, checked


def mirror_audit(trace: Trace, players=None) -> AuditReport:
    """Check ledgers, collision attribution, clean exploration and phase agreement."""
    records = [p.audit_record() for p in players] if players is not None else trace.meta.get("beacon", [])
    mirror_bad, checked = _compare_mirror(records)
    phase = trace.phase
    ev = trace.events
    col = trace.collided
    ncol = col.sum(axis=1)

    unattributed, missed = [], []
    chan = np.flatnonzero((phase == COMMUNICATION) | (phase == SIGNALING))
    colliding = np.array([e in adc.COLLIDING for e in range(len(adc.EVENTS))])
    for i in chan:
        intents = np.flatnonzero(colliding[ev[i]])
        if ncol[i]:
            who = np.flatnonzero(col[i])
            if len(intents) != 1 or ncol[i] != 2 or intents[0] not in who:
                unattributed.append(int(i) + 1)
        elif len(intents):
            missed.append(int(i) + 1)

    expl = int(ncol[phase == EXPLORATION].sum())

    # phase agreement, excluding the final (possibly truncated) epoch
    leader = next((r for r in records if r["rank"] == 0), None)
    stop = trace.horizon
    if leader is not None and leader["epochs"]:
        stop = leader["epochs"][-1]["t_r"] - 1
    ph = trace.phases[:stop]
    desync = int((ph != ph[:, :1]).any(axis=1).sum())

    corruptions = [c for r in records for c in r.get("corruptions", [])]
    return AuditReport(mirror_bad, unattributed, missed, expl, desync, corruptions, checked)


def wire_log(trace: Trace) -> list[str]:
    """One line per channel step: t,sender,receiver,arm,collision,bit,event (1-indexed)."""
    lines = ["t,sender,receiver,arm,collision,bit,event"]
    sending = np.array([e in adc.SENDING for e in range(len(adc.EVENTS))])
    phase = trace.phase
    for i in np.flatnonzero((phase == COMMUNICATION) | (phase == SIGNALING)):
        ev = trace.events[i]
        senders = np.flatnonzero(sending[ev])
        if len(senders) != 1:
            continue
        s = int(senders[0])
        arm = int(trace.arms[i, s])
        recv = np.flatnonzero(ev == adc.EV_RECV)
        if len(recv):
            rcv = int(recv[0])
        else:
            same = [q for q in np.flatnonzero(trace.arms[i] == arm) if q != s]
            rcv = int(same[0]) if same else -1
        collision = int(trace.collided[i, s])
        bit = "-" if ev[s] in adc.SIGNALS else str(collision)
        lines.append(f"{i + 1},{s + 1},{rcv + 1 if rcv >= 0 else '-'},{arm + 1},{collision},{bit},{adc.EVENTS[ev[s]]}")
    return lines
