"""Adaptive differential communication over forced collisions.

Sample means are rounded up to a dyadic grid whose width grows with the arm
counter, and only the truncated difference from the last transmitted value
goes over the channel.  A transmitted bit 1 is a collision on the receiver's
communication arm, a bit 0 is a quiet step on the sender's own arm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sim import COMMUNICATION, Hold, Pull


class ProtocolCorruption(RuntimeError):
    pass


@dataclass(frozen=True)
class Dyadic:
    numerator: int
    frac_bits: int

    def __post_init__(self):
        if self.frac_bits < 0 or not 0 <= self.numerator <= (1 << self.frac_bits):
            raise ValueError(f"invalid dyadic {self.numerator}/2^{self.frac_bits}")

    @property
    def value(self) -> float:
        return self.numerator / (1 << self.frac_bits)

    def rescale(self, b: int) -> "Dyadic":
        if b < self.frac_bits:
            raise ValueError("can only rescale to a finer grid")
        return Dyadic(self.numerator << (b - self.frac_bits), b)


ZERO = Dyadic(0, 0)


def quantize_ceil(x: float, b: int) -> Dyadic:
    """Smallest multiple of 2^-b that is >= x."""
    if b < 1:
        raise ValueError("b must be >= 1")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x={x} outside [0, 1]")
    # scaling by a power of two is exact in binary floating point
    return Dyadic(math.ceil(math.ldexp(x, b)), b)


def frac_bits_for(p: int) -> int:
    """Grid width ceil(1 + p/2) used for an arm with counter p."""
    return 1 + (int(p) + 1) // 2


@dataclass(frozen=True)
class DeltaMessage:
    sign: int            # +1, -1 or 0
    payload: str         # binary, most significant bit first, no leading zero
    target_frac_bits: int

    def __post_init__(self):
        if (self.sign == 0) != (self.payload == ""):
            raise ValueError("payload must be empty exactly when sign is zero")
        if self.payload and (self.payload[0] != "1" or set(self.payload) - {"0", "1"}):
            raise ValueError(f"malformed payload {self.payload!r}")
        if len(self.payload) > self.target_frac_bits + 1:
            raise ValueError("payload longer than b + 1 bits")

    @property
    def length(self) -> int:
        return len(self.payload)


def delta_encode(curr: Dyadic, prev: Dyadic) -> DeltaMessage:
    b = curr.frac_bits
    d = curr.numerator - prev.rescale(b).numerator
    payload = format(abs(d), "b") if d else ""
    return DeltaMessage(int(np.sign(d)), payload, b)


def delta_decode(prev: Dyadic, msg: DeltaMessage) -> Dyadic:
    b = msg.target_frac_bits
    mag = int(msg.payload, 2) if msg.payload else 0
    num = prev.rescale(b).numerator + msg.sign * mag
    if not 0 <= num <= (1 << b):
        raise ProtocolCorruption(f"decoded numerator {num} outside [0, 2^{b}]")
    return Dyadic(num, b)


def strip_leading_zeros(bits: str) -> str:
    return bits.lstrip("0")


def pad_left(bits: str, width: int) -> str:
    return bits.rjust(width, "0")


def frame_bits(msg: DeltaMessage) -> list[int]:
    """Sign bit (1 = negative), then a 0 marker before every payload bit, then a closing 1."""
    out = [1 if msg.sign < 0 else 0]
    for c in msg.payload:
        out += [0, int(c)]
    out.append(1)
    return out


def unframe(bits, target_frac_bits: int) -> DeltaMessage:
    """Inverse of frame_bits; the frame must end exactly at its closing 1."""
    bits = [int(x) for x in bits]
    if len(bits) < 2:
        raise ProtocolCorruption("frame too short")
    neg = bits[0] == 1
    payload = []
    i = 1
    while True:
        if i >= len(bits):
            raise ProtocolCorruption("frame has no end marker")
        if bits[i] == 1:
            break
        if i + 1 >= len(bits):
            raise ProtocolCorruption("frame truncated after a continuation marker")
        payload.append(str(bits[i + 1]))
        i += 2
    if i != len(bits) - 1:
        raise ProtocolCorruption("bits after the end marker")
    payload = "".join(payload)
    if payload and payload[0] != "1":
        raise ProtocolCorruption("payload has a leading zero")
    sign = 0 if not payload else (-1 if neg else 1)
    return DeltaMessage(sign, payload, target_frac_bits)


def frame_steps(L: int) -> int:
    """Channel steps for one update including the start signal."""
    return 2 * L + 3


def index_bits(K: int) -> int:
    return max(0, math.ceil(math.log2(K))) if K > 1 else 0


def encode_assignment(s1: int, sm: int, K: int) -> list[int]:
    """Index bits for the leader's arm then the follower's arm (0-indexed, big-endian).

    The initiation collision that precedes them is not part of the returned list.
    """
    nb = index_bits(K)
    for s in (s1, sm):
        if not 0 <= s < K:
            raise ValueError(f"arm {s} outside [0, {K})")
    if nb == 0:
        return []
    return [int(c) for c in format(s1, f"0{nb}b") + format(sm, f"0{nb}b")]


def decode_assignment(bits, K: int) -> tuple[int, int]:
    nb = index_bits(K)
    bits = [int(x) for x in bits]
    if len(bits) != 2 * nb:
        raise ProtocolCorruption(f"expected {2 * nb} assignment bits, got {len(bits)}")
    if nb == 0:
        return 0, 0
    s1 = int("".join(map(str, bits[:nb])), 2)
    sm = int("".join(map(str, bits[nb:])), 2)
    if s1 >= K or sm >= K:
        raise ProtocolCorruption(f"assignment ({s1}, {sm}) outside [0, {K})")
    return s1, sm


# ---- channel events (tags stored in the trace, one per player per step) ----

EVENTS = ("none", "recv", "idle", "start", "sign0", "sign1", "cont", "bit0", "bit1",
          "end", "init", "abit0", "abit1", "stop")
(EV_NONE, EV_RECV, EV_IDLE, EV_START, EV_SIGN0, EV_SIGN1, EV_CONT, EV_BIT0, EV_BIT1,
 EV_END, EV_INIT, EV_ABIT0, EV_ABIT1, EV_STOP) = range(len(EVENTS))
EVENT_CODE = {name: i for i, name in enumerate(EVENTS)}
# events whose step is meant to produce a collision
COLLIDING = frozenset({EV_START, EV_SIGN1, EV_BIT1, EV_END, EV_INIT, EV_ABIT1, EV_STOP})
SENDING = frozenset({EV_START, EV_SIGN0, EV_SIGN1, EV_CONT, EV_BIT0, EV_BIT1, EV_END,
                     EV_INIT, EV_ABIT0, EV_ABIT1, EV_STOP})
SIGNALS = frozenset({EV_START, EV_INIT, EV_STOP})


@dataclass(frozen=True)
class ChannelEndpoint:
    my_comm_arm: int
    peer_comm_arm: int
    role: str = "sender"   # sender | receiver | bystander

    def __post_init__(self):
        if self.role not in ("sender", "receiver", "bystander"):
            raise ValueError(f"unknown role {self.role!r}")


def send_bits(ep: ChannelEndpoint, bits, events=None, phase=COMMUNICATION):
    """Generator: one step per bit; 1 collides on the peer's arm, 0 stays home."""
    for i, bit in enumerate(bits):
        ev = events[i] if events is not None else (EV_BIT1 if bit else EV_BIT0)
        yield Pull(ep.peer_comm_arm if bit else ep.my_comm_arm, phase, ev)


def receive_bits(ep: ChannelEndpoint, count: int, phase=COMMUNICATION):
    """Generator: sit on the own arm for ``count`` steps; returns the decoded bits."""
    if count <= 0:
        return []
    _, collided = yield Hold(ep.my_comm_arm, count, phase, event=EV_RECV)
    return [int(c) for c in collided]


def transmit_frame(ep: ChannelEndpoint, msg: DeltaMessage, phase=COMMUNICATION):
    """Generator: sign, continuation/bit pairs, end marker.  Returns steps used."""
    bits = frame_bits(msg)
    evs = [EV_SIGN1 if bits[0] else EV_SIGN0]
    for c in msg.payload:
        evs += [EV_CONT, EV_BIT1 if c == "1" else EV_BIT0]
    evs.append(EV_END)
    yield from send_bits(ep, bits, evs, phase)
    return len(bits)


def receive_frame(ep: ChannelEndpoint, target_frac_bits: int, phase=COMMUNICATION):
    """Generator: read one frame bit by bit; returns (DeltaMessage, steps used)."""
    bits = []
    _, c = yield Pull(ep.my_comm_arm, phase, EV_RECV)
    bits.append(int(c))
    while True:
        _, c = yield Pull(ep.my_comm_arm, phase, EV_RECV)
        bits.append(int(c))
        if c:
            break
        if len(bits) > 2 * target_frac_bits + 4:
            raise ProtocolCorruption("frame longer than any valid payload")
        _, c = yield Pull(ep.my_comm_arm, phase, EV_RECV)
        bits.append(int(c))
    return unframe(bits, target_frac_bits), len(bits)


def idle(ep: ChannelEndpoint, steps, phase=COMMUNICATION, until_collision=False):
    """Generator: bystander wait on the own arm."""
    out = yield Hold(ep.my_comm_arm, steps, phase, stop_on_collision=until_collision, event=EV_IDLE)
    return out
