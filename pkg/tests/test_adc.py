import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmab.adc import (EV_END, EV_START, ZERO, ChannelEndpoint, DeltaMessage, Dyadic, ProtocolCorruption,
                       decode_assignment, delta_decode, delta_encode, encode_assignment, frac_bits_for,
                       frame_bits, frame_steps, idle, index_bits, pad_left, quantize_ceil, receive_bits,
                       receive_frame, send_bits, strip_leading_zeros, transmit_frame, unframe)
from mpmab.sim import Environment, GeneratorAgent, Pull, UtilityMatrix, run_lockstep


def test_quantize_examples():
    assert quantize_ceil(0.5, 1) == Dyadic(1, 1)
    assert quantize_ceil(0.25, 2) == Dyadic(1, 2)
    q = quantize_ceil(0.3, 2)
    assert q == Dyadic(2, 2) and q.value == 0.5
    assert quantize_ceil(1.0, 3) == Dyadic(8, 3)
    assert quantize_ceil(0.0, 3) == Dyadic(0, 3)


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 1), st.integers(1, 40))
def test_quantization_sandwich(x, b):
    q = quantize_ceil(x, b)
    exact = Fraction(q.numerator, 2**b)
    assert Fraction(x) <= exact < Fraction(x) + Fraction(1, 2**b)


@pytest.mark.parametrize("p", range(0, 40))
def test_grid_width_error_bound(p):
    b = frac_bits_for(p)
    assert b == math.ceil(1 + p / 2)
    assert 2.0**-b <= math.sqrt(1 / 2**p)


def test_delta_encode_examples():
    d = Dyadic(3, 3)
    assert delta_encode(d, d) == DeltaMessage(0, "", 3)
    assert delta_encode(Dyadic(3, 3), Dyadic(0, 1)) == DeltaMessage(1, "11", 3)
    assert delta_encode(Dyadic(3, 3), Dyadic(1, 1)) == DeltaMessage(-1, "1", 3)
    assert delta_encode(Dyadic(1, 1), ZERO) == DeltaMessage(1, "1", 1)


def test_delta_decode_examples():
    assert delta_decode(Dyadic(1, 1), DeltaMessage(0, "", 3)) == Dyadic(4, 3)
    assert delta_decode(Dyadic(0, 1), DeltaMessage(1, "11", 3)) == Dyadic(3, 3)
    assert delta_decode(Dyadic(1, 1), DeltaMessage(-1, "1", 3)) == Dyadic(3, 3)
    with pytest.raises(ProtocolCorruption):
        delta_decode(Dyadic(0, 1), DeltaMessage(-1, "1", 3))


def test_randomized_roundtrip():
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(100_000):
        b1 = int(rng.integers(0, 32))
        b2 = int(rng.integers(max(b1, 1), 33))
        prev = Dyadic(int(rng.integers(0, 2**b1 + 1)), b1)
        curr = Dyadic(int(rng.integers(0, 2**b2 + 1)), b2)
        msg = delta_encode(curr, prev)
        assert msg.length <= b2 + 1
        bad += delta_decode(prev, msg) != curr
    assert bad == 0


def test_strip_pad_inverse():
    for w in range(1, 9):
        for bits in itertools.product("01", repeat=w):
            s = "".join(bits)
            assert pad_left(strip_leading_zeros(s), w) == s
    assert strip_leading_zeros("000110") == "110"


def test_frame_lengths():
    assert frame_bits(DeltaMessage(0, "", 2)) == [0, 1]
    assert len(frame_bits(DeltaMessage(1, "101", 3))) == 8
    assert frame_bits(DeltaMessage(-1, "101", 3)) == [1, 0, 1, 0, 0, 0, 1, 1]
    for L in range(0, 10):
        assert frame_steps(L) == 1 + 1 + 2 * L + 1


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 20), st.data())
def test_frame_roundtrip(b, data):
    n = data.draw(st.integers(-(2**b), 2**b))
    payload = format(abs(n), "b") if n else ""
    msg = DeltaMessage(int(np.sign(n)), payload, b)
    assert unframe(frame_bits(msg), b) == msg


def test_unframe_rejects_garbage():
    with pytest.raises(ProtocolCorruption):
        unframe([0, 0, 1, 1, 1], 3)          # bits after the end marker
    with pytest.raises(ProtocolCorruption):
        unframe([0, 0, 1], 3)                # no end marker
    with pytest.raises(ProtocolCorruption):
        unframe([0, 0, 0, 1], 3)             # leading zero in the payload


def test_assignment_examples():
    assert index_bits(5) == 3 and index_bits(2) == 1 and index_bits(1) == 0
    assert "".join(map(str, encode_assignment(2, 0, 5))) == "010" + "000"
    assert len(encode_assignment(1, 0, 2)) + 1 == 3
    for s1, sm in itertools.product(range(8), repeat=2):
        assert decode_assignment(encode_assignment(s1, sm, 8), 8) == (s1, sm)
    with pytest.raises(ProtocolCorruption):
        decode_assignment([1, 1, 1, 0, 0, 0], 5)


# ---- channel over the real simulator ----

class Script(GeneratorAgent):
    def __init__(self, body):
        super().__init__()
        self.body = body
        self.result = None

    def program(self):
        self.result = yield from self.body()
        while True:
            yield Pull(0)


def channel_run(sender_body, receiver_body, n_bystanders=0, horizon=None, K=None):
    M = 2 + n_bystanders
    K = K or M
    bys = [Script(lambda m=m: idle(ChannelEndpoint(m, m, "bystander"), None)) for m in range(2, M)]
    agents = [Script(sender_body), Script(receiver_body)] + bys
    env = Environment(UtilityMatrix(np.full((K, M), 0.5)), 0)
    tr = run_lockstep(agents, env, horizon)
    return agents, tr


def test_clean_channel_bits():
    s_ep, r_ep = ChannelEndpoint(0, 1), ChannelEndpoint(1, 0, "receiver")
    agents, tr = channel_run(lambda: send_bits(s_ep, [1, 0, 1]), lambda: receive_bits(r_ep, 3), horizon=3)
    assert agents[1].result == [1, 0, 1]
    # a 0 bit collides nowhere
    assert not tr.collided[1].any()


def test_bystanders_never_collide_during_transfer():
    bits = np.random.default_rng(1).integers(0, 2, 100).tolist()
    s_ep, r_ep = ChannelEndpoint(0, 1), ChannelEndpoint(1, 0, "receiver")
    agents, tr = channel_run(lambda: send_bits(s_ep, bits), lambda: receive_bits(r_ep, 100),
                             n_bystanders=3, horizon=100)
    assert agents[1].result == bits
    assert tr.collided[:, 2:].sum() == 0


@pytest.mark.parametrize("msg", [DeltaMessage(0, "", 2), DeltaMessage(1, "101", 3), DeltaMessage(-1, "1", 5)])
def test_frame_over_channel(msg):
    s_ep, r_ep = ChannelEndpoint(0, 1), ChannelEndpoint(1, 0, "receiver")

    def receiver():
        yield Pull(0, event=EV_START)        # start signal on the sender's arm
        return (yield from receive_frame(r_ep, msg.target_frac_bits))

    def sender():
        yield from idle(s_ep, None, until_collision=True)
        return (yield from transmit_frame(s_ep, msg))

    n = frame_steps(msg.length)
    agents, tr = channel_run(sender, receiver, n_bystanders=1, horizon=n)
    got, steps = agents[1].result
    assert got == msg and steps == n - 1 and agents[0].result == n - 1
    assert tr.events[n - 1, 0] == EV_END
    assert tr.collided[:, 2].sum() == 0
