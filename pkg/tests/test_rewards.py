import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmab.rewards import (REWARDS, CustomReward, Linear, MaxMin, Minimal, PiecewiseLinear,
                           ProportionalFairness, Threshold, TopL, UnsupportedCapability, VideoQuality,
                           check_monotone, enumerate_expectation, expected_reward, expected_reward_mc,
                           instantaneous, make_reward)
from mpmab.sim import Distribution


def all_variants(M=3):
    return [Linear(), ProportionalFairness(0.01, 1.0), Minimal(), Threshold([0.5] * M),
            VideoQuality([PiecewiseLinear([0, 0.3, 1], [0.1, 0.7, 1.0])]), TopL(2), MaxMin()]


def brute_bernoulli(fn, lam):
    """E[fn(O)] for independent Bernoulli(lam) outcomes, by listing all 2^M vectors."""
    total = 0.0
    for bits in itertools.product([0.0, 1.0], repeat=len(lam)):
        p = math.prod(l if b else 1 - l for b, l in zip(bits, lam))
        total += p * fn(np.array(bits))
    return total


def test_instantaneous_examples():
    assert instantaneous(Linear(), [0.5, 0.2, 0.0]) == pytest.approx(0.7)
    assert instantaneous(Minimal(), [1, 1, 0]) == 0
    pf = ProportionalFairness(0.01, [1, 1])
    assert instantaneous(pf, [1, 0]) == pytest.approx(math.log(1.01) + math.log(0.01))
    assert instantaneous(pf, [1, 0]) == pytest.approx(-4.5952, abs=1e-4)


def test_max_min_has_no_instantaneous():
    with pytest.raises(UnsupportedCapability):
        instantaneous(MaxMin(), [0.2, 0.4])


def test_expected_examples():
    assert expected_reward(Minimal(), [0.5, 0.5], [1, 1]) == pytest.approx(0.25)
    assert expected_reward(Linear(), [0.3, 0.4], [1, 0]) == pytest.approx(0.3)
    assert expected_reward(Threshold([0.5, 0.5]), [0.7, 0.2], [1, 1]) == pytest.approx(0.9)


@pytest.mark.parametrize("reward", all_variants(), ids=lambda r: r.name)
def test_bernoulli_form_matches_brute_force(reward):
    rng = np.random.default_rng(3)
    for _ in range(20):
        lam = rng.random(3)
        eta = rng.random(3) > 0.3
        if not reward.has_instantaneous:
            assert expected_reward(reward, lam, eta) == pytest.approx(min(lam * eta))
            continue
        want = brute_bernoulli(lambda o: float(reward.instantaneous(o * eta)), lam)
        assert expected_reward(reward, lam, eta) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("reward", [r for r in all_variants() if r.has_instantaneous], ids=lambda r: r.name)
def test_point_mass_equals_instantaneous(reward):
    rng = np.random.default_rng(8)
    for _ in range(10):
        x = rng.random(3)
        laws = [Distribution.point(v) for v in x]
        got = expected_reward(reward, x, [1, 1, 1], dists=laws)
        assert got == pytest.approx(float(reward.instantaneous(x)))


def test_discrete_law_enumeration_against_monte_carlo():
    laws = [Distribution([0, 0.4, 1], [0.2, 0.5, 0.3]), Distribution([0.1, 0.9], [0.5, 0.5])]
    mu = [d.mean for d in laws]
    for reward in (Minimal(), TopL(1), ProportionalFairness()):
        exact = expected_reward(reward, mu, [1, 1], laws)
        mc, se = expected_reward_mc(reward, mu, [1, 1], laws, n=200_000, seed=1)
        assert abs(exact - mc) <= 4 * se


def test_enumeration_counts_collided_entries_as_zero():
    laws = [Distribution([0.5, 1.0], [0.5, 0.5]), Distribution([0.2, 0.6], [0.5, 0.5])]
    got = expected_reward(Linear(), [0.75, 0.4], [True, False], laws)
    assert got == pytest.approx(0.75)
    direct = enumerate_expectation(Minimal(), [laws[0], Distribution.point(0.0)])
    assert direct == 0.0


def test_check_monotone():
    assert check_monotone(Linear(), 200)["passed"]
    assert check_monotone(Minimal(), 200)["passed"]
    broken = CustomReward("neg", lambda lam: -lam[..., 0])
    rep = check_monotone(broken, 200)
    assert not rep["passed"]
    ce = rep["counterexample"]
    assert ce["v_lam"] > ce["v_lam_prime"]


@pytest.mark.parametrize("reward", all_variants(), ids=lambda r: r.name)
def test_builtins_are_monotone(reward):
    assert check_monotone(reward, 500, seed=4)["passed"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_linear_lipschitz(a, b):
    a, b = np.array(a), np.array(b)
    r = Linear()
    assert abs(r.v(a) - r.v(b)) <= r.lipschitz_B(4) * np.max(np.abs(a - b)) + 1e-12


def test_threshold_has_no_lipschitz_constant():
    assert Threshold([0.5]).lipschitz_B(1) is None


def test_video_quality_curve():
    c = PiecewiseLinear([0, 0.2, 0.6, 1], [0, 0.5, 0.8, 0.9])
    assert c(np.array([0, 0.2, 0.6, 1])).tolist() == [0, 0.5, 0.8, 0.9]
    assert np.all(np.diff(c.slopes) <= 0)
    with pytest.raises(ValueError, match="non-increasing"):
        PiecewiseLinear([0, 0.5, 1], [0, 0.1, 1])
    with pytest.raises(ValueError):
        PiecewiseLinear([0.1, 1], [0, 1])


def test_top_l_instantaneous():
    assert TopL(2).instantaneous(np.array([0.1, 0.9, 0.5])) == pytest.approx(1.4)
    with pytest.raises(ValueError):
        TopL(4).instantaneous(np.array([0.1, 0.2]))


def test_make_reward_configs():
    assert isinstance(make_reward("linear"), Linear)
    r = make_reward({"name": "proportional_fairness", "epsilon": 0.1, "weights": [1, 2]})
    assert r.epsilon == 0.1 and r.weights.tolist() == [1, 2]
    vq = make_reward({"name": "video_quality", "curves": {"x": [0, 1], "y": [0, 1]}})
    assert vq.v(np.array([0.5, 0.5])) == pytest.approx(1.0)
    assert make_reward(r.config()).config() == r.config()
    with pytest.raises(ValueError, match="unknown reward"):
        make_reward("nope")
    with pytest.raises(ValueError, match="unexpected"):
        make_reward({"name": "minimal", "L": 3})
    assert set(REWARDS) == {"linear", "proportional_fairness", "minimal", "threshold",
                            "video_quality", "top_L", "max_min"}
