import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from natias.costs import WET, CostMap, suniward_cost
from natias.imagecore import GrayImage, Rng, synth_dataset
from natias.simulator import (
    LOG2_3, Payload, PayloadError, ProbMap, fit_lambda, probs_from_costs, simulate_embed,
    ternary_entropy,
)


def test_ternary_entropy_values():
    assert ternary_entropy(1 / 3, 1 / 3) == pytest.approx(1.584962500721156, abs=1e-12)
    assert ternary_entropy(0.0, 0.0) == 0.0
    assert ternary_entropy(0.25, 0.25) == pytest.approx(1.5, abs=1e-12)
    assert ternary_entropy(1.0, 0.0) == 0.0


def test_gibbs_probabilities():
    p = probs_from_costs(CostMap(np.zeros((2, 2)), np.zeros((2, 2))), 3.7)
    np.testing.assert_allclose(p.p_plus, 1 / 3, rtol=1e-15)
    np.testing.assert_allclose(p.p_minus, 1 / 3, rtol=1e-15)

    # lambda = ln 2: weights 1/2 and 1/4, normaliser 7/4 -> 2/7 and 1/7
    p = probs_from_costs(CostMap(np.array([[1.0]]), np.array([[2.0]])), math.log(2))
    assert p.p_plus[0, 0] == pytest.approx(2 / 7, rel=1e-14)
    assert p.p_minus[0, 0] == pytest.approx(1 / 7, rel=1e-14)

    p = probs_from_costs(CostMap(np.array([[WET]]), np.array([[1.0]])), 1e-9)
    assert p.p_plus[0, 0] == 0.0 and p.p_minus[0, 0] > 0


def test_fit_lambda_empty_message():
    cost = suniward_cost(synth_dataset(1, 16, seed=0)[0])
    lam, probs = fit_lambda(cost, bits=0)
    assert math.isinf(lam)
    assert not probs.p_plus.any() and not probs.p_minus.any()


def test_fit_lambda_uniform_costs_matches_scalar_root():
    cost = CostMap(np.ones((64, 64)), np.ones((64, 64)))
    lam, probs = fit_lambda(cost, Payload(0.4))
    m = Payload(0.4).message_bits(64 * 64)
    assert abs(probs.entropy() - m) <= 1e-3
    assert np.ptp(probs.p_plus) == 0 and np.ptp(probs.p_minus) == 0

    def per_pixel(l):
        q = math.exp(-l) / (1 + 2 * math.exp(-l))
        return ternary_entropy(q, q) - m / 4096

    ref = brentq(per_pixel, 1e-6, 50, xtol=1e-14)
    assert lam == pytest.approx(ref, rel=1e-5)


def test_fit_lambda_maximal_payload_on_zero_costs():
    cost = CostMap(np.zeros((8, 8)), np.zeros((8, 8)))
    lam, probs = fit_lambda(cost, bits=64 * LOG2_3)
    assert lam <= 1e-8
    np.testing.assert_allclose(probs.p_plus, 1 / 3)


def test_fit_lambda_infeasible():
    cost = CostMap(np.full((4, 4), WET), np.full((4, 4), WET))
    with pytest.raises(PayloadError):
        fit_lambda(cost, bits=1)
    half = CostMap(np.ones((4, 4)), np.full((4, 4), WET))
    with pytest.raises(PayloadError):
        fit_lambda(half, bits=17)
    fit_lambda(half, bits=15.9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 0.2, 0.3, 0.4]))
def test_fit_lambda_hits_payload(seed, bpp):
    g = Rng(seed).generator()
    rho = np.exp(g.normal(0, 2, size=(32, 32)))
    rho[g.random((32, 32)) < 0.05] = WET
    cost = CostMap(rho, rho * g.uniform(0.5, 2, size=rho.shape))
    m = Payload(bpp).message_bits(rho.size)
    _, probs = fit_lambda(cost, Payload(bpp))
    assert abs(probs.entropy() - m) <= max(1e-3, 1e-8 * m)


def test_entropy_strictly_decreasing_in_lambda():
    cost = suniward_cost(synth_dataset(1, 32, seed=2)[0])
    lams = np.geomspace(1e-3, 1e2, 60)
    h = [probs_from_costs(cost, l).entropy() for l in lams]
    assert all(a > b for a, b in zip(h, h[1:]))


def test_simulate_embed_zero_probs_is_identity():
    img = synth_dataset(1, 16, seed=1)[0]
    assert simulate_embed(img, ProbMap.zeros(img.shape), Rng(3)) == img


def test_simulate_embed_deterministic_and_bounded():
    img = synth_dataset(1, 64, seed=1)[0]
    _, probs = fit_lambda(suniward_cost(img), Payload(0.4))
    a = simulate_embed(img, probs, Rng(42))
    b = simulate_embed(img, probs, Rng(42))
    assert a == b
    assert a != simulate_embed(img, probs, Rng(43))
    diff = a.astype(np.int64) - img.astype(np.int64)
    assert np.abs(diff).max() <= 1


def test_simulate_embed_frequencies():
    n = 1000
    img = GrayImage(np.full((n, n), 128, np.uint8))
    probs = ProbMap(np.full((n, n), 0.1), np.full((n, n), 0.1))
    diff = simulate_embed(img, probs, Rng(5)).astype(np.int64) - 128
    se = math.sqrt(0.1 * 0.9 / n**2)
    assert abs((diff == 1).mean() - 0.1) < 3 * se
    assert abs((diff == -1).mean() - 0.1) < 3 * se


def test_simulate_embed_respects_wet_directions():
    x = np.array([[0, 255, 0, 255]] * 64, dtype=np.uint8)
    img = GrayImage(x)
    cost = CostMap(np.where(x == 255, WET, 0.0), np.where(x == 0, WET, 0.0))
    probs = probs_from_costs(cost, 1.0)
    for seed in range(20):
        s = simulate_embed(img, probs, Rng(seed)).astype(np.int64)
        assert np.all(s[x == 0] >= 0) and np.all(s[x == 0] <= 1)
        assert np.all(s[x == 255] >= 254)
