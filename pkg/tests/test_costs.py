import numpy as np
import pytest

from natias.costs import (
    KB, UNIWARD_FILTERS, WET, CostMap, dump_cost, hill_cost, load_cost, sanitize, suniward_cost,
)
from natias.imagecore import GrayImage, Rng, synth_dataset


def _sym(i, n):
    # half-sample symmetric index: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def _correlate_sym(x, k):
    h, w = x.shape
    kh, kw = k.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            s = 0.0
            for a in range(kh):
                for b in range(kw):
                    s += k[a, b] * x[_sym(i + a - kh // 2, h), _sym(j + b - kw // 2, w)]
            out[i, j] = s
    return out


def hill_oracle(x):
    r = _correlate_sym(x, KB)
    xi = _correlate_sym(np.abs(r), np.ones((3, 3))) / 9.0
    with np.errstate(divide="ignore"):
        suit = np.minimum(1.0 / xi, WET)
    return np.minimum(_correlate_sym(suit, np.ones((15, 15))) / 225.0, WET)


def suniward_oracle(x, sigma=1.0):
    """Direct summation over the wavelet coefficients covering each pixel."""
    h, w = x.shape
    p = 16
    xp = np.pad(x, p, mode="symmetric")
    n_u = xp.shape[0] - 15
    n_v = xp.shape[1] - 15
    rho = np.zeros((h, w))
    for f in UNIWARD_FILTERS:
        coeff = np.zeros((n_u, n_v))
        for a in range(16):
            for b in range(16):
                coeff += f[a, b] * xp[a:a + n_u, b:b + n_v]
        recip = 1.0 / (sigma + np.abs(coeff))
        for a in range(16):
            for b in range(16):
                # coefficient (r - a, c - b) covers padded pixel (r, c) through tap (a, b)
                rho += abs(f[a, b]) * recip[p - a:p - a + h, p - b:p - b + w]
    return rho


def test_hill_constant_image_is_all_wet():
    cost = hill_cost(np.full((24, 24), 90))
    assert np.all(cost.rho_plus == WET) and np.all(cost.rho_minus == WET)


def test_hill_impulse_matches_oracle_and_minimum_is_near_impulse():
    x = np.full((32, 32), 100.0)
    x[16, 16] = 110.0
    got = hill_cost(x)
    want = hill_oracle(x)
    np.testing.assert_allclose(got.rho_plus, want, rtol=1e-12)
    i, j = np.unravel_index(np.argmin(want), want.shape)
    assert abs(i - 16) <= 7 and abs(j - 16) <= 7
    assert got.rho_plus.min() < WET


def test_hill_matches_oracle_on_texture():
    x = synth_dataset(1, 32, seed=3)[0].astype(np.float64)
    np.testing.assert_allclose(hill_cost(x).rho_plus, np.where(x == 255, WET, hill_oracle(x)), rtol=1e-10)


@pytest.mark.parametrize("fn", [hill_cost, suniward_cost])
def test_saturated_pixels_are_wet_in_blocked_direction(fn):
    x = synth_dataset(1, 32, seed=5)[0].astype(np.int64)
    x[3, 4] = 255
    x[10, 11] = 0
    cost = fn(x)
    assert cost.rho_plus[3, 4] == WET
    assert cost.rho_minus[10, 11] == WET
    assert cost.rho_minus[3, 4] < WET
    assert cost.rho_plus[10, 11] < WET


@pytest.mark.parametrize("fn", [hill_cost, suniward_cost])
def test_symmetric_costs_away_from_saturation(fn):
    img = synth_dataset(1, 48, seed=11)[0]
    cost = fn(img)
    free = (img.pixels > 0) & (img.pixels < 255)
    assert np.array_equal(cost.rho_plus[free], cost.rho_minus[free])
    assert np.all(cost.rho_plus > 0) and np.all(cost.rho_plus <= WET)


def test_suniward_constant_image_closed_form():
    cost = suniward_cost(np.full((32, 32), 100))
    expected = sum(np.abs(f).sum() for f in UNIWARD_FILTERS) / 1.0
    np.testing.assert_allclose(cost.rho_plus, expected, rtol=1e-9)


def test_suniward_matches_direct_summation_oracle():
    x = synth_dataset(1, 32, seed=9)[0].astype(np.float64)
    want = suniward_oracle(x)
    got = suniward_cost(x)
    free = (x > 0) & (x < 255)
    np.testing.assert_allclose(got.rho_plus[free], want[free], rtol=1e-9)


def test_suniward_prefers_texture():
    g = Rng(2).generator()
    x = np.full((32, 32), 120.0)
    x[:, 16:] += np.round(g.normal(0, 12, size=(32, 16)))
    want = suniward_oracle(x)
    flat = want[8:24, 2:6].mean()
    textured = want[8:24, 26:30].mean()
    assert textured < flat
    got = suniward_cost(x).rho_plus
    assert got[8:24, 26:30].max() < got[8:24, 2:6].min()


def test_translation_covariance_on_interior():
    big = synth_dataset(1, 128, seed=4)[0].astype(np.float64)
    dy, dx = 3, 5
    a = big[:100, :100]
    b = big[dy:dy + 100, dx:dx + 100]
    m = 10  # HILL reach is 1 + 1 + 7 pixels
    ha, hb = hill_cost(a).rho_plus, hill_cost(b).rho_plus
    np.testing.assert_array_equal(ha[m + dy:100 - m, m + dx:100 - m], hb[m:100 - m - dy, m:100 - m - dx])
    m = 31  # S-UNIWARD reach is 15 + 15 pixels
    sa, sb = suniward_cost(a).rho_plus, suniward_cost(b).rho_plus
    np.testing.assert_allclose(sa[m + dy:100 - m, m + dx:100 - m], sb[m:100 - m - dy, m:100 - m - dx], rtol=1e-10)


def test_sanitize():
    c = CostMap(np.array([[1e12, 2.0]]), np.array([[3.0, 4.0]]))
    s = sanitize(c)
    assert s.rho_plus[0, 0] == WET and s.rho_plus[0, 1] == 2.0
    ok = CostMap(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]))
    assert sanitize(ok) == ok
    with pytest.raises(ValueError):
        sanitize(CostMap(np.array([[-1.0]]), np.array([[1.0]])))
    with pytest.raises(ValueError):
        sanitize(CostMap(np.array([[1.0]]), np.array([[np.nan]])))


def test_cost_dump_round_trip():
    cost = suniward_cost(synth_dataset(1, 16, seed=1)[0])
    data = dump_cost(cost)
    assert data[:8] == b"NATCOST1"
    assert int.from_bytes(data[8:12], "little") == 16
    assert len(data) == 16 + 2 * 16 * 16 * 8
    assert load_cost(data) == cost


def test_accepts_gray_image():
    img = synth_dataset(1, 16, seed=1)[0]
    assert hill_cost(img) == hill_cost(img.pixels)
    assert isinstance(img, GrayImage)
