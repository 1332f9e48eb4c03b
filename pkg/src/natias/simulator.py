"""Ternary embedding simulator: Gibbs change probabilities at a target payload."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .costs import WET, CostMap
from .imagecore import GrayImage, Rng, as_array

LOG2_3 = math.log2(3.0)
LAMBDA_LO = 1e-8
MAX_BISECTIONS = 200


class PayloadError(ValueError):
    """The requested payload cannot be carried by the cost map."""


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Payload:
    bits_per_pixel: float

    def __post_init__(self):
        if not 0.0 <= self.bits_per_pixel <= LOG2_3:
            raise ValueError(f"payload must lie in [0, log2(3)], got {self.bits_per_pixel}")

    def message_bits(self, n_pixels: int) -> int:
        return int(math.floor(self.bits_per_pixel * n_pixels + 0.5))


@dataclass(frozen=True, eq=False)
class ProbMap:
    p_plus: np.ndarray
    p_minus: np.ndarray

    @property
    def shape(self):
        return self.p_plus.shape

    def entropy(self) -> float:
        return float(ternary_entropy(self.p_plus, self.p_minus).sum())

    @classmethod
    def zeros(cls, shape) -> "ProbMap":
        return cls(np.zeros(shape), np.zeros(shape))


def ternary_entropy(p_plus, p_minus):
    """Entropy in bits of a {+1, -1, 0} change with the given probabilities (0 log 0 = 0)."""
    p_plus = np.asarray(p_plus, dtype=np.float64)
    p_minus = np.asarray(p_minus, dtype=np.float64)
    p_zero = np.clip(1.0 - p_plus - p_minus, 0.0, 1.0)
    h = (entr(p_plus) + entr(p_minus) + entr(p_zero)) / math.log(2.0)
    return h if h.ndim else float(h)


def probs_from_costs(cost: CostMap, lam: float) -> ProbMap:
    """Gibbs probabilities ``exp(-lam*rho)/(1 + exp(-lam*rho+) + exp(-lam*rho-))``.

    A WET direction has weight exactly zero.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if math.isinf(lam):
        return ProbMap.zeros(cost.shape)
    wp = np.where(cost.rho_plus >= WET, 0.0, np.exp(-lam * cost.rho_plus))
    wm = np.where(cost.rho_minus >= WET, 0.0, np.exp(-lam * cost.rho_minus))
    z = 1.0 + wp + wm
    return ProbMap(wp / z, wm / z)


def capacity(cost: CostMap) -> float:
    """Largest carriable payload in bits (lambda -> 0)."""
    free = (cost.rho_plus < WET).astype(np.int64) + (cost.rho_minus < WET).astype(np.int64)
    return float(np.count_nonzero(free == 2) * LOG2_3 + np.count_nonzero(free == 1))


def fit_lambda(cost: CostMap, payload: Payload | None = None, *, bits: float | None = None):
    """Find lambda so that the total ternary entropy equals the message length.

    Pass either a :class:`Payload` (bits = round(bpp * n)) or an explicit
    real-valued ``bits``. Returns ``(lam, ProbMap)``; an empty message gives
    ``lam = inf`` and all-zero probabilities.
    """
    if (payload is None) == (bits is None):
        raise TypeError("pass exactly one of payload or bits")
    m = float(payload.message_bits(cost.rho_plus.size) if bits is None else bits)
    if m < 0:
        raise PayloadError("negative message length")
    if m == 0:
        return math.inf, ProbMap.zeros(cost.shape)
    tol = max(1e-3, 1e-8 * m)
    cap = capacity(cost)
    if m > cap + tol:
        raise PayloadError(f"payload of {m:.1f} bits exceeds capacity {cap:.1f}")

    def total(lam):
        probs = probs_from_costs(cost, lam)
        return probs.entropy(), probs

    lo = LAMBDA_LO
    h_lo, p_lo = total(lo)
    while h_lo < m - tol and lo > 1e-300:
        lo *= 1e-8
        h_lo, p_lo = total(lo)
    if abs(h_lo - m) <= tol:
        return lo, p_lo
    if h_lo < m:
        raise PayloadError(f"payload of {m:.1f} bits is not reachable")

    hi = 1.0
    h_hi, p_hi = total(hi)
    while h_hi > m:
        hi *= 2.0
        if math.isinf(hi):
            raise ConvergenceError("could not bracket lambda")
        h_hi, p_hi = total(hi)
    if abs(h_hi - m) <= tol:
        return hi, p_hi

    for _ in range(MAX_BISECTIONS):
        mid = math.sqrt(lo * hi) if hi > 4.0 * lo else 0.5 * (lo + hi)
        h_mid, p_mid = total(mid)
        if abs(h_mid - m) <= tol:
            return mid, p_mid
        if h_mid > m:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError(f"bisection did not converge (|H - m| > {tol})")


def simulate_embed(cover, probs: ProbMap, rng: Rng) -> GrayImage:
    """Apply independent +1 / -1 changes drawn with ``probs`` (row-major uniforms from ``rng``)."""
    x = as_array(cover, np.int64)
    if probs.shape != x.shape:
        raise ValueError("probability map does not match the cover size")
    u = rng.random(x.shape)
    change = (u < probs.p_plus).astype(np.int64) - (u >= 1.0 - probs.p_minus).astype(np.int64)
    return GrayImage(np.clip(x + change, 0, 255))


def embed(cover, cost: CostMap, bits: float, rng: Rng):
    """Fit lambda for ``bits`` and sample a stego. Returns ``(stego, probs)``."""
    _, probs = fit_lambda(cost, bits=bits)
    return simulate_embed(cover, probs, rng), probs
