"""Adversarial embedding attacks: logits-level baselines and their feature-corruption variants.

Three integrations share one gradient interface:

* ``adv_emb`` family: random common/adjustable pixel split, cost adjustment on
  the adjustable group from the gradient at the common-embedded image, with
  the split growing until the detector is fooled.
* ``sps_enh`` family: iterative +-1 cover enhancement along the gradient, with
  message re-draws when the detector is confident.
* ``usgs`` family: several cost maps adjusted on the pixels with the largest
  gradient-to-cost ratio; the deceiving candidate closest to the cover wins.

The baseline gradient is that of the cross-entropy toward the cover label;
the feature variants use the corruption gradient of the target-layer
attribution objective.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import convolve2d

from .attribution import PathSpec, neuron_attribution
from .corruption import CorruptionObjective, corruption_gradient, critical_mask
from .costs import WET, CostMap
from .diffnet import KV_FILTER, Model, loss_gradient, stego_probability
from .imagecore import GrayImage, Rng, as_array
from .simulator import Payload, PayloadError, embed

# zero-sum high-pass bank used to compare candidate stegos with the cover
RESIDUAL_BANK = (
    KV_FILTER,
    np.array([[1.0, -1.0]]),
    np.array([[1.0], [-1.0]]),
    np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]),
)


@dataclass(frozen=True)
class AttackConfig:
    alpha: float = 2.0
    beta_step: float = 0.1
    steps: int = 50
    lambda_weight: float = 1.0
    tau: float = 0.5
    k: int | None = None            # SPS pixels per round; None means 1% of the image
    max_scrambles: int = 5
    rounds: int = 20
    n_candidates: int = 5
    usgs_fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    tap: str | None = None          # None: the model's designated target tap

    def __post_init__(self):
        object.__setattr__(self, "usgs_fractions", tuple(float(f) for f in self.usgs_fractions))
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")
        if not 0 < self.beta_step <= 1:
            raise ValueError("beta_step must lie in (0, 1]")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be non-negative")
        if self.k is not None and self.k < 0:
            raise ValueError("k must be non-negative")
        if self.max_scrambles < 0 or self.rounds < 0 or self.n_candidates < 0:
            raise ValueError("counts must be non-negative")
        if self.n_candidates > len(self.usgs_fractions):
            raise ValueError("need one region fraction per USGS candidate")
        if any(not 0 < f <= 1 for f in self.usgs_fractions):
            raise ValueError("region fractions must lie in (0, 1]")

    def betas(self) -> list[float]:
        out, k = [], 0
        while k * self.beta_step < 1.0 - 1e-12:
            out.append(k * self.beta_step)
            k += 1
        return out + [1.0]

    def enhance_count(self, n_pixels: int) -> int:
        return max(1, round(0.01 * n_pixels)) if self.k is None else self.k


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    stego: GrayImage
    deceived: bool
    beta_final: float
    method: str
    phi: float
    scrambles_used: int = 0         # SPS only; beta_final holds the round count there
    candidate_count: int = 0
    enhanced_cover: GrayImage | None = None
    diagnostics: dict = field(default_factory=dict)

    def record(self, cover_id: str, cover) -> dict:
        change = np.abs(self.stego.astype(np.int64) - as_array(cover, np.int64)).sum()
        return {"cover_id": cover_id, "method": self.method, "deceived": bool(self.deceived),
                "beta_final": float(self.beta_final), "phi": float(self.phi),
                "l1_change_count": int(change)}


# --- building blocks --------------------------------------------------------

def adjust_costs(cost: CostMap, grad, alpha: float) -> CostMap:
    """Make the direction that lowers the objective cheaper by alpha, the other dearer.

    g < 0: (rho+/alpha, rho-*alpha); g > 0: (rho+*alpha, rho-/alpha); g = 0: unchanged.
    WET entries stay WET and results are clamped to WET.
    """
    if not alpha > 1:
        raise ValueError("alpha must exceed 1")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != cost.shape:
        raise ValueError("gradient and cost shapes differ")
    rp, rm = cost.rho_plus, cost.rho_minus
    new_p = np.where(g < 0, rp / alpha, np.where(g > 0, rp * alpha, rp))
    new_m = np.where(g < 0, rm * alpha, np.where(g > 0, rm / alpha, rm))
    new_p = np.where(rp >= WET, WET, np.minimum(new_p, WET))
    new_m = np.where(rm >= WET, WET, np.minimum(new_m, WET))
    return CostMap(new_p, new_m)


def refresh_saturation(cost: CostMap, img) -> CostMap:
    """Re-apply the boundary rule (no +1 at 255, no -1 at 0) for a modified image."""
    x = as_array(img)
    return CostMap(np.where(x >= 255, WET, cost.rho_plus), np.where(x <= 0, WET, cost.rho_minus))


def residual_distance(cover, candidate, bank=RESIDUAL_BANK) -> float:
    """Sum over bank filters of the L1 norm of the filtered difference (full convolution)."""
    a, b = as_array(cover), as_array(candidate)
    if a.shape != b.shape:
        raise ValueError("images differ in size")
    d = b - a
    return float(sum(np.abs(convolve2d(d, f, mode="full")).sum() for f in bank))


def phi_of(model: Model, img) -> float:
    return float(stego_probability(model, [img])[0])


GradientFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def logits_gradient(model: Model) -> GradientFn:
    """Cross-entropy gradient toward the cover label; the path baseline is ignored."""
    def grad(x, baseline):
        return loss_gradient(model, x, target=0)[0]
    return grad


def corruption_gradient_fn(model: Model, cfg: AttackConfig) -> GradientFn:
    """Attribution along baseline -> x at the target tap, then the corruption gradient at x."""
    tap = cfg.tap or model.target_tap
    path = PathSpec(cfg.steps)

    def grad(x, baseline):
        attr = neuron_attribution(model, x, tap, path, baseline=baseline)
        obj = CorruptionObjective(attr, critical_mask(attr), cfg.lambda_weight)
        return corruption_gradient(model, x, obj)
    return grad


# --- ADV-EMB family ---------------------------------------------------------

def _adv_loop(cover, model, cost, payload, cfg, rng, gradient: GradientFn, method: str) -> AttackOutcome:
    x = as_array(cover)
    shape, n = x.shape, x.size
    m = payload.message_bits(n)
    msg = rng.child("message")
    conventional, conv_phi = None, None
    trace = []
    for k, beta in enumerate(cfg.betas()):
        n_adj = int(round(beta * n))
        adjustable = np.zeros(n, bool)
        adjustable[rng.child("partition", k).generator().permutation(n)[:n_adj]] = True
        adjustable = adjustable.reshape(shape)
        bits_common = (1.0 - beta) * m
        try:
            z, p_common = embed(x, cost.wet_outside(~adjustable), bits_common, msg.child("common"))
            if n_adj == 0:
                stego, h_adj = z, 0.0
            else:
                z_arr = as_array(z)
                g = gradient(z_arr, z_arr - adjustable)
                adjusted = adjust_costs(cost, np.where(adjustable, g, 0.0), cfg.alpha)
                stego, p_adj = embed(z, adjusted.wet_outside(adjustable), m - bits_common, msg.child("adjustable"))
                h_adj = p_adj.entropy()
        except PayloadError:
            trace.append({"beta": beta, "skipped": True})
            continue
        phi = phi_of(model, stego)
        trace.append({"beta": beta, "phi": phi, "entropy_common": p_common.entropy(),
                      "entropy_adjustable": h_adj, "message_bits": m})
        if conventional is None:
            conventional, conv_phi = stego, phi
        if phi < 0.5:
            return AttackOutcome(stego, True, beta, method, phi, diagnostics={"trace": trace})
    if conventional is None:
        raise PayloadError("payload does not fit the cover")
    return AttackOutcome(conventional, False, 1.0, method, conv_phi, diagnostics={"trace": trace})


def adv_emb(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
            rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _adv_loop(cover, model, cost, payload, cfg, rng or Rng(0), logits_gradient(model), "adv-emb")


def natias_adv_emb(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
                   rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _adv_loop(cover, model, cost, payload, cfg, rng or Rng(0), corruption_gradient_fn(model, cfg),
                     "natias-adv")


# --- SPS-ENH family ---------------------------------------------------------

def _sps_loop(cover, model, cost, payload, cfg, rng, gradient: GradientFn, method: str) -> AttackOutcome:
    x = as_array(cover, np.int64)
    m = payload.message_bits(x.size)
    k = cfg.enhance_count(x.size)

    def stego_for(e, draw):
        return embed(e, refresh_saturation(cost, e), m, rng.child("message", draw))[0]

    conventional = stego_for(x, 0)
    conv_phi = phi_of(model, conventional)
    if conv_phi < 0.5:
        return AttackOutcome(conventional, True, 0.0, method, conv_phi, enhanced_cover=GrayImage(x),
                             diagnostics={"rounds": 0})
    e = x.copy()
    touched = np.zeros(x.shape, bool)
    stego, phi, draw, scrambles = conventional, conv_phi, 0, 0
    for r in range(1, cfg.rounds + 1):
        if k == 0:
            break
        s = as_array(stego)
        g = np.where(touched, 0.0, gradient(s, s - 1.0)).ravel()
        order = np.argsort(-np.abs(g), kind="stable")[:k]
        order = order[g[order] != 0]
        if order.size == 0:
            break
        flat = e.reshape(-1)
        flat[order] = np.clip(flat[order] - np.sign(g[order]).astype(np.int64), 0, 255)
        touched.reshape(-1)[order] = True
        stego = stego_for(e, draw)
        phi = phi_of(model, stego)
        tries = 0
        while phi > cfg.tau and tries < cfg.max_scrambles:
            tries += 1
            draw += 1
            stego = stego_for(e, draw)
            phi = phi_of(model, stego)
        scrambles += tries
        if phi < 0.5:
            return AttackOutcome(stego, True, float(r), method, phi, scrambles, enhanced_cover=GrayImage(e),
                                 diagnostics={"rounds": r, "enhanced_pixels": int(touched.sum())})
    return AttackOutcome(conventional, False, float(cfg.rounds), method, conv_phi, scrambles,
                         enhanced_cover=GrayImage(x),
                         diagnostics={"rounds": cfg.rounds, "attempted_cover": GrayImage(e),
                                      "enhanced_pixels": int(touched.sum())})


def sps_enh(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
            rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _sps_loop(cover, model, cost, payload, cfg, rng or Rng(0), logits_gradient(model), "sps")


def natias_sps_enh(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
                   rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _sps_loop(cover, model, cost, payload, cfg, rng or Rng(0), corruption_gradient_fn(model, cfg),
                     "natias-sps")


# --- USGS family ------------------------------------------------------------

def _usgs(cover, model, cost, payload, cfg, rng, gradient: GradientFn, method: str) -> AttackOutcome:
    x = as_array(cover)
    n = x.size
    m = payload.message_bits(n)
    msg = rng.child("message")
    initial = embed(x, cost, m, msg)[0]
    candidates = []
    if cfg.n_candidates:
        s = as_array(initial)
        g = gradient(s, s - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            stat = np.abs(g) / (cost.rho_plus + cost.rho_minus)
        order = np.argsort(-np.nan_to_num(stat).ravel(), kind="stable")
        for frac in cfg.usgs_fractions[:cfg.n_candidates]:
            region = np.zeros(n, bool)
            region[order[:int(round(frac * n))]] = True
            g_region = np.where(region.reshape(x.shape), g, 0.0)
            candidates.append(embed(x, adjust_costs(cost, g_region, cfg.alpha), m, msg)[0])
    candidates.append(initial)
    phis = [phi_of(model, c) for c in candidates]
    fooled = [i for i, p in enumerate(phis) if p < 0.5]
    diag = {"phis": phis}
    if not fooled:
        return AttackOutcome(initial, False, 0.0, method, phis[-1], candidate_count=len(candidates),
                             diagnostics=diag)
    dist = [residual_distance(x, candidates[i]) for i in fooled]
    best = fooled[int(np.argmin(dist))]
    diag["distances"] = dict(zip(fooled, dist))
    return AttackOutcome(candidates[best], True, 0.0, method, phis[best], candidate_count=len(candidates),
                         diagnostics=diag)


def usgs(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
         rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _usgs(cover, model, cost, payload, cfg, rng or Rng(0), logits_gradient(model), "usgs")


def natias_usgs(cover, model: Model, cost: CostMap, payload: Payload, cfg: AttackConfig | None = None,
                rng: Rng | None = None) -> AttackOutcome:
    cfg = cfg or AttackConfig()
    return _usgs(cover, model, cost, payload, cfg, rng or Rng(0), corruption_gradient_fn(model, cfg),
                 "natias-usgs")


METHODS = {
    "adv-emb": adv_emb,
    "natias-adv": natias_adv_emb,
    "sps": sps_enh,
    "natias-sps": natias_sps_enh,
    "usgs": usgs,
    "natias-usgs": natias_usgs,
}


def attack_method(name: str):
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown attack method {name!r}; choose from {sorted(METHODS)}") from None


def attack_many(method: str, covers, model: Model, costs, payload: Payload, cfg: AttackConfig | None = None,
                rng: Rng | None = None, jobs: int = 1) -> list[AttackOutcome]:
    """Attack every cover with its own derived stream; results come back in cover order."""
    fn = attack_method(method)
    rng = rng or Rng(0)
    covers, costs = list(covers), list(costs)

    def one(i):
        return fn(covers[i], model, costs[i], payload, cfg, rng.child("cover", i))

    if jobs <= 1:
        return [one(i) for i in range(len(covers))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(len(covers))))


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
