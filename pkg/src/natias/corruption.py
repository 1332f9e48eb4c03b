"""Critical-neuron selection and the feature-corruption objective.

The attribution at a candidate image is A(x) = (y(x) - y_base) * g_bar, where
g_bar (the path-averaged tap gradient) is held fixed. Under that convention
the total loss  L = sum_{mask} A(x) + lam * sum(A0 * y(x))  is linear in the
tap activations y(x), and its pixel gradient is the vector-Jacobian product
J_y(x)^T (mask * g_bar + lam * A0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .attribution import AttributionMap
from .diffnet import Model, batch_tap_gradients, to_batch


@dataclass(frozen=True, eq=False)
class NeuronMask:
    selected: np.ndarray
    threshold: float

    @property
    def count(self) -> int:
        return int(self.selected.sum())


@dataclass(frozen=True, eq=False)
class CorruptionObjective:
    attribution: AttributionMap
    mask: NeuronMask
    lambda_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be non-negative")
        if self.mask.selected.shape != self.attribution.shape:
            raise ValueError("mask and attribution shapes differ")
        if self.attribution.mean_grad is None or self.attribution.y_base is None:
            raise ValueError("the objective needs an attribution carrying mean_grad and y_base")

    @property
    def tap(self) -> str:
        return self.attribution.tap

    def pullback_weights(self) -> np.ndarray:
        """d(total loss)/dy under the stop-gradient convention."""
        a = self.attribution
        return self.mask.selected * a.mean_grad + self.lambda_weight * a.values


def _values(a) -> np.ndarray:
    return np.asarray(a.values if isinstance(a, AttributionMap) else a, dtype=np.float64)


def critical_mask(attribution) -> NeuronMask:
    """Neurons with |A| above the median of |A|; all of them if none is strictly above."""
    a = np.abs(_values(attribution))
    if not np.all(np.isfinite(a)):
        raise ValueError("attribution must be finite")
    t = float(np.median(a))
    selected = a > t
    if not selected.any():
        selected = a >= t
    return NeuronMask(selected, t)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def attribution_loss(a_at_point, mask: NeuronMask) -> float:
    """Sum of the masked attribution values."""
    a = _values(a_at_point)
    _same_shape(a, mask.selected)
    return float(a[mask.selected].sum())


def feature_loss(attribution, y_at_point) -> float:
    """sum(A * y): pushes down positively attributed activations, up negative ones."""
    a = _values(attribution)
    y = np.asarray(y_at_point, dtype=np.float64)
    _same_shape(a, y)
    return float((a * y).sum())


def combine(l_att: float, l_fea: float, lambda_weight: float = 1.0) -> float:
    return l_att + lambda_weight * l_fea


def attribution_at(obj: CorruptionObjective, y_at_point) -> np.ndarray:
    """A at a candidate image with the path-averaged gradient frozen."""
    a = obj.attribution
    y = np.asarray(y_at_point, dtype=np.float64)
    _same_shape(y, a.y_base)
    return (y - a.y_base) * a.mean_grad


def total_loss(obj: CorruptionObjective, y_at_point) -> float:
    """L_att(y) + lambda * L_fea(y) for tap activations ``y_at_point`` of the candidate."""
    l_att = attribution_loss(attribution_at(obj, y_at_point), obj.mask)
    return combine(l_att, feature_loss(obj.attribution, y_at_point), obj.lambda_weight)


def corruption_gradient(model: Model, img, obj: CorruptionObjective) -> np.ndarray:
    """Pixel gradient of the total loss at ``img`` (stop-gradient on the path-mean factor)."""
    w = obj.pullback_weights()
    x = to_batch(img)
    if w.size == 1:
        # one-neuron tap: the pullback is a scaled gradient of that neuron; computing
        # it this way shares the exact gradient array with other log-odds attacks
        g = batch_tap_gradients(model, x, "input", _tap_scalar(obj.tap))[2][0, 0]
        return float(w.reshape(-1)[0]) * g
    wt = torch.from_numpy(w)[None]

    def weighted(logits, taps):
        return (taps[obj.tap] * wt).flatten(1).sum(dim=1)

    return batch_tap_gradients(model, x, "input", weighted)[2][0, 0]


def _tap_scalar(tap: str):
    if tap == "logit":
        return "logit"
    return lambda logits, taps: taps[tap].flatten(1)[:, 0]
