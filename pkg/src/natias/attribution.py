"""Integrated-gradients attribution to pixels and to tapped neurons.

Paths run from a baseline b to an endpoint e with right-endpoint samples
x_m = b + (m/M)(e - b), m = 1..M. The attributed scalar defaults to the
stego log-odds of the detector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .costs import decode_grids, encode_grids
from .diffnet import Model, batch_tap_gradients, to_batch
from .imagecore import GrayImage, as_array

ATTR_MAGIC = b"NATATTR1"
CHUNK = 64   # path samples per autograd batch


@dataclass(frozen=True)
class PathSpec:
    """Straight-line path: baseline = x + baseline_offset, endpoint = x (+1 when ``endpoint == "x+1"``)."""

    steps: int = 50
    endpoint: str = "x"
    baseline_offset: float = -1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("path needs at least one step")
        if self.endpoint not in ("x", "x+1"):
            raise ValueError("endpoint must be 'x' or 'x+1'")
        if self.baseline_offset == self.end_offset:
            raise ValueError("baseline and endpoint coincide")

    @property
    def end_offset(self) -> float:
        return 1.0 if self.endpoint == "x+1" else 0.0

    def resolve(self, img) -> tuple[np.ndarray, np.ndarray]:
        x = as_array(img)
        return x + self.baseline_offset, x + self.end_offset

    @property
    def tag(self) -> str:
        return f"baseline=x{self.baseline_offset:+g} endpoint={self.endpoint} M={self.steps}"


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per-neuron attribution plus the pieces it was assembled from.

    ``mean_grad`` is the path-averaged tap gradient, ``y_end`` / ``y_base``
    the tap activations at the two path ends.
    """

    values: np.ndarray
    tap: str
    steps: int
    baseline_tag: str
    mean_grad: np.ndarray | None = None
    y_end: np.ndarray | None = None
    y_base: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution contains non-finite values")

    @property
    def shape(self):
        return self.values.shape

    def scaled(self, factor: float) -> "AttributionMap":
        """Attribution of ``factor`` times the objective (activations unchanged)."""
        grad = None if self.mean_grad is None else self.mean_grad * factor
        return AttributionMap(self.values * factor, self.tap, self.steps, self.baseline_tag, grad,
                              self.y_end, self.y_base)


def path_samples(baseline: np.ndarray, endpoint: np.ndarray, steps: int) -> np.ndarray:
    frac = np.arange(1, steps + 1, dtype=np.float64) / steps
    return baseline[None] + frac[:, None, None] * (endpoint - baseline)[None]


def _sample_gradients(model: Model, samples: np.ndarray, tap: str, objective):
    """Tap activations and objective gradients at every path sample, in sample order."""
    acts, grads = [], []
    for start in range(0, samples.shape[0], CHUNK):
        x = torch.from_numpy(samples[start:start + CHUNK])[:, None]
        _, a, g = batch_tap_gradients(model, x, tap, objective)
        acts.append(a)
        grads.append(g)
    return np.concatenate(acts), np.concatenate(grads)


def _ordered_mean(stack: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(stack[0])
    for item in stack:   # accumulate in sample order
        acc += item
    return acc / stack.shape[0]


def _tap_values(model: Model, images: list, tap: str) -> list[np.ndarray]:
    model.check_tap(tap)
    with torch.no_grad():
        _, taps = model.run(to_batch(images))
    return [t.numpy().copy() for t in taps[tap]]


def _endpoints(img, path: PathSpec | None, baseline):
    path = path or PathSpec()
    if baseline is None:
        b, e = path.resolve(img)
        return b, e, path.steps, path.tag
    return as_array(baseline), as_array(img), path.steps, f"baseline=explicit endpoint=x M={path.steps}"


def input_attribution(model: Model, img, path: PathSpec | None = None, objective="logit",
                      baseline=None) -> np.ndarray:
    """Per-pixel IG: (e - b) * mean gradient over the path samples.

    ``baseline`` overrides the path rule with an explicit start image (endpoint = img).
    """
    b, e, steps, _ = _endpoints(img, path, baseline)
    _, grads = _sample_gradients(model, path_samples(b, e, steps), "input", objective)
    return (e - b) * _ordered_mean(grads)[0]


def neuron_attribution(model: Model, img, tap: str, path: PathSpec | None = None, objective="logit",
                       baseline=None) -> AttributionMap:
    """Decoupled neuron IG: (y(e) - y(b)) * mean over samples of d(objective)/dy."""
    model.check_tap(tap)
    b, e, steps, tag = _endpoints(img, path, baseline)
    _, grads = _sample_gradients(model, path_samples(b, e, steps), tap, objective)
    mean_grad = _ordered_mean(grads)
    y_end, y_base = _tap_values(model, [e, b], tap)
    return AttributionMap((y_end - y_base) * mean_grad, tap, steps, tag, mean_grad, y_end, y_base)


def coupled_neuron_attribution(model: Model, img, tap: str, path: PathSpec | None = None, objective="logit",
                               baseline=None) -> AttributionMap:
    """Coupled neuron IG: sum over samples of d(objective)/dy(x_m) * (y(x_m) - y(x_{m-1})), x_0 = b.

    Pairing each sample's gradient with the tap increment over its own step
    keeps the gradient/activation covariance that the decoupled form drops.
    """
    model.check_tap(tap)
    b, e, steps, tag = _endpoints(img, path, baseline)
    acts, grads = _sample_gradients(model, path_samples(b, e, steps), tap, objective)
    (y_base,) = _tap_values(model, [b], tap)
    prev = np.concatenate([y_base[None], acts[:-1]])
    values = np.zeros_like(y_base)
    for g, y, y0 in zip(grads, acts, prev):
        values += g * (y - y0)
    return AttributionMap(values, tap, steps, tag, _ordered_mean(grads), acts[-1], y_base)


# --- export -----------------------------------------------------------------

def project_channels(values: np.ndarray) -> np.ndarray:
    """Collapse an attribution grid to 2-D: max over channels; vectors become one row."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        return values.max(axis=0)
    if values.ndim == 2:
        return values
    return values.reshape(1, -1)


def heatmap(values: np.ndarray) -> GrayImage:
    """Affine map of the channel-projected grid onto [0, 255] (constant grids map to 0)."""
    grid = project_channels(values)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return GrayImage(np.zeros(grid.shape, np.uint8))
    return GrayImage(np.round((grid - lo) / (hi - lo) * 255.0))


def dump_attribution(values: np.ndarray) -> bytes:
    """Raw little-endian float64 dump of the channel-projected grid."""
    return encode_grids(ATTR_MAGIC, [project_channels(values)])


def load_attribution(data: bytes) -> np.ndarray:
    return decode_grids(data, ATTR_MAGIC)[0]
