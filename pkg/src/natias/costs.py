"""Additive embedding costs (HILL, S-UNIWARD) and wet-cost handling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .imagecore import as_array

WET = 1e10

# 3x3 high-pass used by HILL
KB = np.array([[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]) / 4.0

# Daubechies-8 decomposition high-pass filter
_DB8_HPDF = np.array([
    -0.0544158422, 0.3128715909, -0.6756307363, 0.5853546837,
    0.0158291053, -0.2840155430, -0.0004724846, 0.1287474266,
    0.0173693010, -0.0440882539, -0.0139810279, 0.0087460940,
    0.0048703530, -0.0003917404, -0.0006754494, -0.0001174768,
])
_DB8_LPDF = ((-1.0) ** np.arange(16)) * _DB8_HPDF[::-1]
UNIWARD_FILTERS = (
    np.outer(_DB8_LPDF, _DB8_HPDF),  # LH: horizontal detail
    np.outer(_DB8_HPDF, _DB8_LPDF),  # HL: vertical detail
    np.outer(_DB8_HPDF, _DB8_HPDF),  # HH: diagonal detail
)
UNIWARD_SIGMA = 1.0


@dataclass(frozen=True, eq=False)
class CostMap:
    """Per-pixel costs of a +1 and a -1 change."""

    rho_plus: np.ndarray
    rho_minus: np.ndarray

    def __post_init__(self):
        rp = np.array(self.rho_plus, dtype=np.float64)
        rm = np.array(self.rho_minus, dtype=np.float64)
        if rp.shape != rm.shape or rp.ndim != 2:
            raise ValueError("rho_plus and rho_minus must be 2-D grids of equal shape")
        rp.setflags(write=False)
        rm.setflags(write=False)
        object.__setattr__(self, "rho_plus", rp)
        object.__setattr__(self, "rho_minus", rm)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho_plus.shape

    def wet_outside(self, keep: np.ndarray) -> "CostMap":
        """Copy with both directions set to WET wherever ``keep`` is False."""
        keep = np.asarray(keep, dtype=bool)
        return CostMap(np.where(keep, self.rho_plus, WET), np.where(keep, self.rho_minus, WET))

    def __eq__(self, other):
        if not isinstance(other, CostMap):
            return NotImplemented
        return (np.array_equal(self.rho_plus, other.rho_plus)
                and np.array_equal(self.rho_minus, other.rho_minus))


def _finish(rho: np.ndarray, pixels: np.ndarray) -> CostMap:
    rho = np.where(np.isnan(rho), WET, np.minimum(rho, WET))
    rho_plus = np.where(pixels == 255, WET, rho)
    rho_minus = np.where(pixels == 0, WET, rho)
    return CostMap(rho_plus, rho_minus)


def _box_mean(x: np.ndarray, size: int) -> np.ndarray:
    # direct summation (not running sums) so that constant inputs average exactly
    return ndimage.correlate(x, np.ones((size, size)), mode="reflect") / float(size * size)


def hill_cost(img) -> CostMap:
    """HILL: KB residual, 3x3 mean of its magnitude, reciprocal, 15x15 mean."""
    x = as_array(img)
    residual = ndimage.correlate(x, KB, mode="reflect")
    xi = _box_mean(np.abs(residual), 3)
    with np.errstate(divide="ignore"):
        suit = np.minimum(1.0 / xi, WET)
    rho = _box_mean(suit, 15)
    return _finish(rho, as_array(img, np.int64))


def suniward_cost(img, sigma: float = UNIWARD_SIGMA) -> CostMap:
    """S-UNIWARD additive approximation.

    The cost of pixel (i, j) is ``sum_k sum_{a,b} |F_k[a,b]| / (sigma + |W_k[i-a, j-b]|)``,
    i.e. the total relative change of every directional wavelet coefficient
    whose support covers the pixel. The image is padded by symmetric
    mirroring before filtering.
    """
    x = as_array(img)
    h, w = x.shape
    pad = 16
    padded = np.pad(x, pad, mode="symmetric")
    rho = np.zeros_like(x)
    for f in UNIWARD_FILTERS:
        coeff = signal.fftconvolve(padded, f[::-1, ::-1], mode="valid")
        xi = signal.fftconvolve(1.0 / (sigma + np.abs(coeff)), np.abs(f), mode="valid")
        rho += xi[1:h + 1, 1:w + 1]
    return _finish(rho, as_array(img, np.int64))


COST_FUNCTIONS = {"hill": hill_cost, "suniward": suniward_cost}


def cost_function(name: str):
    try:
        return COST_FUNCTIONS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown cost function {name!r}; choose from {sorted(COST_FUNCTIONS)}") from None


def sanitize(cost: CostMap) -> CostMap:
    """Reject NaN or negative entries and clamp everything above WET."""
    for name, grid in (("rho_plus", cost.rho_plus), ("rho_minus", cost.rho_minus)):
        if np.isnan(grid).any():
            raise ValueError(f"{name} contains NaN")
        if (grid < 0).any():
            raise ValueError(f"{name} contains negative costs")
    return CostMap(np.minimum(cost.rho_plus, WET), np.minimum(cost.rho_minus, WET))


# --- raw float dumps --------------------------------------------------------

def encode_grids(magic: bytes, grids) -> bytes:
    """16-byte header (8-byte magic, width, height as u32 LE) then float64 LE grids."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    grids = [np.asarray(g, dtype=np.float64) for g in grids]
    h, w = grids[0].shape
    if any(g.shape != (h, w) for g in grids):
        raise ValueError("all grids must share one shape")
    body = b"".join(g.astype("<f8").tobytes() for g in grids)
    return magic + struct.pack("<II", w, h) + body


def decode_grids(data: bytes, magic: bytes) -> list[np.ndarray]:
    if data[:8] != magic:
        raise ValueError(f"bad magic {data[:8]!r}, expected {magic!r}")
    w, h = struct.unpack("<II", data[8:16])
    body = data[16:]
    size = w * h * 8
    if size == 0 or len(body) % size:
        raise ValueError("payload size does not match the header dimensions")
    return [np.frombuffer(body[i:i + size], dtype="<f8").reshape(h, w).astype(np.float64)
            for i in range(0, len(body), size)]


def dump_cost(cost: CostMap) -> bytes:
    return encode_grids(b"NATCOST1", [cost.rho_plus, cost.rho_minus])


def load_cost(data: bytes) -> CostMap:
    grids = decode_grids(data, b"NATCOST1")
    if len(grids) != 2:
        raise ValueError("a cost dump holds exactly two grids")
    return CostMap(*grids)
