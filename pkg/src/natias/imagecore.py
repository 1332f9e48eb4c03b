"""Grayscale images, binary PGM I/O, seeded randomness and synthetic covers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

_MASK64 = (1 << 64) - 1


class PGMError(ValueError):
    """Raised for malformed or unsupported PGM data."""


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale image, stored row-major as a read-only ``(height, width)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"expected a non-empty 2-D pixel grid, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                raise ValueError("pixel values must be integers")
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.array(arr, dtype=np.uint8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def astype(self, dtype) -> np.ndarray:
        return self.pixels.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.shape, self.pixels.tobytes()))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


def as_array(img, dtype=np.float64) -> np.ndarray:
    """Pixel grid of a GrayImage (or any 2-D array) as a fresh array of ``dtype``."""
    if isinstance(img, GrayImage):
        return img.pixels.astype(dtype)
    return np.asarray(img, dtype=dtype).copy()


# --- randomness -------------------------------------------------------------

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _key_to_int(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    if isinstance(key, str):
        return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"unsupported rng key {key!r}")


@dataclass(frozen=True)
class Rng:
    """Immutable seed value.

    Every call to :meth:`generator` returns a fresh PCG64 stream, so a given
    ``Rng`` always produces the same draws. Independent sub-streams are
    derived with :meth:`child`, which folds keys into the seed with splitmix64.
    """

    seed: int

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys) -> "Rng":
        s = self.seed
        for key in keys:
            s = splitmix64(s ^ splitmix64(_key_to_int(key)))
        return Rng(s)

    def random(self, shape) -> np.ndarray:
        return self.generator().random(shape)


# --- PGM --------------------------------------------------------------------

def _header_fields(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated integers after the magic, skipping comments.

    Returns the integers and the offset of the first payload byte.
    """
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PGMError("malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PGMError("malformed PGM header")
    return fields, pos + 1


def load_pgm(data: bytes) -> GrayImage:
    """Decode a binary (P5) PGM with maxval 255."""
    if not data.startswith(b"P5"):
        raise PGMError("not a binary PGM (missing P5 magic)")
    (width, height, maxval), offset = _header_fields(data, 3)
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval}")
    if width <= 0 or height <= 0:
        raise PGMError("PGM dimensions must be positive")
    need = width * height
    payload = data[offset:offset + need]
    if len(payload) < need:
        raise PGMError(f"truncated pixel payload: expected {need} bytes, got {len(payload)}")
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(height, width))


def save_pgm(img: GrayImage) -> bytes:
    header = f"P5 {img.width} {img.height} 255\n".encode("ascii")
    return header + img.pixels.tobytes()


def read_pgm(path) -> GrayImage:
    return load_pgm(Path(path).read_bytes())


def write_pgm(path, img: GrayImage) -> None:
    Path(path).write_bytes(save_pgm(img))


def load_dataset_dir(path) -> tuple[list[str], list[GrayImage]]:
    """Read every ``*.pgm`` in a directory, in lexicographic file-name order."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix == ".pgm")
    return [p.stem for p in files], [read_pgm(p) for p in files]


def save_dataset_dir(path, images: Iterable[GrayImage], names: Iterable[str] | None = None) -> list[str]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = list(images)
    if names is None:
        names = [f"{i:05d}" for i in range(len(images))]
    names = list(names)
    for name, img in zip(names, images):
        write_pgm(path / f"{name}.pgm", img)
    return names


# --- synthetic covers -------------------------------------------------------

def synth_image(size: int, rng: Rng) -> GrayImage:
    """One textured cover: smooth field, a few soft edges, a textured patch and mild noise."""
    g = rng.generator()
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    sigma = g.uniform(size / 16, size / 6)
    field = ndimage.gaussian_filter(g.standard_normal((size, size)), sigma, mode="wrap")
    field = (field - field.mean()) / (field.std() + 1e-12)
    img = g.uniform(70, 185) + g.uniform(15, 35) * field

    for _ in range(g.integers(1, 4)):
        theta = g.uniform(0, np.pi)
        offset = g.uniform(-0.3, 0.3) * size
        d = (xx - size / 2) * np.cos(theta) + (yy - size / 2) * np.sin(theta) - offset
        step = g.uniform(20, 55) * g.choice([-1.0, 1.0])
        img += step / (1.0 + np.exp(-d / g.uniform(0.4, 1.2)))

    # textured patch: fine-grained noise inside a soft ellipse
    cy, cx = g.uniform(0.2, 0.8, size=2) * size
    ry, rx = g.uniform(0.1, 0.3, size=2) * size
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    weight = 1.0 / (1.0 + np.exp((inside - 1.0) * 6.0))
    texture = ndimage.gaussian_filter(g.standard_normal((size, size)), g.uniform(0.5, 1.0))
    texture /= texture.std() + 1e-12
    img += weight * g.uniform(2, 8) * texture

    img += g.uniform(0.0, 0.2) * g.standard_normal((size, size))
    return GrayImage(np.clip(np.round(img), 0, 255).astype(np.uint8))


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> list[GrayImage]:
    """``n`` deterministic synthetic covers of ``size`` x ``size`` pixels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    root = Rng(seed)
    return [synth_image(size, root.child("cover", i)) for i in range(n)]
