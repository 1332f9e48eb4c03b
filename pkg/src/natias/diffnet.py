"""Desk-scale CNN steganalyzers with tapped activations, gradients and training.

Differentiation is delegated to torch autograd in float64. A model is an
ordered list of named stages; the activation after each stage is a *tap*.
Two pseudo-taps complete the list: ``input`` (the pixel grid, in pixel units)
and ``logit`` (the stego log-odds, logits[1] - logits[0]), which is also the
scalar that attribution explains.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import GrayImage, Rng, as_array

torch.set_default_dtype(torch.float64)

KV_FILTER = np.array([
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
], dtype=np.float64) / 12.0

CHECKPOINT_MAGIC = b"NATNET1\0"
ACTIVATIONS = ("softplus", "tanh", "relu")


class TapError(KeyError):
    pass


# --- architecture -----------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    activation: str = "softplus"
    pool: tuple[bool, ...] | None = None   # None: 2x2 average pooling after every block
    kernel: int = 3
    input_size: int = 64
    target_tap: str = "block3"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        pool = (True,) * len(self.widths) if self.pool is None else tuple(bool(p) for p in self.pool)
        object.__setattr__(self, "pool", pool)
        if not 3 <= len(self.widths) <= 5:
            raise ValueError("a model needs between 3 and 5 convolution blocks")
        if any(w < 1 for w in self.widths):
            raise ValueError("channel widths must be positive")
        if len(self.pool) != len(self.widths):
            raise ValueError("pool schedule must have one entry per block")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be a positive odd number")
        if self.input_size % (2 ** sum(self.pool)) or self.input_size < 2 ** sum(self.pool):
            raise ValueError("input size must be divisible by the total pooling factor")
        if self.target_tap not in self.tap_names():
            raise ValueError(f"unknown target tap {self.target_tap!r}")

    def tap_names(self) -> list[str]:
        blocks = [f"block{i + 1}" for i in range(len(self.widths))]
        return ["input", "hpf", *blocks, "gap", "logits", "logit"]

    def to_text(self) -> str:
        return "".join([
            f"widths = {','.join(map(str, self.widths))}\n",
            f"activation = {self.activation}\n",
            f"pool = {','.join(str(int(p)) for p in self.pool)}\n",
            f"kernel = {self.kernel}\n",
            f"input_size = {self.input_size}\n",
            f"target_tap = {self.target_tap}\n",
        ])

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in known:
                raise ValueError(f"unknown architecture key {key!r}")
            values[key] = value
        kw = {}
        if "widths" in values:
            kw["widths"] = tuple(int(v) for v in values["widths"].split(","))
        if "pool" in values:
            kw["pool"] = tuple(bool(int(v)) for v in values["pool"].split(","))
        for key in ("kernel", "input_size"):
            if key in values:
                kw[key] = int(values[key])
        for key in ("activation", "target_tap"):
            if key in values:
                kw[key] = values[key]
        return cls(**kw)


class FrontFilter(nn.Module):
    """Fixed KV high-pass on pixels scaled to [0, 1]; output is in pixel-residual units."""

    def __init__(self):
        super().__init__()
        self.register_buffer("kernel", torch.tensor(KV_FILTER)[None, None])

    def forward(self, x):
        return F.conv2d(x / 255.0, self.kernel, padding=2) * 255.0


class Block(nn.Module):
    def __init__(self, cin, cout, kernel, activation, pool):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, padding=kernel // 2)
        self.activation = activation
        self.pool = pool

    def forward(self, x):
        x = self.conv(x)
        if self.activation == "softplus":
            x = F.softplus(x)
        elif self.activation == "tanh":
            x = torch.tanh(x)
        else:
            x = F.relu(x)
        return F.avg_pool2d(x, 2) if self.pool else x


class GlobalPool(nn.Module):
    def forward(self, x):
        return x.mean(dim=(2, 3))


class Model(nn.Module):
    """Ordered named stages; every stage output is a tap.

    ``stages`` take a ``(B, 1, H, W)`` pixel tensor at the front and must end
    in a stage producing two logits per image.
    """

    def __init__(self, stages: Sequence[tuple[str, nn.Module]], config: ArchConfig | None = None,
                 target_tap: str | None = None):
        super().__init__()
        self.stage_names = [name for name, _ in stages]
        if len(set(self.stage_names)) != len(self.stage_names):
            raise ValueError("stage names must be unique")
        if {"input", "logit"} & set(self.stage_names):
            raise ValueError("'input' and 'logit' are reserved tap names")
        self.stages = nn.ModuleDict(dict(stages))
        self.config = config
        self.target_tap = target_tap or (config.target_tap if config else self.stage_names[-2])
        if self.target_tap not in self.tap_names():
            raise ValueError(f"unknown target tap {self.target_tap!r}")

    def tap_names(self) -> list[str]:
        return ["input", *self.stage_names, "logit"]

    def check_tap(self, tap: str) -> None:
        if tap not in self.tap_names():
            raise TapError(f"unknown tap {tap!r}; available: {self.tap_names()}")

    def run(self, x: torch.Tensor, offsets: dict | None = None):
        """Forward pass returning ``(logits, taps)``.

        ``offsets`` maps tap names to tensors added to that activation before
        the rest of the network sees it (used to differentiate at a tap).
        """
        offsets = offsets or {}
        if x.dim() == 3:
            x = x[:, None]
        taps = {}
        if "input" in offsets:
            x = x + offsets["input"]
        taps["input"] = x
        for name in self.stage_names:
            x = self.stages[name](x)
            if name in offsets:
                x = x + offsets[name]
            taps[name] = x
        logits = x
        logit = (logits[:, 1] - logits[:, 0])[:, None]
        if "logit" in offsets:
            logit = logit + offsets["logit"]
        taps["logit"] = logit
        return logits, taps

    def forward(self, x):
        return self.run(x)[0]

    def tap_shape(self, tap: str, input_shape: tuple[int, int]) -> tuple[int, ...]:
        self.check_tap(tap)
        with torch.no_grad():
            _, taps = self.run(torch.zeros((1, 1, *input_shape)))
        return tuple(taps[tap].shape[1:])

    def flat_params(self) -> np.ndarray:
        if not list(self.parameters()):
            return np.zeros(0)
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy().copy()

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(p.numel() for p in self.parameters())
        if flat.size != total:
            raise ValueError(f"expected {total} parameters, got {flat.size}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(flat[offset:offset + n].copy()).reshape(p.shape))
                offset += n


def build_model(arch: ArchConfig | None = None, seed: int = 0) -> Model:
    """Construct the CNN family member described by ``arch``.

    Trainable weights are drawn uniformly in +-sqrt(3 / fan_in) from a PCG64
    stream, so initialisation does not depend on torch's RNG.
    """
    arch = arch or ArchConfig()
    stages: list[tuple[str, nn.Module]] = [("hpf", FrontFilter())]
    cin = 1
    for i, (w, pool) in enumerate(zip(arch.widths, arch.pool)):
        stages.append((f"block{i + 1}", Block(cin, w, arch.kernel, arch.activation, pool)))
        cin = w
    stages.append(("gap", GlobalPool()))
    stages.append(("logits", nn.Linear(cin, 2)))
    model = Model(stages, config=arch)

    g = Rng(seed).child("init").generator()
    with torch.no_grad():
        for p in model.parameters():
            fan_in = p.shape[1] * int(np.prod(p.shape[2:])) if p.dim() > 1 else None
            if fan_in is None:   # bias: use the fan-in of its layer
                fan_in = _bias_fan_in(model, p)
            bound = math.sqrt(3.0 / fan_in)
            p.copy_(torch.from_numpy(g.uniform(-bound, bound, size=tuple(p.shape))))
    return model


def _bias_fan_in(model: Model, bias: torch.Tensor) -> int:
    for module in model.modules():
        if getattr(module, "bias", None) is bias:
            w = module.weight
            return w.shape[1] * int(np.prod(w.shape[2:]))
    return 1


# --- evaluation and gradients -----------------------------------------------

@dataclass(frozen=True)
class Verdict:
    phi: float
    label: int

    @classmethod
    def from_phi(cls, phi: float) -> "Verdict":
        return cls(float(phi), int(phi >= 0.5))


def to_batch(images) -> torch.Tensor:
    """Stack images (GrayImage or real-valued pixel arrays) into a ``(B, 1, H, W)`` tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images[:, None] if images.dim() == 3 else images[None, None]
    if isinstance(images, (GrayImage, np.ndarray)) and np.ndim(as_array(images)) == 2:
        images = [images]
    arr = np.stack([as_array(im) for im in images])
    return torch.from_numpy(arr)[:, None]


def _check_size(model: Model, x: torch.Tensor) -> None:
    cfg = model.config
    if cfg is not None and tuple(x.shape[-2:]) != (cfg.input_size, cfg.input_size):
        raise ValueError(f"model expects {cfg.input_size}x{cfg.input_size} inputs, got {tuple(x.shape[-2:])}")


def probabilities(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Softmax output per image, shape ``(B, 2)``: [cover, stego]."""
    x = to_batch(images)
    _check_size(model, x)
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            out.append(torch.softmax(model(x[i:i + batch_size]), dim=1))
    return torch.cat(out).numpy()


def stego_probability(model: Model, images, batch_size: int = 256) -> np.ndarray:
    return probabilities(model, images, batch_size)[:, 1]


def predict(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Labels (1 = stego) per image."""
    return (stego_probability(model, images, batch_size) >= 0.5).astype(np.int64)


def forward(model: Model, img):
    """Verdict and tap activations (numpy, batch axis dropped) for one image."""
    x = to_batch(img)
    _check_size(model, x)
    with torch.no_grad():
        logits, taps = model.run(x)
    phi = torch.softmax(logits, dim=1)[0, 1].item()
    return Verdict.from_phi(phi), {k: v[0].numpy().copy() for k, v in taps.items()}


def _objective_fn(objective) -> Callable:
    """Per-image scalar objective from logits and taps.

    ``"logit"``: stego log-odds; ``"loss"`` / ``("loss", t)``: cross-entropy
    at target label t (default 0, i.e. "cover"); ``"stego_logit"`` /
    ``"cover_logit"``: a raw logit; callables receive ``(logits, taps)``.
    """
    if callable(objective):
        return objective
    if objective == "logit":
        return lambda logits, taps: taps["logit"][:, 0]
    if objective == "stego_logit":
        return lambda logits, taps: logits[:, 1]
    if objective == "cover_logit":
        return lambda logits, taps: logits[:, 0]
    if objective == "loss" or (isinstance(objective, tuple) and objective[0] == "loss"):
        target = 0 if objective == "loss" else int(objective[1])
        return lambda logits, taps: F.cross_entropy(
            logits, torch.full((logits.shape[0],), target, dtype=torch.long), reduction="none")
    raise ValueError(f"unknown objective {objective!r}")


def batch_tap_gradients(model: Model, x: torch.Tensor, tap: str, objective="logit"):
    """Objective values, tap activations and d(objective)/d(tap) for a batch.

    Returns numpy arrays ``(values[B], activations[B, ...], grads[B, ...])``.
    """
    model.check_tap(tap)
    fn = _objective_fn(objective)
    x = x.detach()
    with torch.no_grad():
        shape = model.run(x[:1])[1][tap].shape[1:]
    # differentiate through a zero offset injected at the tap, so taps with no
    # trainable parameters upstream (input, hpf) are handled uniformly
    probe = torch.zeros((x.shape[0], *shape), requires_grad=True)
    logits, taps = model.run(x, {tap: probe})
    act = taps[tap]
    values = fn(logits, taps)
    (grad,) = torch.autograd.grad(values.sum(), probe, allow_unused=True)
    grad = torch.zeros_like(act) if grad is None else grad
    return values.detach().numpy(), act.detach().numpy(), grad.detach().numpy()


def grad_wrt_tap(model: Model, img, tap: str, objective="logit") -> np.ndarray:
    """Gradient of the objective with respect to the activations at ``tap``."""
    x = to_batch(img)
    _check_size(model, x)
    return batch_tap_gradients(model, x, tap, objective)[2][0]


def grad_input(model: Model, img, objective="loss") -> np.ndarray:
    """Per-pixel gradient (pixel units) of the objective for one image."""
    return grad_wrt_tap(model, img, "input", objective)[0]


def loss_gradient(model: Model, img, target: int = 0) -> tuple[np.ndarray, float]:
    """Gradient of the cross-entropy at ``target`` via the chain rule through the log-odds.

    With two logits, CE(target=0) = softplus(s) and CE(target=1) = softplus(-s)
    where s is the stego log-odds, so dCE/dx = dCE/ds * ds/dx. Sharing ds/dx
    with the log-odds objective keeps the sign pattern identical to any other
    attack that differentiates s. Returns the pixel gradient and the stego
    probability.
    """
    x = to_batch(img)
    _check_size(model, x)
    s, _, ds = batch_tap_gradients(model, x, "input", "logit")
    phi = float(torch.sigmoid(torch.tensor(s[0])))
    scale = phi if target == 0 else phi - 1.0
    return scale * ds[0, 0], phi


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    augment: bool = False
    keep_best: bool = True


@dataclass
class History:
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    best_epoch: int | None = None


def _augment(x: torch.Tensor, g: np.random.Generator) -> torch.Tensor:
    # random dihedral transform per image; keeps cover/stego statistics intact
    out = torch.empty_like(x)
    ks = g.integers(0, 4, size=x.shape[0])
    flips = g.integers(0, 2, size=x.shape[0])
    for i in range(x.shape[0]):
        xi = torch.rot90(x[i], int(ks[i]), dims=(1, 2))
        out[i] = torch.flip(xi, dims=(2,)) if flips[i] else xi
    return out


def accuracy(model: Model, covers, stegos) -> float:
    pc = predict(model, covers)
    ps = predict(model, stegos)
    return float(((pc == 0).sum() + (ps == 1).sum()) / (len(pc) + len(ps)))


def train(model: Model, covers, stegos, hyper: TrainConfig | None = None, rng: Rng | None = None,
          val: tuple | None = None, log: Callable[[str], None] | None = None):
    """Fit ``model`` to cover (label 0) / stego (label 1) pairs with Adam and cross-entropy.

    ``val`` is an optional ``(covers, stegos)`` pair; with ``keep_best`` the
    parameters of the epoch with the best validation accuracy are restored.
    """
    hyper = hyper or TrainConfig()
    rng = rng or Rng(0)
    covers, stegos = list(covers), list(stegos)
    if not covers or not stegos:
        raise ValueError("training needs at least one cover and one stego")
    history = History()
    if hyper.epochs <= 0:
        return model, history

    x = torch.cat([to_batch(covers), to_batch(stegos)])
    _check_size(model, x)
    y = torch.cat([torch.zeros(len(covers), dtype=torch.long), torch.ones(len(stegos), dtype=torch.long)])
    opt = torch.optim.Adam(model.parameters(), lr=hyper.lr)
    g = rng.child("train").generator()
    best = (-1.0, None)
    for epoch in range(hyper.epochs):
        perm = torch.from_numpy(g.permutation(x.shape[0]))
        losses = []
        model.train()
        for start in range(0, x.shape[0], hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            xb = _augment(x[idx], g) if hyper.augment else x[idx]
            loss = F.cross_entropy(model(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        model.eval()
        history.train_loss.append(float(np.mean(losses)))
        history.train_acc.append(accuracy(model, covers, stegos))
        if val is not None:
            acc = accuracy(model, *val)
            history.val_acc.append(acc)
            if acc > best[0]:
                best = (acc, model.flat_params())
                history.best_epoch = epoch
        if log:
            msg = f"epoch {epoch + 1}/{hyper.epochs} loss {history.train_loss[-1]:.4f} train {history.train_acc[-1]:.4f}"
            if val is not None:
                msg += f" val {history.val_acc[-1]:.4f}"
            log(msg)
    if hyper.keep_best and best[1] is not None:
        model.set_flat_params(best[1])
    return model, history


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(model: Model) -> bytes:
    """Magic, u32 length + architecture text, u64 count + float64 LE parameters."""
    if model.config is None:
        raise ValueError("only models built from an ArchConfig can be checkpointed")
    text = model.config.to_text().encode("utf-8")
    params = model.flat_params()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<Q", params.size))
    buf.write(params.astype("<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> Model:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint")
    (n_text,) = struct.unpack("<I", data[8:12])
    text = data[12:12 + n_text].decode("utf-8")
    pos = 12 + n_text
    (n_params,) = struct.unpack("<Q", data[pos:pos + 8])
    body = data[pos + 8:]
    if len(body) != 8 * n_params:
        raise ValueError("checkpoint parameter block is truncated")
    model = build_model(ArchConfig.from_text(text), seed=0)
    model.set_flat_params(np.frombuffer(body, dtype="<f8"))
    return model
