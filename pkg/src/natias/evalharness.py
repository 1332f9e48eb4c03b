"""Detector metrics, attack-success accounting and the end-to-end experiments.

Error rates follow the usual equal-prior convention: a miss is a stego
labeled cover, a false alarm is a cover labeled stego, p_e is their mean.
Experiments are train -> attack -> evaluate pipelines driven by explicit
seeds; every stage is a pure function of its config.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .attacks import AttackConfig, AttackOutcome, attack_many, attack_method
from .costs import cost_function
from .diffnet import ArchConfig, Model, TrainConfig, build_model, predict, train
from .imagecore import GrayImage, Rng, synth_dataset
from .simulator import Payload, embed

Log = Callable[[str], None] | None


# --- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    p_md: float
    p_fa: float
    p_e: float
    acc: float
    n_cover: int
    n_stego: int

    @classmethod
    def from_counts(cls, missed: int, n_stego: int, false_alarms: int, n_cover: int) -> "EvalReport":
        if n_cover <= 0 or n_stego <= 0:
            raise ValueError("evaluation needs at least one cover and one stego")
        if not (0 <= missed <= n_stego and 0 <= false_alarms <= n_cover):
            raise ValueError("error counts exceed set sizes")
        p_md, p_fa = missed / n_stego, false_alarms / n_cover
        p_e = (p_md + p_fa) / 2
        return cls(p_md, p_fa, p_e, 1.0 - p_e, n_cover, n_stego)

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_from_labels(cover_labels, stego_labels) -> EvalReport:
    """Report from hard verdicts (1 = stego) on the cover set and the stego set."""
    c = np.asarray(cover_labels).astype(bool)
    s = np.asarray(stego_labels).astype(bool)
    return EvalReport.from_counts(int((~s).sum()), s.size, int(c.sum()), c.size)


def confusion(model: Model, covers, stegos) -> EvalReport:
    covers, stegos = list(covers), list(stegos)
    if not covers or not stegos:
        raise ValueError("evaluation needs at least one cover and one stego")
    return confusion_from_labels(predict(model, covers), predict(model, stegos))


def attack_success_rate(outcomes) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no attack outcomes")
    return sum(bool(o.deceived if isinstance(o, AttackOutcome) else o["deceived"]) for o in outcomes) / len(outcomes)


# --- corpus -----------------------------------------------------------------

SPLIT = (0.70, 0.05, 0.25)


@dataclass(frozen=True)
class DataConfig:
    n_images: int = 2000
    size: int = 64
    seed: int = 0
    cost: str = "suniward"
    split: tuple[float, float, float] = SPLIT

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if self.n_images < 3:
            raise ValueError("need at least three images to split")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split must be three positive fractions summing to 1")
        cost_function(self.cost)

    def counts(self) -> tuple[int, int, int]:
        n_train = int(round(self.split[0] * self.n_images))
        n_val = max(1, int(round(self.split[1] * self.n_images)))
        return n_train, n_val, self.n_images - n_train - n_val


@dataclass(frozen=True, eq=False)
class Corpus:
    """Covers split into train/val/test plus their conventional stegos and costs per payload."""

    config: DataConfig
    covers: dict                                  # split -> list[GrayImage]
    costs: dict                                   # split -> list[CostMap]
    stegos: dict = field(default_factory=dict)    # (split, bpp) -> list[GrayImage]

    def stegos_at(self, split: str, payload: Payload) -> list[GrayImage]:
        key = (split, payload.bits_per_pixel)
        if key not in self.stegos:
            rng = Rng(self.config.seed).child("message", split, repr(payload.bits_per_pixel))
            out = []
            for i, (c, rho) in enumerate(zip(self.covers[split], self.costs[split])):
                bits = payload.message_bits(c.pixels.size)
                out.append(embed(c, rho, bits, rng.child(i))[0])
            self.stegos[key] = out
        return self.stegos[key]


def build_corpus(cfg: DataConfig) -> Corpus:
    images = synth_dataset(cfg.n_images, cfg.size, cfg.seed)
    n_train, n_val, _ = cfg.counts()
    cut = {"train": images[:n_train], "val": images[n_train:n_train + n_val], "test": images[n_train + n_val:]}
    cost = cost_function(cfg.cost)
    return Corpus(cfg, cut, {k: [cost(c) for c in v] for k, v in cut.items()})


# --- detectors --------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    name: str
    arch: ArchConfig = field(default_factory=ArchConfig)
    seed: int = 0
    hyper: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=6, lr=3e-3))


def non_target_family(base: DetectorSpec, seed: int = 0) -> tuple[DetectorSpec, ...]:
    """Same family as ``base``: two other seed/width draws and one deeper variant."""
    w = base.arch.widths
    arch = base.arch
    return (
        replace(base, name="nt-seed", seed=seed + 101),
        replace(base, name="nt-wide", seed=seed + 202,
                arch=replace(arch, widths=tuple(int(v * 1.5) for v in w))),
        replace(base, name="nt-deep", seed=seed + 303,
                arch=replace(arch, widths=w + (w[-1],), pool=arch.pool + (False,))),
    )


def train_detector(spec: DetectorSpec, corpus: Corpus, payload: Payload, log: Log = None) -> Model:
    model = build_model(spec.arch, spec.seed)
    val = (corpus.covers["val"], corpus.stegos_at("val", payload))
    prefix = (lambda m: log(f"[{spec.name}] {m}")) if log else None
    train(model, corpus.covers["train"], corpus.stegos_at("train", payload), spec.hyper,
          Rng(spec.seed).child("train"), val=val, log=prefix)
    return model


# --- transferability --------------------------------------------------------

CONVENTIONAL = "conventional"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    target: DetectorSpec = field(default_factory=lambda: DetectorSpec("target"))
    detectors: tuple[DetectorSpec, ...] | None = None   # None: the non-target family of the target
    methods: tuple[str, ...] = ("adv-emb", "natias-adv")
    payloads: tuple[float, ...] = (0.4,)
    attack: AttackConfig = field(default_factory=AttackConfig)
    n_attack: int | None = None                          # test covers attacked; None: all
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "payloads", tuple(float(p) for p in self.payloads))
        if self.detectors is None:
            object.__setattr__(self, "detectors", non_target_family(self.target, self.seed))
        names = [self.target.name] + [d.name for d in self.detectors]
        if len(set(names)) != len(names):
            raise ValueError("detector names must be distinct")
        if not self.methods or not self.payloads:
            raise ValueError("need at least one method and one payload")
        for m in self.methods:
            attack_method(m)
        for p in self.payloads:
            Payload(p)
        for d in (self.target, *self.detectors):
            if d.arch.input_size != self.data.size:
                raise ValueError(f"detector {d.name} expects {d.arch.input_size}px, data is {self.data.size}px")
        if self.n_attack is not None and self.n_attack < 1:
            raise ValueError("n_attack must be positive")

    def describe(self) -> dict:
        def spec(d):
            return {"name": d.name, "seed": d.seed, "arch": d.arch.to_text(), "train": asdict(d.hyper)}
        return {"data": asdict(self.data), "target": spec(self.target),
                "detectors": [spec(d) for d in self.detectors], "methods": list(self.methods),
                "payloads": list(self.payloads), "attack": asdict(self.attack), "n_attack": self.n_attack,
                "seed": self.seed}


@dataclass(frozen=True)
class TransferRow:
    method: str
    target: str
    payload: float
    reports: dict           # detector name -> EvalReport
    asr: float | None = None


@dataclass(eq=False)
class TransferResult:
    config: ExperimentConfig
    rows: list
    models: dict = field(default_factory=dict)       # (name, bpp) -> Model
    outcomes: dict = field(default_factory=dict)     # (method, bpp) -> list[AttackOutcome]
    corpus: Corpus | None = None

    @property
    def detector_names(self) -> list[str]:
        return [self.config.target.name] + [d.name for d in self.config.detectors]

    @property
    def non_target_names(self) -> list[str]:
        return [d.name for d in self.config.detectors]

    def row(self, method: str, payload: float) -> TransferRow:
        for r in self.rows:
            if r.method == method and r.payload == float(payload):
                return r
        raise KeyError((method, payload))

    def non_target_mean(self, method: str, payload: float) -> float:
        reports = self.row(method, payload).reports
        return float(np.mean([reports[n].acc for n in self.non_target_names]))

    def average_deltas(self) -> dict:
        """Per (method, payload): mean non-target accuracy and its change from conventional stegos."""
        out = {}
        for r in self.rows:
            mean = self.non_target_mean(r.method, r.payload)
            base = self.non_target_mean(CONVENTIONAL, r.payload)
            out[f"{r.method}@{r.payload:g}"] = {"mean_acc": mean, "delta": mean - base}
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "target", "payload", *self.detector_names])
        for r in self.rows:
            w.writerow([r.method, r.target, f"{r.payload:g}", *(f"{r.reports[n].acc:.6f}" for n in self.detector_names)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"config": self.config.describe(), "detectors": self.detector_names,
                "rows": [{"method": r.method, "target": r.target, "payload": r.payload, "asr": r.asr,
                          "reports": {k: v.to_dict() for k, v in r.reports.items()}} for r in self.rows],
                "average": self.average_deltas()}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def transfer_experiment(cfg: ExperimentConfig, log: Log = None, corpus: Corpus | None = None) -> TransferResult:
    """Train adversary-unaware detectors, attack the target, score every detector on every stego set."""
    corpus = corpus or build_corpus(cfg.data)
    if corpus.config != cfg.data:
        raise ValueError("corpus was built from a different data config")
    n = len(corpus.covers["test"]) if cfg.n_attack is None else min(cfg.n_attack, len(corpus.covers["test"]))
    covers, costs = corpus.covers["test"][:n], corpus.costs["test"][:n]
    result = TransferResult(cfg, [], corpus=corpus)
    specs = (cfg.target, *cfg.detectors)
    for bpp in cfg.payloads:
        payload = Payload(bpp)
        for spec in specs:
            if log:
                log(f"training {spec.name} at {bpp:g} bpp")
            result.models[spec.name, bpp] = train_detector(spec, corpus, payload, log)
        target = result.models[cfg.target.name, bpp]
        stego_sets = {CONVENTIONAL: (corpus.stegos_at("test", payload)[:n], None)}
        for method in cfg.methods:
            if log:
                log(f"attacking {n} covers with {method} at {bpp:g} bpp")
            outs = attack_many(method, covers, target, costs, payload, cfg.attack,
                               Rng(cfg.seed).child("attack", method, repr(bpp)), cfg.jobs)
            result.outcomes[method, bpp] = outs
            stego_sets[method] = ([o.stego for o in outs], attack_success_rate(outs))
        for method, (stegos, asr) in stego_sets.items():
            reports = {s.name: confusion(result.models[s.name, bpp], covers, stegos) for s in specs}
            result.rows.append(TransferRow(method, cfg.target.name, bpp, reports, asr))
    return result


# --- retraining -------------------------------------------------------------

@dataclass(frozen=True)
class RetrainResult:
    unaware: EvalReport
    retrained: EvalReport
    n_train: int
    n_test: int


def retrain_experiment(spec: DetectorSpec, covers, adv_stegos, unaware: Model, train_fraction: float = 0.7,
                       seed: int = 0, log: Log = None) -> RetrainResult:
    """Train a fresh detector on part of the cover/adversarial-stego pairs, score both on the rest.

    Pairs are split by a seeded permutation so that a cover and its stego
    always land on the same side.
    """
    covers, adv_stegos = list(covers), list(adv_stegos)
    if len(covers) != len(adv_stegos) or len(covers) < 2:
        raise ValueError("need at least two matched cover/stego pairs")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    perm = Rng(seed).child("retrain-split").generator().permutation(len(covers))
    k = min(max(1, int(round(train_fraction * len(covers)))), len(covers) - 1)
    tr, te = perm[:k], perm[k:]
    pick = lambda seq, idx: [seq[i] for i in idx]
    model = build_model(spec.arch, spec.seed)
    prefix = (lambda m: log(f"[retrain {spec.name}] {m}")) if log else None
    train(model, pick(covers, tr), pick(adv_stegos, tr), replace(spec.hyper, keep_best=False),
          Rng(spec.seed).child("retrain"), log=prefix)
    test_c, test_s = pick(covers, te), pick(adv_stegos, te)
    return RetrainResult(confusion(unaware, test_c, test_s), confusion(model, test_c, test_s), len(tr), len(te))


# --- target-layer ablation --------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    tap: str
    feature_size: int
    asr: float
    reports: dict               # non-target name -> EvalReport
    same_as_reference: float    # fraction of stegos identical to the reference attack's

    @property
    def mean_non_target_acc(self) -> float:
        return float(np.mean([r.acc for r in self.reports.values()])) if self.reports else float("nan")


def layer_ablation(model: Model, covers, costs, payload: Payload, taps, non_targets: dict | None = None,
                   cfg: AttackConfig | None = None, seed: int = 0, jobs: int = 1,
                   reference: str = "adv-emb") -> list[AblationRow]:
    """Run the feature-level embedding attack once per tap choice under one shared random stream.

    The first row is the logits-level ``reference`` attack itself (tap ``"-"``).
    """
    cfg = cfg or AttackConfig()
    covers, costs = list(covers), list(costs)
    non_targets = non_targets or {}
    rng = Rng(seed).child("ablation")
    ref = attack_many(reference, covers, model, costs, payload, cfg, rng, jobs)

    def row(tap, outs):
        same = float(np.mean([o.stego == r.stego for o, r in zip(outs, ref)]))
        size = 1 if tap == "-" else int(np.prod(model.tap_shape(tap, covers[0].shape)))
        stegos = [o.stego for o in outs]
        reports = {k: confusion(m, covers, stegos) for k, m in non_targets.items()}
        return AblationRow(tap, size, attack_success_rate(outs), reports, same)

    rows = [row("-", ref)]
    for tap in taps:
        model.check_tap(tap)
        outs = attack_many("natias-adv", covers, model, costs, payload, replace(cfg, tap=tap), rng, jobs)
        rows.append(row(tap, outs))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = sorted({k for r in rows for k in r.reports})
    w.writerow(["tap", "feature_size", "asr", "same_as_reference", *names])
    for r in rows:
        w.writerow([r.tap, r.feature_size, f"{r.asr:.6f}", f"{r.same_as_reference:.6f}",
                    *(f"{r.reports[n].acc:.6f}" for n in names)])
    return buf.getvalue()
