"""Command-line front end: ``natias <command> [options]``.

Every command resolves its settings from defaults, an optional INI file
(``--config``) and explicit flags, and writes the resolved configuration
next to its main output so the run can be repeated. Exit codes: 0 success,
1 invalid input or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .attacks import METHODS, AttackConfig, attack_many, read_jsonl, write_jsonl
from .attribution import PathSpec, dump_attribution, heatmap, neuron_attribution
from .costs import cost_function
from .diffnet import ArchConfig, TrainConfig, build_model, load_checkpoint, save_checkpoint, train
from .evalharness import (
    DataConfig, DetectorSpec, EvalReport, ExperimentConfig, ablation_csv, attack_success_rate, confusion,
    layer_ablation, retrain_experiment, transfer_experiment,
)
from .imagecore import Rng, load_dataset_dir, read_pgm, save_dataset_dir, synth_dataset, write_pgm
from .simulator import Payload, embed

SEED_ENV = "NATIAS_SEED"


class ValidationError(Exception):
    pass


# --- configuration ----------------------------------------------------------

def _defaults() -> dict[str, dict[str, str]]:
    def text(v):
        if isinstance(v, (tuple, list)):
            return ",".join(str(x) for x in v)
        return "" if v is None else str(v)

    data, arch, hyper = DataConfig(), ArchConfig(), DetectorSpec("target").hyper
    attack = AttackConfig()
    return {
        "run": {"seed": "0", "jobs": "1"},
        "dataset": {k: text(v) for k, v in asdict(data).items() if k != "seed"},
        "model": {"widths": text(arch.widths), "activation": arch.activation, "kernel": str(arch.kernel),
                  "target_tap": arch.target_tap},
        "train": {k: text(v) for k, v in asdict(hyper).items()},
        "attack": {k: text(v) for k, v in asdict(attack).items()},
        "experiment": {"methods": "adv-emb,natias-adv", "payloads": "0.4", "n_attack": "",
                       "seeds": "0", "path_steps": "50"},
    }


class RunConfig:
    """Sectioned ``key = value`` settings; unknown sections or keys are rejected."""

    def __init__(self, values: dict[str, dict[str, str]] | None = None):
        self.values = _defaults()
        for section, items in (values or {}).items():
            self.update(section, items)

    def update(self, section: str, items: dict) -> None:
        if section not in self.values:
            raise ValidationError(f"unknown config section [{section}]")
        for key, value in items.items():
            if key not in self.values[section]:
                raise ValidationError(f"unknown config key {key!r} in [{section}]")
            self.values[section][key] = str(value)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ValidationError(f"malformed config: {exc}") from None
        return cls({s: dict(parser[s]) for s in parser.sections()})

    def to_text(self) -> str:
        out = []
        for section, items in self.values.items():
            out.append(f"[{section}]")
            out.extend(f"{k} = {v}" for k, v in items.items())
            out.append("")
        return "\n".join(out)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    # typed views
    def _ints(self, s, k):
        return tuple(int(v) for v in self.get(s, k).split(",") if v.strip())

    def _floats(self, s, k):
        return tuple(float(v) for v in self.get(s, k).split(",") if v.strip())

    def _opt_int(self, s, k):
        v = self.get(s, k).strip()
        return None if v in ("", "None") else int(v)

    def seed(self) -> int:
        return int(self.get("run", "seed"))

    def jobs(self) -> int:
        return int(self.get("run", "jobs"))

    def data(self) -> DataConfig:
        d = self.values["dataset"]
        return DataConfig(int(d["n_images"]), int(d["size"]), self.seed(), d["cost"], self._floats("dataset", "split"))

    def arch(self) -> ArchConfig:
        m = self.values["model"]
        return ArchConfig(widths=self._ints("model", "widths"), activation=m["activation"], kernel=int(m["kernel"]),
                          input_size=int(self.get("dataset", "size")), target_tap=m["target_tap"])

    def hyper(self) -> TrainConfig:
        t = self.values["train"]
        flag = {"true": True, "false": False}
        try:
            return TrainConfig(int(t["epochs"]), int(t["batch_size"]), float(t["lr"]),
                               flag[t["augment"].lower()], flag[t["keep_best"].lower()])
        except KeyError:
            raise ValidationError("boolean train settings must be true or false") from None

    def attack(self) -> AttackConfig:
        a = self.values["attack"]
        kw = {}
        for f in fields(AttackConfig):
            raw = a[f.name].strip()
            if f.name in ("k", "tap"):
                kw[f.name] = None if raw in ("", "None") else (int(raw) if f.name == "k" else raw)
            elif f.name == "usgs_fractions":
                kw[f.name] = self._floats("attack", f.name)
            elif f.name in ("steps", "max_scrambles", "rounds", "n_candidates"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = float(raw)
        return AttackConfig(**kw)

    def experiment(self, seed: int) -> ExperimentConfig:
        target = DetectorSpec("target", self.arch(), seed, self.hyper())
        return ExperimentConfig(data=replace(self.data(), seed=seed), target=target,
                                methods=tuple(m.strip() for m in self.get("experiment", "methods").split(",")),
                                payloads=self._floats("experiment", "payloads"), attack=self.attack(),
                                n_attack=self._opt_int("experiment", "n_attack"), seed=seed, jobs=self.jobs())

    def seeds(self) -> tuple[int, ...]:
        return self._ints("experiment", "seeds")

    def path_steps(self) -> int:
        return int(self.get("experiment", "path_steps"))


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    if seed is not None:
        cfg.update("run", {"seed": int(seed)})
    if args.jobs is not None:
        cfg.update("run", {"jobs": args.jobs})
    overrides = {
        ("dataset", "size"): getattr(args, "size", None),
        ("dataset", "cost"): getattr(args, "cost", None),
        ("attack", "tap"): getattr(args, "tap", None),
        ("train", "epochs"): getattr(args, "epochs", None),
    }
    for (section, key), value in overrides.items():
        if value is not None:
            cfg.update(section, {key: value})
    cfg.data(), cfg.arch(), cfg.hyper(), cfg.attack()   # validate every section up front
    if cfg.jobs() < 1:
        raise ValidationError("--jobs must be at least 1")
    return cfg


def emit_config(cfg: RunConfig, out: Path) -> None:
    out.with_name(out.name + ".run.ini").write_text(cfg.to_text())


# --- helpers ----------------------------------------------------------------

def _existing(path: str, kind: str = "path") -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{kind} {path} does not exist")
    return p


def _dataset(path: str):
    names, images = load_dataset_dir(_existing(path, "directory"))
    if not images:
        raise ValidationError(f"no PGM images in {path}")
    return names, images


def _model(path: str):
    return load_checkpoint(_existing(path, "checkpoint").read_bytes())


def _payload(value: float) -> Payload:
    return Payload(value)


def _conventional_stegos(covers, cost_name: str, payload: Payload, seed: int):
    cost = cost_function(cost_name)
    rng = Rng(seed).child("message")
    return [embed(c, cost(c), payload.message_bits(c.pixels.size), rng.child(i))[0] for i, c in enumerate(covers)]


def _report_lines(report: EvalReport) -> str:
    return (f"p_md {report.p_md:.6f}\np_fa {report.p_fa:.6f}\np_e {report.p_e:.6f}\nacc {report.acc:.6f}\n"
            f"n_cover {report.n_cover}\nn_stego {report.n_stego}\n")


# --- commands ---------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> None:
    if args.n < 1:
        raise ValidationError("--n must be at least 1")
    data = cfg.data()
    images = synth_dataset(args.n, data.size, cfg.seed())
    out = Path(args.out)
    names = save_dataset_dir(out, images)
    files = [{"name": f"{n}.pgm", "sha256": hashlib.sha256((out / f"{n}.pgm").read_bytes()).hexdigest()}
             for n in names]
    manifest = {"count": len(names), "size": data.size, "seed": cfg.seed(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "run.ini").write_text(cfg.to_text())


def cmd_train(args, cfg: RunConfig) -> None:
    _, covers = _dataset(args.covers)
    payload = _payload(args.payload)
    if args.stegos:
        _, stegos = _dataset(args.stegos)
        if len(stegos) != len(covers):
            raise ValidationError("cover and stego directories hold different numbers of images")
    else:
        stegos = _conventional_stegos(covers, cfg.get("dataset", "cost"), payload, cfg.seed())
    n_val = max(1, round(len(covers) * 0.05 / 0.75)) if len(covers) > 1 else 0
    n_train = len(covers) - n_val
    model = build_model(cfg.arch(), cfg.seed())
    val = (covers[n_train:], stegos[n_train:]) if n_val else None
    train(model, covers[:n_train], stegos[:n_train], cfg.hyper(), Rng(cfg.seed()).child("train"), val=val,
          log=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    out.write_bytes(save_checkpoint(model))
    emit_config(cfg, out)


def cmd_attack(args, cfg: RunConfig) -> None:
    names, covers = _dataset(args.covers)
    model = _model(args.model)
    if args.method not in METHODS:
        raise ValidationError(f"unknown method {args.method!r}; choose from {sorted(METHODS)}")
    cost = cost_function(cfg.get("dataset", "cost"))
    outs = attack_many(args.method, covers, model, [cost(c) for c in covers], _payload(args.payload),
                       cfg.attack(), Rng(cfg.seed()).child("attack"), cfg.jobs())
    out = Path(args.out)
    write_jsonl(out, [o.record(n, c) for n, o, c in zip(names, outs, covers)])
    if args.stegos_out:
        save_dataset_dir(args.stegos_out, [o.stego for o in outs], names)
    emit_config(cfg, out)
    print(f"asr {attack_success_rate(outs):.6f}")


def cmd_eval(args, cfg: RunConfig) -> None:
    if args.report:
        path = _existing(args.report, "report")
        if path.suffix == ".jsonl":
            recs = read_jsonl(path)
            print(f"asr {attack_success_rate(recs):.6f}\nn {len(recs)}")
            return
        try:
            report = EvalReport(**json.loads(path.read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"not an evaluation report: {exc}") from None
        print(_report_lines(report), end="")
        return
    if not (args.model and args.covers and args.stegos):
        raise ValidationError("eval needs --report, or --model with --covers and --stegos")
    model = _model(args.model)
    report = confusion(model, _dataset(args.covers)[1], _dataset(args.stegos)[1])
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        emit_config(cfg, out)
    print(_report_lines(report), end="")


def cmd_transfer(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    seeds = (cfg.seed(),) if args.seed is not None or os.environ.get(SEED_ENV) else cfg.seeds()
    experiments = [cfg.experiment(s) for s in seeds]
    out.mkdir(parents=True, exist_ok=True)
    log = lambda m: print(m, file=sys.stderr)
    summaries = []
    for exp in experiments:
        res = transfer_experiment(exp, log=log)
        (out / f"matrix_seed{exp.seed}.csv").write_text(res.to_csv())
        summaries.append(res.summary())
    methods = summaries[0]["average"].keys()
    mean = {m: float(np.mean([s["average"][m]["mean_acc"] for s in summaries])) for m in methods}
    (out / "summary.json").write_text(json.dumps({"seeds": list(seeds), "runs": summaries, "seed_mean": mean},
                                                 indent=2, sort_keys=True) + "\n")
    (out / "run.ini").write_text(cfg.to_text())
    for m, v in mean.items():
        print(f"{m} {v:.6f}")


def cmd_retrain(args, cfg: RunConfig) -> None:
    names_c, covers = _dataset(args.covers)
    names_s, stegos = _dataset(args.stegos)
    if names_c != names_s:
        raise ValidationError("cover and adversarial stego directories must hold the same file names")
    unaware = _model(args.model)
    spec = DetectorSpec("retrained", cfg.arch(), cfg.seed(), cfg.hyper())
    res = retrain_experiment(spec, covers, stegos, unaware, seed=cfg.seed(),
                             log=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    out.write_text(json.dumps({"unaware": res.unaware.to_dict(), "retrained": res.retrained.to_dict(),
                               "n_train": res.n_train, "n_test": res.n_test}, indent=2, sort_keys=True) + "\n")
    emit_config(cfg, out)
    print(f"unaware acc {res.unaware.acc:.6f}\nretrained acc {res.retrained.acc:.6f}")


def cmd_ablate(args, cfg: RunConfig) -> None:
    _, covers = _dataset(args.covers)
    model = _model(args.model)
    taps = [t.strip() for t in args.taps.split(",") if t.strip()]
    for t in taps:
        model.check_tap(t)
    others = {Path(p).stem: _model(p) for p in (args.non_target or [])}
    cost = cost_function(cfg.get("dataset", "cost"))
    rows = layer_ablation(model, covers, [cost(c) for c in covers], _payload(args.payload), taps, others,
                          cfg.attack(), cfg.seed(), cfg.jobs())
    out = Path(args.out)
    out.write_text(ablation_csv(rows))
    emit_config(cfg, out)
    print(ablation_csv(rows), end="")


def cmd_attribute(args, cfg: RunConfig) -> None:
    model = _model(args.model)
    img = read_pgm(_existing(args.image, "image"))
    model.check_tap(args.tap)
    a = neuron_attribution(model, img, args.tap, PathSpec(args.M))
    out = Path(args.out)
    write_pgm(out, heatmap(a.values))
    if args.raw:
        Path(args.raw).write_bytes(dump_attribution(a.values))
    emit_config(cfg, out)


# --- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [run]/[dataset]/[model]/[train]/[attack]/[experiment]")
    common.add_argument("--seed", type=int, help=f"global seed (falls back to ${SEED_ENV}, then the config)")
    common.add_argument("--jobs", type=int, help="worker threads for per-image work")

    parser = _Parser(prog="natias", description="Adversarial embedding against CNN steganalysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="synthesize a cover dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--covers", required=True)
    p.add_argument("--stegos", help="stego directory (default: conventional stegos embedded here)")
    p.add_argument("--payload", type=float, default=0.4)
    p.add_argument("--cost")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", parents=[common], help="adversarial embedding against a detector")
    p.add_argument("--model", required=True)
    p.add_argument("--covers", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--payload", type=float, default=0.4)
    p.add_argument("--cost")
    p.add_argument("--tap")
    p.add_argument("--out", required=True, help="JSON-lines outcome file")
    p.add_argument("--stegos-out", dest="stegos_out")

    p = sub.add_parser("eval", parents=[common], help="score a detector or re-aggregate a report")
    p.add_argument("--report")
    p.add_argument("--model")
    p.add_argument("--covers")
    p.add_argument("--stegos")
    p.add_argument("--out")

    p = sub.add_parser("transfer", parents=[common], help="transferability matrix over seeds")
    p.add_argument("--out", required=True)

    p = sub.add_parser("retrain", parents=[common], help="retrain on adversarial stegos")
    p.add_argument("--model", required=True, help="adversary-unaware detector")
    p.add_argument("--covers", required=True)
    p.add_argument("--stegos", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", parents=[common], help="target-layer ablation")
    p.add_argument("--model", required=True)
    p.add_argument("--covers", required=True)
    p.add_argument("--taps", required=True)
    p.add_argument("--non-target", dest="non_target", action="append")
    p.add_argument("--payload", type=float, default=0.4)
    p.add_argument("--cost")
    p.add_argument("--out", required=True)

    p = sub.add_parser("attribute", parents=[common], help="neuron attribution heatmap")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--tap", required=True)
    p.add_argument("--M", type=int, default=50)
    p.add_argument("--out", required=True)
    p.add_argument("--raw", help="also dump the projected float grid")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "transfer": cmd_transfer,
            "retrain": cmd_retrain, "ablate": cmd_ablate, "attribute": cmd_attribute}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # anything that fails mid-run
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
