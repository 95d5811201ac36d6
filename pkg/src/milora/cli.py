"""Command-line entry point: train, eval, gradcheck, params, ablate.

stdout carries one JSON document per command; progress goes to stderr.
Exit codes: 0 success, 1 check or ordering failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .errors import ConfigError, FormatError, MiloraError
from .experts import count_parameters
from .model import ModelConfig, build_model, parameter_specs, perturb_trainable
from .synthdata import (
    Episode,
    GeneratorConfig,
    generate_mixture,
    generate_split,
    random_episode,
    read_features,
)
from .trainloop import TrainConfig, composite_loss, evaluate, history_lines, train

log = logging.getLogger("milora")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
ABLATION_VARIANTS = {
    "combined": (True, True),
    "temporal-only": (True, False),
    "spatial-only": (False, True),
    "none": (False, False),
}


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


@dataclass
class DataConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    n_train: int = 2048
    n_val: int = 64
    n_pretrain: int = 256
    seed: int = 42

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig.from_dict(self.generator)
        if min(self.n_train, self.n_val) < 1 or self.n_pretrain < 0:
            raise ConfigError("n_train and n_val must be >= 1, n_pretrain >= 0")

    # episode seeds are disjoint per split: seed * 10^6 + split offset + index
    def split_base(self, split: str) -> int:
        return self.seed * 1_000_000 + {"train": 0, "val": 500_000, "pretrain": 800_000}[split]

    def train_set(self) -> list[Episode]:
        return generate_split(self.generator, self.n_train, self.split_base("train"))

    def val_set(self, n: int | None = None) -> list[Episode]:
        return generate_split(self.generator, self.n_val if n is None else n, self.split_base("val"))

    def pretrain_set(self) -> list[Episode]:
        return generate_mixture(self.generator, self.n_pretrain, self.split_base("pretrain"))

    def to_dict(self) -> dict:
        return {"generator": self.generator.to_dict(), "n_train": self.n_train, "n_val": self.n_val,
                "n_pretrain": self.n_pretrain, "seed": self.seed}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    gradcheck: dict = field(default_factory=dict)  # ModelConfig.tiny overrides
    out: str = "runs/milora"

    SECTIONS = ("model", "train", "data", "gradcheck", "out")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = sorted(set(raw) - set(cls.SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        data = dict(raw.get("data", {}))
        known = {f.name for f in dataclasses.fields(DataConfig)}
        if set(data) - known:
            raise ConfigError(f"unknown data config keys: {sorted(set(data) - known)}")
        return cls(
            model=ModelConfig.from_dict(raw.get("model", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=DataConfig(**data),
            gradcheck=dict(raw.get("gradcheck", {})),
            out=str(raw.get("out", cls.out)),
        )

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict(),
                "gradcheck": dict(self.gradcheck), "out": self.out}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``--section.key=value`` (or ``--section.key value``) tokens to a raw config dict."""
    tokens = list(overrides)
    while tokens:
        tok = tokens.pop(0)
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {tok!r}")
        if "=" in tok:
            path, value = tok[2:].split("=", 1)
        else:
            if not tokens:
                raise UsageError(f"override {tok} needs a value")
            path, value = tok[2:], tokens.pop(0)
        keys = path.split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {path}: {k} is not a section")
        node[keys[-1]] = _parse_value(value)
    return raw


def load_run_config(path: str | None, overrides: list[str], seed: int | None = None,
                    out: str | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config not found: {path}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        for section in ("model", "train", "data"):
            raw.setdefault(section, {})["seed"] = seed
    if out is not None:
        raw["out"] = out
    try:
        cfg = RunConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    cfg.out = str(Path(cfg.out).resolve())
    return cfg


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _summary(metrics: dict) -> dict:
    return {k: float(v) for k, v in metrics.items()}


# commands --------------------------------------------------------------------

def run_training(cfg: RunConfig, model_cfg: ModelConfig | None = None):
    model = build_model(model_cfg or cfg.model)
    train_set, val_set = cfg.data.train_set(), cfg.data.val_set()
    pretrain = cfg.data.pretrain_set() if cfg.train.pretrain_fraction > 0 else None
    result = train(model, train_set, val_set, cfg.train, pretrain_set=pretrain)
    return result, val_set


def cmd_train(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result, val_set = run_training(cfg)
    val = evaluate(result.model, val_set)
    (out / "history.jsonl").write_text(history_lines(result.history))
    meta = {"run_config": cfg.to_dict(), "best_epoch": result.best_epoch, "best_score": result.best_score,
            "val": val}
    save_checkpoint(out / "best.mlrv", result.model, result.optimizer, meta=meta)
    log.info("trained %d epochs in %.1fs, best epoch %d", len(result.history), time.perf_counter() - t0,
             result.best_epoch)
    _emit({
        "command": "train",
        "epochs_run": len(result.history),
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "initial_train_loss": result.initial_train_loss,
        "final_train_loss": result.history[-1]["train_loss"],
        "val": _summary(val),
        "checkpoint": str(out / "best.mlrv"),
        "history": str(out / "history.jsonl"),
    })
    return EXIT_OK


def _load_labelled(features: list[str], labels: str | None) -> list[Episode] | list[np.ndarray]:
    frames = [read_features(p) for p in features]
    if labels is None:
        return frames
    rows = json.loads(Path(labels).read_text())
    if len(rows) != len(frames):
        raise UsageError(f"{len(frames)} feature files but {len(rows)} label records")
    return [Episode(f, np.asarray(r["importance"], dtype=np.int8), list(r["summary"]))
            for f, r in zip(frames, rows)]


def cmd_eval(checkpoint: str, data: list[str] | None, labels: str | None, synthetic: int | None) -> int:
    model, _ = load_checkpoint(checkpoint)
    meta = read_checkpoint(checkpoint).meta
    if synthetic is not None:
        if synthetic < 1:
            raise UsageError("empty evaluation set")
        run = RunConfig.from_dict(meta.get("run_config", {}))
        episodes = run.data.val_set(synthetic)
    elif data:
        episodes = _load_labelled(data, labels)
        if labels is None:
            from .model import decode_summary, forward_summary
            preds = []
            with nk.no_grad():
                for f in episodes:
                    o = forward_summary(model, f)
                    preds.append({"importance": o.importance.data.astype(float).tolist(),
                                  "summary": decode_summary(o.summary_logits.data)})
            _emit({"command": "eval", "predictions": preds})
            return EXIT_OK
    else:
        raise UsageError("eval needs --data or --synthetic")
    if not episodes:
        raise UsageError("empty evaluation set")
    metrics = evaluate(model, episodes)
    _emit({"command": "eval", "episodes": len(episodes), **_summary(metrics)})
    return EXIT_OK


def gradcheck_model_configs(overrides: dict) -> list[ModelConfig]:
    """Tiny configs covering every gate mode and attention mode, cross-modal on."""
    base = dict(cross_modal=True)
    base.update(overrides)
    variants = [{}, {"attention_mode": "projection-update"}, {"gate_mode": "top", "top_m": 1},
                {"gate_mode": "uniform"}, {"activation": "gelu", "spatial_input": "temporal"}]
    out: list[ModelConfig] = []
    for v in variants:
        cfg = ModelConfig.tiny(**{**base, **v, **overrides})
        if cfg not in out:
            out.append(cfg)
    return out


def cmd_gradcheck(cfg: RunConfig) -> int:
    rows, ok = [], True
    with nk.precision("f64"):
        for mcfg in gradcheck_model_configs(cfg.gradcheck):
            model = perturb_trainable(build_model(mcfg), scale=0.3, seed=mcfg.seed)
            episodes = [random_episode(mcfg.T, mcfg.d, mcfg.summary_len, seed=s) for s in (0, 1)]
            report = nk.finite_diff_check(lambda: composite_loss(model, episodes, cfg.train).total,
                                          model.trainable_params())
            variant = f"{mcfg.gate_mode}/{mcfg.attention_mode}/{mcfg.activation}/{mcfg.spatial_input}"
            for r in report.results:
                rows.append({"variant": variant, "param": r.name, "max_rel_error": r.max_rel_error,
                             "passed": r.passed})
                log.info("%-40s %-28s %.3e %s", variant, r.name, r.max_rel_error, "ok" if r.passed else "FAIL")
            ok &= report.passed
    failures = sorted({r["param"] for r in rows if not r["passed"]})
    _emit({"command": "gradcheck", "tolerance": 1e-4, "passed": ok, "failures": failures, "rows": rows})
    if not ok:
        log.error("gradient check failed for: %s", ", ".join(failures))
    return EXIT_OK if ok else EXIT_CHECK


def params_report(model_cfg: ModelConfig) -> dict:
    specs = parameter_specs(model_cfg)
    rows = [{"name": n, "shape": list(s), "count": math.prod(s), "trainable": t} for n, s, t in specs]
    trainable, frozen = count_parameters(specs)
    return {"tensors": rows, "trainable": trainable, "frozen": frozen, "total": trainable + frozen,
            "trainable_percent": 100.0 * trainable / (trainable + frozen)}


def cmd_params(cfg: RunConfig) -> int:
    report = params_report(cfg.model)
    log.info("trainable %d / %d parameters (%.2f%%)", report["trainable"], report["total"],
             report["trainable_percent"])
    _emit({"command": "params", **report})
    return EXIT_OK


def run_ablation(cfg: RunConfig, variants=tuple(ABLATION_VARIANTS)) -> dict[str, dict]:
    table = {}
    for name in variants:
        t, s = ABLATION_VARIANTS[name]
        t0 = time.perf_counter()
        result, val_set = run_training(cfg, cfg.model.replace(adapt_temporal=t, adapt_spatial=s))
        metrics = evaluate(result.model, val_set)
        table[name] = {**_summary(metrics), "best_epoch": result.best_epoch, "epochs_run": len(result.history)}
        log.info("%-14s f1 %.3f rouge-l %.3f (%.0fs)", name, metrics["f1"], metrics["rouge_l"],
                 time.perf_counter() - t0)
    return table


def ablation_ordering_holds(table: dict[str, dict]) -> bool:
    best = table["combined"]
    return all(best[m] >= table[v][m] for v in ("temporal-only", "spatial-only") for m in ("f1", "rouge_l"))


def cmd_ablate(cfg: RunConfig) -> int:
    table = run_ablation(cfg)
    ok = ablation_ordering_holds(table)
    _emit({"command": "ablate", "ordering_holds": ok, "table": table})
    if not ok:
        log.error("combined adaptation did not dominate both single-path variants")
    return EXIT_OK if ok else EXIT_CHECK


# entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="sets model, train and data seeds")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="milora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write history + best checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--data", nargs="+", help="feature files (MLFT)")
    ev.add_argument("--labels", help="JSON list of {importance, summary}, one per feature file")
    ev.add_argument("--synthetic", type=int, help="score N held-out synthetic episodes")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check on tiny configs")
    sub.add_parser("params", parents=[common], help="per-tensor parameter accounting")
    sub.add_parser("ablate", parents=[common], help="temporal/spatial/combined ablation")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "ablate") else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_run_config(args.config, rest, seed=args.seed, out=args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, args.labels, args.synthetic)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "params":
            return cmd_params(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
    except UsageError as exc:
        print(f"milora: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"milora: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except MiloraError as exc:
        print(f"milora: {exc}", file=sys.stderr)
        return EXIT_CHECK
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
