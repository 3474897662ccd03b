"""Command-line entry point: ``advconnect <command> [flags]``.

Configuration is an optional TOML file whose sections mirror ``DEFAULTS``
below; flags override file values. Unknown keys are rejected. Every
experiment command reads the model and dataset manifest written by
``train`` and writes a CSV summary plus a JSON-lines file of raw records.
Existing files are never overwritten.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .harness import DataParams, ExperimentSpec, TrainParams, write_new
from .model import ModelFormatError, accuracy, load_model, model_to_dict

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("advconnect")

ALL_NORMS = ["linf", "l2", "l1"]
ALL_SETTINGS = ["A", "B", "C"]

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "threads": 1,
    "data": {
        "dim": 256,
        "class_count": 4,
        "per_class": [60, 40, 50],
        "spread": 0.5,
        "center_low": 0.3,
        "center_high": 0.7,
    },
    "train": {"hidden": [32, 32], "epochs": 30, "lr": 0.05, "batch_size": 32},
    "budget": dict(harness.DEFAULT_EPSILON),
    "pgd": {"steps": 40, "restarts": 5},
    "bezier": {"iterations": 30, "lr": 0.01, "t_samples": 20, "w_main": 1.0, "w_aux": 0.5, "points": 50},
    "ea": {
        "population": 30,
        "elites": 5,
        "tournament_size": 3,
        "mutation_prob": 0.2,
        "control_lr": 3.0,
        "max_generations": 1000,
    },
    "connect": {"settings": ALL_SETTINGS, "norms": ALL_NORMS, "cases": 25, "linear": False},
    "transfer": {"settings": ALL_SETTINGS, "norms": ALL_NORMS, "cases": 25, "test_images": 40, "aux": 0},
    "aux": {
        "settings": ALL_SETTINGS,
        "norms": ["linf"],
        "aux_counts": [0, 5, 10, 15, 20, 25],
        "repetitions": 5,
        "test_images": 40,
    },
    "converge": {
        "settings": ["A"],
        "norms": ["linf"],
        "aux_counts": [0, 5, 10, 15, 20, 25],
        "epochs_list": [10, 20, 30, 40, 50],
        "sample_counts": [50, 100],
        "repetitions": 5,
        "test_images": 40,
    },
    "compare": {"norms": ALL_NORMS, "cases": 30, "screen_with_pgd": True, "budget": dict(harness.COMPARE_EPSILON)},
    "obfuscated": {"norms": ["linf"], "cases": 30, "levels": 5, "limit_levels": 1000000, "max_generations": 200},
}

COMMAND_FILES = {
    "connect": "connectivity",
    "transfer": "transfer",
    "aux": "aux_ablation",
    "converge": "convergence",
    "compare": "ea_compare",
    "obfuscated": "obfuscated",
}


class ConfigError(ValueError):
    pass


class UsageError(RuntimeError):
    """Reported as a one-line error with exit status 2."""


# --------------------------------------------------------------------------- configuration


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{name}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{name}' must be a table")
            out[key] = _merge(base[key], value, f"{name}.")
        else:
            out[key] = _coerce(base[key], value, name)
    return out


def _coerce(default, value, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{name}' must be true or false")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{name}' must be a list")
        return value
    if isinstance(default, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"config key '{name}' must be a number")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"config key '{name}' must be an integer")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{name}' must be a string")
    return value


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None
    return _merge(DEFAULTS, doc)


def apply_flags(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for key in ("seed", "out", "threads"):
        if getattr(args, key, None) is not None:
            cfg[key] = getattr(args, key)
    section = cfg.get(args.command)
    if isinstance(section, dict):
        if getattr(args, "norm", None) is not None and "norms" in section:
            section["norms"] = [args.norm]
        if getattr(args, "setting", None) is not None and "settings" in section:
            section["settings"] = [args.setting]
        if getattr(args, "linear", False):
            section["linear"] = True
    if cfg["seed"] < 0 or cfg["seed"] >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def data_params(cfg: dict) -> DataParams:
    d = cfg["data"]
    return DataParams(d["dim"], d["class_count"], tuple(d["per_class"]), d["spread"], d["center_low"], d["center_high"])


def train_params(cfg: dict) -> TrainParams:
    t = cfg["train"]
    return TrainParams(tuple(t["hidden"]), t["epochs"], t["lr"], t["batch_size"])


def experiment_spec(cfg: dict, command: str) -> ExperimentSpec:
    sec = cfg[command]
    base = ExperimentSpec(
        COMMAND_FILES[command],
        settings=tuple(sec.get("settings", ["A"])),
        norms=tuple(sec.get("norms", ["linf"])),
        epsilons={k: float(v) for k, v in sec.get("budget", cfg["budget"]).items()},
        seed=cfg["seed"],
        threads=cfg["threads"],
        iterations=cfg["bezier"]["iterations"],
        curve_lr=cfg["bezier"]["lr"],
        t_samples=cfg["bezier"]["t_samples"],
        w_main=cfg["bezier"]["w_main"],
        w_aux=cfg["bezier"]["w_aux"],
        points=cfg["bezier"]["points"],
        pgd_steps=cfg["pgd"]["steps"],
        pgd_restarts=cfg["pgd"]["restarts"],
        population=cfg["ea"]["population"],
        elites=cfg["ea"]["elites"],
        tournament_size=cfg["ea"]["tournament_size"],
        mutation_prob=cfg["ea"]["mutation_prob"],
        control_lr=cfg["ea"]["control_lr"],
        max_generations=cfg["ea"]["max_generations"],
    )
    extra = {}
    for key in ("cases", "linear", "test_images", "repetitions", "screen_with_pgd"):
        if key in sec:
            extra[key] = sec[key]
    for key in ("aux_counts", "epochs_list", "sample_counts"):
        if key in sec:
            extra[key] = tuple(sec[key])
    if command == "transfer":
        extra["transfer_aux"] = sec["aux"]
    if command == "obfuscated":
        extra.update(
            quantization_levels=sec["levels"], limit_levels=sec["limit_levels"], obf_generations=sec["max_generations"]
        )
    return replace(base, **extra)


# --------------------------------------------------------------------------- commands


def _out_dir(cfg: dict) -> Path:
    return Path(cfg["out"])


def _paths(cfg: dict, stem: str, tag: str | None) -> tuple[Path, Path]:
    name = f"{stem}-{tag}" if tag else stem
    out = _out_dir(cfg)
    return out / f"{name}.csv", out / f"{name}.jsonl"


def _refuse_existing(*paths: Path) -> None:
    for p in paths:
        if p.exists():
            raise UsageError(f"{p} already exists; choose a new --out directory or pass --tag")


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(cfg)
    model_path, manifest_path = out / "model.json", out / "dataset.json"
    _refuse_existing(model_path, manifest_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    dp, tp = data_params(cfg), train_params(cfg)
    model, data = harness.build_toy(dp, tp, cfg["seed"])
    train_acc = accuracy(model, *data.split("train"))
    test_acc = accuracy(model, *data.split("test"))
    manifest = {
        "seed": cfg["seed"],
        "data": {**cfg["data"]},
        "train": {**cfg["train"]},
        "fingerprint": data.fingerprint(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
    }
    try:
        write_new(model_path, json.dumps(model_to_dict(model)))
        write_new(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    print(f"train accuracy {train_acc:.4f}")
    print(f"test accuracy {test_acc:.4f}")
    print(f"wrote {model_path} and {manifest_path}")
    return 0


def _load_trained(cfg: dict, args):
    out = _out_dir(cfg)
    model_path = Path(args.model) if args.model else out / "model.json"
    manifest_path = model_path.with_name("dataset.json")
    hint = f"run `advconnect train --out {model_path.parent}` first"
    if not model_path.exists():
        raise UsageError(f"model file {model_path} not found; {hint}")
    if not manifest_path.exists():
        raise UsageError(f"dataset manifest {manifest_path} not found; {hint}")
    try:
        model = load_model(model_path)
    except ModelFormatError as exc:
        raise UsageError(f"cannot load {model_path}: {exc}") from None
    manifest = json.loads(manifest_path.read_text())
    dp = DataParams(**{**manifest["data"], "per_class": tuple(manifest["data"]["per_class"])})
    data = dp.make(manifest["seed"])
    if data.fingerprint() != manifest["fingerprint"]:
        raise UsageError(f"dataset regenerated from {manifest_path} does not match its fingerprint")
    if model.input_dim != dp.dim or model.class_count != dp.class_count:
        raise UsageError(f"{model_path} does not match the dataset in {manifest_path}")
    return model, data


def _emit_report(cfg: dict, args, stem: str, report) -> None:
    csv_path, jsonl_path = _paths(cfg, stem, args.tag)
    extra = {}
    if report.kind == "ea_compare":
        name = f"{stem}-{args.tag}" if args.tag else stem
        timing = harness.Report(report.kind, report.group_keys, harness.EA_TIME_METRICS, report.records)
        improvements = harness.ea_improvements(report)
        extra[_out_dir(cfg) / f"{name}_time.csv"] = timing.to_csv()
        extra[_out_dir(cfg) / f"{name}_improvement.csv"] = harness.rows_to_csv(
            improvements,
            {
                "norm": "Norm",
                "succ_gain": "Succ. gain",
                "gen_reduction_pct": "Gen. reduction %",
                "query_reduction_pct": "Query reduction %",
            },
        )
    _refuse_existing(csv_path, jsonl_path, *extra)
    write_new(csv_path, report.to_csv())
    write_new(jsonl_path, report.to_jsonl())
    for path, text in extra.items():
        write_new(path, text)
    print(report.to_csv(), end="")
    print(f"wrote {csv_path} and {jsonl_path}")
    for item in report.skipped:
        print(f"skipped case: {json.dumps(item, sort_keys=True)}", file=sys.stderr)


def cmd_experiment(cfg: dict, args) -> int:
    spec = experiment_spec(cfg, args.command)
    _refuse_existing(*_paths(cfg, args.command, args.tag))
    model, data = _load_trained(cfg, args)
    report = harness.run(spec, model, data)
    _emit_report(cfg, args, args.command, report)
    return 0


def cmd_selftest(cfg: dict, args) -> int:
    from . import selftest

    if args.corrupt == "l1-projection":
        selftest.corrupt_l1_projection()
    failed = selftest.run_all()
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advconnect", description="Adversarial path connectivity and Bezier-crossover EA attacks."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, experiment=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, help="worker threads; results do not depend on this")
        if experiment:
            p.add_argument("--norm", choices=ALL_NORMS, help="restrict to one norm")
            p.add_argument("--model", help="model file (default: OUT/model.json)")
            p.add_argument("--tag", help="suffix for output file names")

    common(sub.add_parser("train", help="generate the synthetic dataset and train the classifier"), experiment=False)
    p = sub.add_parser("connect", help="connectivity along optimized Bezier paths")
    common(p)
    p.add_argument("--setting", choices=ALL_SETTINGS)
    p.add_argument("--linear", action="store_true", help="also evaluate straight-line paths")
    for name, text in (
        ("transfer", "transfer of optimized paths to unseen images"),
        ("aux", "auxiliary-image ablation"),
        ("converge", "coverage vs optimization epochs and sampling density"),
    ):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--setting", choices=ALL_SETTINGS)
    common(sub.add_parser("compare", help="uniform-crossover EA vs Bezier-crossover EA"))
    common(sub.add_parser("obfuscated", help="PGD vs Bezier-crossover EA under input quantization"))
    p = sub.add_parser("selftest", help="run the fast invariant suite")
    p.add_argument("--corrupt", choices=["l1-projection"], help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "selftest":
            return cmd_selftest({}, args)
        cfg = apply_flags(load_config(args.config), args)
        if args.command == "train":
            return cmd_train(cfg, args)
        return cmd_experiment(cfg, args)
    except ConfigError as exc:
        print(f"advconnect: config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"advconnect: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
