"""Command-line entry point.

Settings resolve as: command-line flags, then ``--config`` file values, then
built-in defaults.  Every command that writes an artifact also writes the
fully resolved settings next to it as ``<output>.config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from doublespend_gnn import gnn
from doublespend_gnn.errors import InvalidInputError, InvalidParametersError, ShapeError
from doublespend_gnn.pipeline import (
    DatasetSpec, TrainConfig, TrainingDivergedError, build_dataset, evaluate, format_metrics,
    format_table, read_dataset, run_experiment, split_dataset, train_model, with_layer,
    write_dataset)
from doublespend_gnn.topology import generate_ba, validate_topology, write_topology

GRAD_TOLERANCE = 1e-4

COMMON = {"seed": 0, "workers": 0}
DEFAULTS = {
    "gen-topology": {"nodes": 14000, "m": 8, "out": None},
    "build-dataset": {"nodes": 14000, "observers": 250, "samples": 1000, "positive_fraction": 0.5,
                      "m": 8, "latency_mean": 1.0, "max_attack_delay": "0", "delay_factor": 2.0,
                      "shared_topology": False, "compact": False, "out": None},
    "train": {"dataset": None, "out": None, "split_seed": 0, "train_fraction": 0.7,
              "layer": "gcn", "hidden": 32, "dropout": 0.5, "lr": 0.01, "epochs": 100,
              "batch_size": 32, "patience": 10, "feature_scaling": "none"},
    "evaluate": {"dataset": None, "checkpoint": None, "out": None, "split": "test"},
    "grad-check": {"layer": "gat", "nodes": 6, "hidden": 32, "step": 1e-5, "samples": 50},
    "report": {"nodes": 1400, "observers": "25", "layers": "gcn,graphsage,gat", "samples": 300,
               "m": 8, "max_attack_delay": "0", "cv_folds": 5, "hidden": 32, "dropout": 0.5,
               "lr": 0.01, "epochs": 100, "batch_size": 32, "patience": 10,
               "feature_scaling": "none", "out": None},
}
REQUIRED = {"gen-topology": ["out"], "build-dataset": ["out"], "train": ["dataset", "out"],
            "evaluate": ["dataset", "checkpoint", "out"]}


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _parse_config_file(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise CLIError("missing-file", f"config file {path} does not exist")
    values = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError("bad-config", f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(value, default):
    if isinstance(value, str) and default is not None and not isinstance(default, str):
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes", "on")
        return type(default)(value)
    return value


def resolve(command: str, flags: dict) -> dict:
    defaults = {**COMMON, **DEFAULTS[command]}
    resolved = dict(defaults)
    if flags.get("config"):
        for key, value in _parse_config_file(flags["config"]).items():
            if key not in defaults:
                raise CLIError("bad-config", f"unknown config key {key!r} for {command}")
            resolved[key] = value
    for key, value in flags.items():
        if key in defaults and value is not None:
            resolved[key] = value
    try:
        resolved = {k: _coerce(v, defaults[k]) for k, v in resolved.items()}
    except ValueError as exc:
        raise CLIError("bad-config", str(exc)) from None
    for key in REQUIRED.get(command, []):
        if resolved.get(key) in (None, ""):
            raise CLIError("missing-argument", f"{command} needs --{key.replace('_', '-')}")
    return resolved


def format_config(command: str, resolved: dict) -> str:
    lines = [f"command = {command}"]
    lines += [f"{k} = {'' if v is None else v}" for k, v in sorted(resolved.items())]
    return "\n".join(lines) + "\n"


def _write_config(command: str, resolved: dict, out: str) -> None:
    Path(str(out) + ".config").write_text(format_config(command, resolved))


def _delay(value: str) -> float | None:
    return None if str(value).lower() == "auto" else float(value)


def _train_config(r: dict, layer: str | None = None) -> TrainConfig:
    return TrainConfig(layer_kind=layer or r["layer"], hidden=r["hidden"], dropout=r["dropout"],
                       lr=r["lr"], epochs=r["epochs"], batch_size=r["batch_size"],
                       patience=r["patience"], feature_scaling=r["feature_scaling"])


# --------------------------------------------------------------------------
# commands


def cmd_gen_topology(r: dict) -> int:
    t = generate_ba(r["nodes"], r["m"], r["seed"])
    problems = validate_topology(t)
    if problems:
        raise CLIError("invariant-violation", f"generated topology violates {','.join(problems)}")
    write_topology(t, r["out"])
    _write_config("gen-topology", r, r["out"])
    print(f"wrote {r['out']}: {t.node_count} nodes, {t.edge_count} edges")
    return 0


def cmd_build_dataset(r: dict) -> int:
    spec = DatasetSpec(node_count=r["nodes"], observer_count=r["observers"],
                       total_samples=r["samples"], positive_fraction=r["positive_fraction"],
                       ba_m=r["m"], master_seed=r["seed"], latency_mean=r["latency_mean"],
                       max_attack_delay=_delay(r["max_attack_delay"]),
                       delay_factor=r["delay_factor"], shared_topology=r["shared_topology"])
    samples = build_dataset(spec, r["workers"] or None)
    write_dataset(spec, samples, r["out"], inline_edges=not r["compact"],
                  include_features=not r["compact"])
    _write_config("build-dataset", r, r["out"])
    positives = sum(s.graph_label for s in samples)
    print(f"wrote {r['out']}: {len(samples)} samples, {positives} positive")
    return 0


def cmd_train(r: dict) -> int:
    _, samples = read_dataset(r["dataset"])
    train, _ = split_dataset(samples, r["train_fraction"], r["split_seed"])
    config = _train_config(r)
    result = train_model(train, config, r["seed"])
    gnn.save_checkpoint(result.params, r["out"],
                        {"train": asdict(config), "seed": r["seed"], "dataset": r["dataset"],
                         "split_seed": r["split_seed"], "train_fraction": r["train_fraction"]})
    curve = Path(str(r["out"]) + ".loss.csv")
    curve.write_text("epoch,train_loss\n" + "".join(
        f"{i},{loss!r}\n" for i, loss in enumerate(result.loss_curve)))
    _write_config("train", r, r["out"])
    final = result.loss_curve[-1] if result.loss_curve else float("nan")
    print(f"wrote {r['out']}: {len(result.loss_curve)} epochs, final train loss {final:.4f}")
    return 0


def cmd_evaluate(r: dict) -> int:
    params, ckpt = gnn.load_checkpoint(r["checkpoint"])
    _, samples = read_dataset(r["dataset"])
    if r["split"] == "test":
        _, samples = split_dataset(samples, ckpt.get("train_fraction", 0.7), ckpt.get("split_seed", 0))
    elif r["split"] != "all":
        raise CLIError("bad-config", "split must be 'test' or 'all'")
    scaling = ckpt.get("train", {}).get("feature_scaling", "none")
    metrics = evaluate(params, samples, scaling)
    title = f"layer {params.layer_kind.value}, {len(samples)} samples ({r['split']})"
    text = format_metrics(metrics, title)
    Path(r["out"]).write_text(text)
    _write_config("evaluate", r, r["out"])
    print(text, end="")
    return 0


def cmd_grad_check(r: dict) -> int:
    import numpy as np
    from doublespend_gnn.topology import Topology

    rng = np.random.default_rng(r["seed"])
    n = r["nodes"]
    # ring plus random chords keeps the graph connected
    edges = {(i, (i + 1) % n) for i in range(n) if n > 1}
    edges |= {(int(u), int(v)) for u, v in rng.integers(0, n, size=(n, 2)) if u != v}
    t = Topology.from_edges(n, sorted({(min(e), max(e)) for e in edges}))
    x = rng.normal(size=(n, 12))
    params = gnn.init_params(r["layer"], 12, r["hidden"], seed=rng)
    err = gnn.grad_check(params, t, x, int(rng.integers(2)), r["step"], r["samples"], r["seed"])
    print(f"{err:.3e}")
    return 0 if err < GRAD_TOLERANCE else 1


def cmd_report(r: dict) -> int:
    observers = [int(k) for k in str(r["observers"]).split(",")]
    layers = [s.strip() for s in str(r["layers"]).split(",")]
    base = _train_config({**r, "layer": layers[0]})
    results = []
    for k in observers:
        spec = DatasetSpec(node_count=r["nodes"], observer_count=k, total_samples=r["samples"],
                           ba_m=r["m"], master_seed=r["seed"],
                           max_attack_delay=_delay(r["max_attack_delay"]))
        samples = build_dataset(spec, r["workers"] or None)
        for layer in layers:
            res, _ = run_experiment(spec, with_layer(base, layer), r["seed"], r["cv_folds"], samples)
            results.append(res)
    table = format_table(results)
    if r["out"]:
        Path(r["out"]).write_text(table)
        _write_config("report", r, r["out"])
    print(table, end="")
    return 0


COMMANDS = {"gen-topology": cmd_gen_topology, "build-dataset": cmd_build_dataset,
            "train": cmd_train, "evaluate": cmd_evaluate, "grad-check": cmd_grad_check,
            "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, defaults in DEFAULTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        for key, default in {**COMMON, **defaults}.items():
            flag = "--" + key.replace("_", "-")
            if key == "layer":
                p.add_argument(flag, choices=[k.value for k in gnn.LayerKind], default=None)
            elif isinstance(default, bool):
                p.add_argument(flag, action="store_const", const=True, default=None)
            elif isinstance(default, (int, float)):
                p.add_argument(flag, type=type(default), default=None)
            else:
                p.add_argument(flag, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
        resolved = resolve(args.command, flags)
        for key in ("dataset", "checkpoint"):
            if resolved.get(key) and not Path(resolved[key]).exists():
                raise CLIError("missing-file", f"{resolved[key]} does not exist")
        return COMMANDS[args.command](resolved)
    except CLIError as exc:
        code, message = exc.code, str(exc)
    except (InvalidParametersError, ShapeError) as exc:
        code, message = "invalid-parameters", str(exc)
    except InvalidInputError as exc:
        code, message = "invalid-input", str(exc)
    except TrainingDivergedError as exc:
        code, message = "training-diverged", str(exc)
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
