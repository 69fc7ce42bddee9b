"""Command-line pipeline: synth, build-graphs, train, eval, studies.

One JSON config drives every subcommand; individual keys can be
overridden with ``--set section.key value``.  Exit codes: 0 success,
1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from roadflow.data import (
    SyntheticSpec,
    compute_stats,
    load_speeds,
    split_and_window,
    split_rows,
    write_synthetic,
)
from roadflow.errors import ConfigError, DataError, NumericError
from roadflow.geometry import load_links
from roadflow.graphs import (
    GraphBuildParams,
    build_graph_elements,
    load_bundle,
    save_bundle,
)
from roadflow.model import Forecaster, ModelConfig
from roadflow.tensor import load_checkpoint
from roadflow.train_eval import (
    TrainConfig,
    compute_metrics,
    evaluate,
    historical_average,
    run_ablation,
    run_experiment,
    run_khop_study,
    save_reports,
)

SECTIONS = {
    "paths": {"geometry": "links.csv", "speeds": "speeds.csv", "output": "out"},
    "synthetic": SyntheticSpec,
    "graphs": GraphBuildParams,
    "model": ModelConfig,
    "training": TrainConfig,
    "study": {"seeds": [0], "k_values": [1, 2, 3], "removals": list(ModelConfig().enabled_groups)},
    "data": {"history": 12, "horizon": 12, "ratios": [0.7, 0.1, 0.2], "exclude_weekends": True},
}


def _section_defaults(name: str) -> dict:
    spec = SECTIONS[name]
    return dict(spec) if isinstance(spec, dict) else asdict(spec())


def default_config() -> dict:
    return {name: _section_defaults(name) for name in SECTIONS}


def load_config(path: str | None, overrides: list[list[str]]) -> dict:
    config = default_config()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        for section, values in user.items():
            if section not in config:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in values.items():
                if key not in config[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                config[section][key] = value
    for key_path, raw in overrides or []:
        parts = key_path.split(".")
        if len(parts) != 2 or parts[0] not in config or parts[1] not in config[parts[0]]:
            raise ConfigError(f"unknown override key {key_path!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        config[parts[0]][parts[1]] = value
    return config


def _echo_config(config: dict, out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(config, indent=2, default=str))


def _build_dataclass(cls, section: dict):
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for k, v in section.items():
        if k not in names:
            raise ConfigError(f"unknown key {k!r} for {cls.__name__}")
        kwargs[k] = v
    return cls(**kwargs)


def _load_splits(config: dict, links):
    series = load_speeds(config["paths"]["speeds"], expected_n=len(links))
    d = config["data"]
    return series, split_and_window(
        series,
        d["history"],
        d["horizon"],
        ratios=tuple(d["ratios"]),
        exclude_weekends=d["exclude_weekends"],
    )


def _graphs_dir(config: dict) -> Path:
    return Path(config["paths"]["output"]) / "graphs"


def cmd_synth(config: dict) -> str:
    spec = _build_dataclass(SyntheticSpec, config["synthetic"])
    out = Path(config["paths"]["output"])
    geom, speeds = write_synthetic(spec, out)
    config["paths"]["geometry"] = str(geom)
    config["paths"]["speeds"] = str(speeds)
    _echo_config(config, out, "synth_config.json")
    return f"wrote {geom} and {speeds}"


def cmd_build_graphs(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    params = _build_dataclass(GraphBuildParams, config["graphs"])
    elements = build_graph_elements(links, params)
    out = _graphs_dir(config)
    save_bundle(
        elements,
        out,
        meta_extra={
            "sigma": params.sigma,
            "kappa": params.kappa,
            "hybrid_mode": params.hybrid_mode,
            "direction_convention": params.direction_convention,
        },
    )
    _echo_config(config, out, "build_config.json")
    return f"wrote graph bundle with {elements.n} nodes to {out}"


def cmd_validate(config: dict) -> str:
    elements, meta = load_bundle(_graphs_dir(config))
    n = elements.n
    base = elements.distance[0].values
    for name, group in elements.groups().items():
        for w in group:
            if not np.all(np.isfinite(w.values)):
                raise DataError(f"{name}: non-finite entries")
            if np.any(np.abs(np.diag(w.values)) > 0):
                raise DataError(f"{name}: nonzero diagonal")
    if np.any(base < 0) or np.any(base > 1):
        raise DataError("distance graph entries outside [0, 1]")
    if meta.get("hybrid_mode", "value") == "value":
        mask = base > 0
        # dividing out the distance kernel recovers the partitioned values,
        # whose sums must reproduce the source matrices
        dir_sum = sum(w.values for w in elements.direction_hybrid)
        ratio = dir_sum[mask] / base[mask]
        if np.any(ratio < 0) or np.any(ratio >= 1):
            raise DataError("direction hybrids do not partition a [0,1) direction graph")
        dist_sum = sum(w.values for w in elements.distance_partitioned)
        if np.any(np.abs(dist_sum[mask] / base[mask] - base[mask]) > 1e-9):
            raise DataError("partitioned distance slices do not sum back to the distance graph")
    for w in elements.positional_hybrid:
        extra = w.values[base == 0]
        if np.any(extra != 0):
            raise DataError("positional hybrid has weight where the distance graph is zero")
    return f"graph bundle valid (n={n})"


def cmd_train(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    elements, _ = load_bundle(_graphs_dir(config))
    series, (train_set, val_set, test_set) = _load_splits(config, links)
    model_config = ModelConfig.from_dict({**config["model"], "n_links": elements.n})
    train_config = _build_dataclass(TrainConfig, config["training"])
    out = Path(config["paths"]["output"])
    report, state, _ = run_experiment(
        elements,
        train_set,
        val_set,
        test_set,
        model_config,
        train_config,
        checkpoint_dir=out / "checkpoint",
        label=model_config.spatial_block_kind,
    )
    save_reports([report], out / "train_report.json")
    _echo_config(config, out, "resolved_config.json")
    return (
        f"trained {state.epochs_run} epochs, best val MAE {state.best_val_mae:.4f}, "
        f"test MAE {report.mae:.4f} RMSE {report.rmse:.4f}"
    )


def cmd_eval(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    elements, _ = load_bundle(_graphs_dir(config))
    series, (train_set, val_set, test_set) = _load_splits(config, links)
    model_config = ModelConfig.from_dict({**config["model"], "n_links": elements.n})
    model = Forecaster(elements, model_config)
    out = Path(config["paths"]["output"])
    load_checkpoint(model.parameters(), out / "checkpoint")
    stats = compute_stats(train_set.history)
    report = evaluate(model, test_set, stats, label="eval")
    save_reports([report], out / "eval_report.json")
    return f"test MAE {report.mae:.4f} MAPE {report.mape:.4f} RMSE {report.rmse:.4f}"


def cmd_baseline(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    series, (train_set, val_set, test_set) = _load_splits(config, links)
    d = config["data"]
    rows = split_rows(series, ratios=tuple(d["ratios"]), exclude_weekends=d["exclude_weekends"])
    pred = historical_average(series, rows["train"], test_set)
    report = compute_metrics(pred, test_set.target, label="historical_average")
    out = Path(config["paths"]["output"])
    save_reports([report], out / "baseline_report.json")
    return f"HA test MAE {report.mae:.4f} MAPE {report.mape:.4f} RMSE {report.rmse:.4f}"


def cmd_ablate(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    elements, _ = load_bundle(_graphs_dir(config))
    series, splits = _load_splits(config, links)
    model_config = ModelConfig.from_dict({**config["model"], "n_links": elements.n})
    train_config = _build_dataclass(TrainConfig, config["training"])
    reports = run_ablation(
        elements,
        splits,
        model_config,
        train_config,
        removals=tuple(config["study"]["removals"]),
        seeds=tuple(config["study"]["seeds"]),
    )
    out = Path(config["paths"]["output"])
    save_reports(reports, out / "ablation_report.json")
    return "ablation rows: " + "; ".join(f"{r.label} MAE {r.mae:.4f}" for r in reports)


def cmd_khop(config: dict) -> str:
    links = load_links(config["paths"]["geometry"])
    elements, _ = load_bundle(_graphs_dir(config))
    series, splits = _load_splits(config, links)
    model_config = ModelConfig.from_dict({**config["model"], "n_links": elements.n})
    train_config = _build_dataclass(TrainConfig, config["training"])
    reports = run_khop_study(
        elements,
        splits,
        model_config,
        train_config,
        k_values=tuple(config["study"]["k_values"]),
        seeds=tuple(config["study"]["seeds"]),
    )
    out = Path(config["paths"]["output"])
    save_reports(reports, out / "khop_report.json")
    return "khop rows: " + "; ".join(f"{r.label} RMSE {r.rmse:.4f}" for r in reports)


COMMANDS = {
    "synth": cmd_synth,
    "build-graphs": cmd_build_graphs,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
    "khop": cmd_khop,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            nargs=2,
            action="append",
            metavar=("KEY", "VALUE"),
            help="override section.key with a JSON value",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        config = load_config(args.config, args.overrides)
        message = COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
