"""Command-line entry point: data generation, training, evaluation with
baseline comparison, gradient checking, and serving simulation.

Every hyperparameter lives in a JSON config file and can be overridden by a
flag (flags win). Every run writes a manifest next to its outputs with the
fully resolved config, enough to reproduce the run exactly. Diagnostics go to
stderr; data goes to files only.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .core import Feature, FeatureSchema, StageAssignment, pack_groups, validate_dataset
from .datagen import (
    DEFAULT_FEATURE_QUALITY,
    FeatureQuality,
    GenConfig,
    default_assignment,
    default_schema,
    generate,
    read_dataset,
    write_dataset,
)
from .evaluator import (
    baseline_single_stage,
    baseline_soft_cascade,
    baseline_two_stage,
    evaluate,
    fit_two_stage,
)
from .objective import ObjectiveConfig
from .simulator import simulate
from .trainer import TrainConfig, gradient_check, init_weights, load_model, save_model, train
from .objective import loss as loss_fn_real

MANIFEST_NAME = "manifest.json"


def default_config() -> dict:
    schema = default_schema()
    return {
        "schema": {
            "features": [
                {"name": f.name, "cost": f.cost, "kind": f.kind} for f in schema.features
            ],
            "stages": [
                ["sales_volume", "postpay_score"],
                ["ctr_score"],
                ["relevance_score", "deep_wide_score"],
            ],
            "query_bins": list(schema.query_bin_edges),
        },
        "objective": {
            "alpha": 0.1, "beta": 1.0, "gamma": 10.0, "delta": 1.0,
            "latency_penalty_weight": 0.05, "result_floor": 200.0,
            "latency_ceiling": 19500.0, "purchase_weight": 10.0, "price_weight": 1.0,
            "squared_l2": True, "penalty_per_instance": False,
            "latency_survivor_form": False, "cost_units_per_ms": 150.0,
        },
        "train": {
            "objective": "l3", "learning_rate": 0.1, "lr_decay": 0.95, "epochs": 50,
            "batch_size": 32, "seed": 7, "init_scale": 0.01, "holdout_fraction": 0.2,
        },
        "datagen": {
            "n_queries": 2000, "head_fraction": 0.5,
            "head_mcount_range": [10000, 50000], "tail_mcount_range": [300, 3000],
            "group_size_cap": 20, "positives_ratio": 0.1, "label_noise": 0.75,
            "purchase_fraction_of_positives": 0.1, "purchase_price_tilt": 1.5,
            "feature_quality": [
                {"signal_strength": q.signal_strength, "noise": q.noise,
                 "price_strength": q.price_strength} for q in DEFAULT_FEATURE_QUALITY
            ],
            "price_mean_log": 3.5, "price_sigma_log": 0.8, "price_floor": 1.05,
            "seed": 0,
        },
        "eval": {"two_stage_keep_k": 6000},
        "simulate": {"traffic_multiplier": 1.0, "stochastic": False},
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None) -> dict:
    cfg = default_config()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    return cfg


def schema_from_config(cfg: dict) -> FeatureSchema:
    sc = cfg["schema"]
    return FeatureSchema(
        features=tuple(Feature(f["name"], float(f["cost"]), f.get("kind", "statistical"))
                       for f in sc["features"]),
        query_bin_edges=tuple(sc["query_bins"]),
    )


def assignment_from_config(cfg: dict, schema: FeatureSchema) -> StageAssignment:
    return StageAssignment.from_names(schema, cfg["schema"]["stages"])


def objective_from_config(cfg: dict) -> ObjectiveConfig:
    return ObjectiveConfig(**cfg["objective"])


def train_from_config(cfg: dict) -> TrainConfig:
    tc = {k: v for k, v in cfg["train"].items() if k != "holdout_fraction"}
    return TrainConfig(**tc)


def gen_from_config(cfg: dict) -> GenConfig:
    dg = dict(cfg["datagen"])
    dg["feature_quality"] = tuple(
        FeatureQuality(q["signal_strength"], q.get("noise", 1.0), q.get("price_strength", 0.0))
        for q in dg["feature_quality"]
    )
    dg["head_mcount_range"] = tuple(dg["head_mcount_range"])
    dg["tail_mcount_range"] = tuple(dg["tail_mcount_range"])
    return GenConfig(**dg)


_FLAG_TO_KEY = {
    "objective": ("train", "objective"),
    "alpha": ("objective", "alpha"),
    "beta": ("objective", "beta"),
    "gamma": ("objective", "gamma"),
    "delta": ("objective", "delta"),
    "latency_penalty": ("objective", "latency_penalty_weight"),
    "purchase_weight": ("objective", "purchase_weight"),
    "price_weight": ("objective", "price_weight"),
    "result_floor": ("objective", "result_floor"),
    "latency_ceiling": ("objective", "latency_ceiling"),
    "lr": ("train", "learning_rate"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "traffic": ("simulate", "traffic_multiplier"),
}


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(cfg)
    for flag, (section, key) in _FLAG_TO_KEY.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[section][key] = val
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["datagen"]["seed"] = args.seed
    if getattr(args, "unsquared_l2", False):
        cfg["objective"]["squared_l2"] = False
    if getattr(args, "stochastic", False):
        cfg["simulate"]["stochastic"] = True
    return cfg


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, cfg: dict,
                   outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": cfg,
        "seed": cfg["train"]["seed"] if command != "datagen" else cfg["datagen"]["seed"],
        "inputs": {
            "dataset": getattr(args, "dataset", None),
            "model": getattr(args, "model", None),
        },
        "outputs": outputs,
        "out_dir": str(out_dir),
        "tool_version": __version__,
        "wall_time_s": time.monotonic() - started,
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _split_holdout(groups, fraction: float, seed: int):
    if fraction <= 0 or len(groups) < 2:
        return groups, None
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(len(groups))
    n_hold = max(1, int(round(fraction * len(groups))))
    hold = [groups[i] for i in sorted(order[:n_hold])]
    kept = [groups[i] for i in sorted(order[n_hold:])]
    return kept, hold


def cmd_datagen(args) -> int:
    started = time.monotonic()
    cfg = apply_overrides(load_config(args.config), args)
    schema = schema_from_config(cfg)
    gen_cfg = gen_from_config(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = generate(gen_cfg, schema)
    violations = validate_dataset(groups, schema)
    if violations:
        print(f"generated data failed validation: {violations[:3]}", file=sys.stderr)
        return 1
    write_dataset(out_dir / "dataset.txt", groups)
    write_manifest(out_dir, "datagen", args, cfg, ["dataset.txt"], started)
    return 0


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = apply_overrides(load_config(args.config), args)
    schema = schema_from_config(cfg)
    assignment = assignment_from_config(cfg, schema)
    obj_cfg = objective_from_config(cfg)
    train_cfg = train_from_config(cfg)
    groups = read_dataset(args.dataset, schema)
    train_groups, holdout = _split_holdout(
        groups, cfg["train"].get("holdout_fraction", 0.0), train_cfg.seed
    )
    model, log = train(train_groups, schema, assignment, obj_cfg, train_cfg,
                       eval_data=holdout)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.txt")
    with open(out_dir / "trainlog.ndjson", "w", encoding="utf-8") as fh:
        for r in log.records:
            fh.write(json.dumps({
                "epoch": r.epoch, "total": r.total, "nll": r.nll,
                "expected_cost": r.expected_cost, "size_penalty": r.size_penalty,
                "latency_penalty": r.latency_penalty, "auc": r.auc,
                "wall_time_s": r.wall_time_s,
            }) + "\n")
    write_manifest(out_dir, "train", args, cfg, ["model.txt", "trainlog.ndjson"], started)
    return 0


def _baseline_cost(schema: FeatureSchema, n_instances: int) -> float:
    return float(n_instances * schema.costs().sum())


def cmd_eval(args) -> int:
    started = time.monotonic()
    cfg = apply_overrides(load_config(args.config), args)
    schema = schema_from_config(cfg)
    obj_cfg = objective_from_config(cfg)
    model = load_model(args.model, schema)
    groups = read_dataset(args.dataset, schema)
    packed = pack_groups(groups)
    base = _baseline_cost(schema, packed.n_instances)
    report = evaluate(model, packed, obj_cfg, baseline_cost=base)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = report.to_text()
    if args.compare:
        train_cfg = train_from_config(cfg)
        all_feats = tuple(range(schema.item_dim))
        cheap = tuple(i for i, f in enumerate(schema.features) if f.kind == "statistical")
        keep_k = int(cfg["eval"]["two_stage_keep_k"])
        filt = min(cheap or all_feats, key=lambda i: schema.features[i].cost)
        _, rep_all = baseline_single_stage(groups, schema, all_feats, obj_cfg, train_cfg, base)
        _, rep_cheap = baseline_single_stage(groups, schema, cheap or all_feats[:1],
                                             obj_cfg, train_cfg, base)
        rep_two = baseline_two_stage(groups, schema, filt, keep_k, obj_cfg, train_cfg, base)
        assignment = assignment_from_config(cfg, schema)
        rep_soft = baseline_soft_cascade(groups, schema, assignment, obj_cfg, train_cfg, base)
        rows = [
            ("single-all", rep_all), ("single-cheap", rep_cheap), ("two-stage", rep_two),
            ("soft-cascade", rep_soft), ("cloes", report),
        ]
        lines = ["compare method auc cost_ratio"]
        for name, rep in rows:
            lines.append(f"compare {name} {rep.auc:.4f} {rep.expected_cost_ratio:.4f}")
        text += "\n".join(lines) + "\n"
    with open(out_dir / "eval.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    report.write_records(out_dir / "eval_records.ndjson")
    write_manifest(out_dir, "eval", args, cfg, ["eval.txt", "eval_records.ndjson"], started)
    return 0


def cmd_simulate(args) -> int:
    started = time.monotonic()
    cfg = apply_overrides(load_config(args.config), args)
    schema = schema_from_config(cfg)
    obj_cfg = objective_from_config(cfg)
    model = load_model(args.model, schema)
    groups = read_dataset(args.dataset, schema)
    multiplier = float(cfg["simulate"]["traffic_multiplier"])
    if multiplier <= 0:
        print("--traffic must be > 0", file=sys.stderr)
        return 2
    report = simulate(model, groups, obj_cfg, traffic_multiplier=multiplier,
                      stochastic=bool(cfg["simulate"]["stochastic"]),
                      seed=int(cfg["train"]["seed"]))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sim.txt", "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    report.write_records(out_dir / "sim_records.ndjson")
    write_manifest(out_dir, "simulate", args, cfg, ["sim.txt", "sim_records.ndjson"], started)
    return 0


def cmd_gradcheck(args) -> int:
    started = time.monotonic()
    cfg = apply_overrides(load_config(args.config), args)
    schema = schema_from_config(cfg)
    assignment = assignment_from_config(cfg, schema)
    obj_cfg = objective_from_config(cfg)
    seed = int(cfg["train"]["seed"])
    if args.dataset:
        groups = read_dataset(args.dataset, schema)
    else:
        gen_cfg = gen_from_config(cfg)
        groups = generate(replace(gen_cfg, n_queries=min(gen_cfg.n_queries, 10), seed=seed),
                          schema)
    model = init_weights(schema, assignment, seed, 0.5)

    loss_fn = None
    if args.corrupt_gradient:
        def loss_fn(model_, data_, cfg_, objective_="l3", want_grad=True):
            bd = loss_fn_real(model_, data_, cfg_, objective_, want_grad)
            if want_grad and bd.gradient.size:
                g = bd.gradient.copy()
                g[0] += 1.0 + abs(g[0])
                bd = replace(bd, gradient=g)
            return bd

    objective = cfg["train"]["objective"]
    report = gradient_check(model, groups, obj_cfg, objective=objective,
                            h=args.h, tolerance=args.tolerance, seed=seed,
                            loss_fn=loss_fn)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "gradcheck.txt", "w", encoding="utf-8") as fh:
        fh.write(f"objective {objective}\nchecked_coords {report.checked_coords}\n"
                 f"max_rel_error {report.max_rel_error:.3e}\n"
                 f"tolerance {report.tolerance:.3e}\npassed {report.passed}\n")
    write_manifest(out_dir, "gradcheck", args, cfg, ["gradcheck.txt"], started)
    if not report.passed:
        print(f"gradient check FAILED: max relative error {report.max_rel_error:.3e} "
              f"exceeds {report.tolerance:.3e} at coords "
              f"{[c for c, _ in report.failures[:5]]}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None)
    shared.add_argument("--out", type=str, required=True)
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--objective", choices=["l1", "l2", "l3"], default=None)
    for flag in ("--alpha", "--beta", "--gamma", "--delta", "--latency-penalty",
                 "--purchase-weight", "--price-weight", "--result-floor",
                 "--latency-ceiling", "--lr"):
        shared.add_argument(flag, type=float, default=None)
    shared.add_argument("--epochs", type=int, default=None)
    shared.add_argument("--batch-size", type=int, default=None)
    shared.add_argument("--unsquared-l2", action="store_true")

    parser = argparse.ArgumentParser(prog="cascade-ranker",
                                     description="Cost-aware cascade ranking toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[shared], help="generate a synthetic dataset")
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", parents=[shared], help="train a cascade model")
    p.add_argument("--dataset", type=str, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[shared], help="evaluate a model, optionally vs baselines")
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--compare", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("simulate", parents=[shared], help="replay serving over a dataset")
    p.add_argument("--dataset", type=str, required=True)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--traffic", type=float, default=None)
    p.add_argument("--stochastic", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gradcheck", parents=[shared],
                       help="verify analytic gradients against finite differences")
    p.add_argument("--dataset", type=str, default=None)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def rerun_from_manifest(manifest_path, out_dir) -> int:
    """Re-execute a command from its manifest's resolved config snapshot."""
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg_path = Path(out_dir) / "_manifest_config.json"
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    with open(cfg_path, "w", encoding="utf-8") as fh:
        json.dump(manifest["config"], fh)
    argv = [manifest["command"], "--config", str(cfg_path), "--out", str(out_dir)]
    for key in ("dataset", "model"):
        if manifest["inputs"].get(key):
            argv += [f"--{key}", manifest["inputs"][key]]
    return main(argv)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
