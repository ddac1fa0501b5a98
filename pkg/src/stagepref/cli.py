"""Command-line entry points.

Every experiment command reads one JSON config document (optional; each
command has complete defaults), applies ``--set dotted.path=value``
overrides, runs, and writes its outputs plus a manifest into ``--out``.
Identical configs and seeds produce byte-identical CSV/JSON outputs.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys

import numpy as np

from .complexity import (
    QUERY_MODES,
    TabularExperimentConfig,
    count_sort_comparisons,
    run_experiment_sweep,
)
from .distance import learned_distance, save_checkpoint
from .gridworld import GridWorld
from .loop import LoopConfig, make_default_world, run_loop
from .manifest import finish_manifest, start_manifest
from .mdp import greedy_policy, make_rng, rollout, value_iteration
from .rewards import Teacher
from .selection import (
    SELECTION_MODES,
    SelectionConfig,
    alignment_case_check,
    build_stage_quasimetric,
)
from .service import LabelingService, load_query_file
from .stages import stage_bound_report


class CliError(Exception):
    """Configuration problems that should exit with status 2."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return doc


def _apply_overrides(config: dict, pairs: list[str]) -> dict:
    config = copy.deepcopy(config)
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--set expects dotted.path=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise CliError(f"--set path {dotted!r} crosses a non-object value")
        node[keys[-1]] = value
    return config


def _merge_defaults(defaults: dict, config: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = value
    return out


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _world_from(config: dict) -> GridWorld:
    cfg = dict(config)
    for key in ("start", "object_cell", "target_cell"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    try:
        return make_default_world(**cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad world config: {exc}") from exc


def _loop_config_from(config: dict) -> LoopConfig:
    cfg = dict(config)
    try:
        selection = SelectionConfig(**cfg.pop("selection", {}))
        teacher = Teacher(**cfg.pop("teacher", {}))
        return LoopConfig(selection=selection, teacher=teacher, **cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad loop config: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


ABSTRACT_DEFAULTS = {
    "n_stages": 101,
    "n_actions": 5,
    "epochs": 100,
    "queries_per_epoch": 200,
    "lr": 0.05,
    "modes": list(QUERY_MODES),
    "r_biases": [0.0, 100.0],
    "seeds": list(range(10)),
}


def cmd_run_abstract(args) -> int:
    config = _merge_defaults(ABSTRACT_DEFAULTS, _apply_overrides(_load_config(args.config), args.set))
    if args.seeds is not None:
        config["seeds"] = list(range(args.seeds))
    for mode in config["modes"]:
        if mode not in QUERY_MODES:
            raise CliError(f"modes: unknown mode {mode!r}")
    manifest = start_manifest("run-abstract", config, config["seeds"])
    base = TabularExperimentConfig(
        n_stages=config["n_stages"], n_actions=config["n_actions"],
        epochs=config["epochs"], queries_per_epoch=config["queries_per_epoch"],
        lr=config["lr"],
    )
    sweep = run_experiment_sweep(config["modes"], config["r_biases"], config["seeds"], base)
    out = _outdir(args)
    curve_path = os.path.join(out, "curves.csv")
    sweep.to_csv(curve_path)
    finish_manifest(manifest, [curve_path], os.path.join(out, "manifest.json"))
    print(f"wrote {curve_path}")
    return 0


SORTCOUNT_DEFAULTS = {"sizes": [[10, 5], [20, 5], [40, 5]], "seed": 0}


def cmd_run_sortcount(args) -> int:
    config = _merge_defaults(SORTCOUNT_DEFAULTS, _apply_overrides(_load_config(args.config), args.set))
    manifest = start_manifest("run-sortcount", config, [config["seed"]])
    reports = []
    for size in config["sizes"]:
        if len(size) != 2:
            raise CliError(f"sizes entries must be [n_stages, n_actions], got {size}")
        reports.append(count_sort_comparisons(int(size[0]), int(size[1]), seed=config["seed"]).to_json_dict())
    out = _outdir(args)
    path = os.path.join(out, "sortcount.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"reports": reports}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    finish_manifest(manifest, [path], os.path.join(out, "manifest.json"))
    print(f"wrote {path}")
    return 0


LOOP_DEFAULTS: dict = {"world": {}, "loop": {}}


def cmd_run_loop(args) -> int:
    config = _merge_defaults(LOOP_DEFAULTS, _apply_overrides(_load_config(args.config), args.set))
    world = _world_from(config["world"])
    loop_cfg = _loop_config_from(config["loop"])
    if loop_cfg.teacher.kind == "human":
        raise CliError("run-loop drives scripted teachers; use `serve` for human labeling")
    manifest = start_manifest("run-loop", config, [loop_cfg.seed])
    out = _outdir(args)
    pref_path = os.path.join(out, "preferences.jsonl")
    if os.path.exists(pref_path):
        os.remove(pref_path)
    result = run_loop(world, loop_cfg, preference_path=pref_path)
    metrics_path = os.path.join(out, "metrics.csv")
    result.metrics_to_csv(metrics_path)
    dist_path = os.path.join(out, "distance.csv")
    learned_distance(result.distance_model, loop_cfg.distance_gamma).to_csv(dist_path)
    ckpt_path = os.path.join(out, "distance_model.json")
    save_checkpoint(result.distance_model, ckpt_path, meta={"seed": loop_cfg.seed})
    result.preferences.close()
    finish_manifest(manifest, [metrics_path, pref_path, dist_path, ckpt_path],
                    os.path.join(out, "manifest.json"))
    print(f"wrote {metrics_path} (final success={result.final_success():.0f}, "
          f"tail success={result.tail_success():.2f})")
    return 0


ABLATION_DEFAULTS: dict = {
    "world": {},
    "loop": {},
    "modes": list(SELECTION_MODES),
    "seeds": [0, 1, 2, 3, 4],
}


def cmd_run_ablation(args) -> int:
    config = _merge_defaults(ABLATION_DEFAULTS, _apply_overrides(_load_config(args.config), args.set))
    for mode in config["modes"]:
        if mode not in SELECTION_MODES:
            raise CliError(f"modes: unknown selection mode {mode!r}")
    manifest = start_manifest("run-ablation", config, config["seeds"])
    out = _outdir(args)
    rows = []
    summary: dict[str, list[float]] = {}
    for mode in config["modes"]:
        for seed in config["seeds"]:
            loop_dict = copy.deepcopy(config["loop"])
            loop_dict.setdefault("selection", {})["mode"] = mode
            loop_dict["seed"] = seed
            world = _world_from(config["world"])
            result = run_loop(world, _loop_config_from(loop_dict))
            summary.setdefault(mode, []).append(result.tail_success())
            for row in result.metrics:
                rows.append([mode, seed, row["iteration"], row["queries_used"],
                             row["success"], repr(row["true_return"])])
    csv_path = os.path.join(out, "ablation.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "seed", "iteration", "queries_used", "success", "true_return"])
        writer.writerows(rows)
    summary_path = os.path.join(out, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump({m: {"tail_success_mean": float(np.mean(v)), "runs": len(v)}
                   for m, v in summary.items()}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    finish_manifest(manifest, [csv_path, summary_path], os.path.join(out, "manifest.json"))
    print(f"wrote {csv_path}")
    for mode in config["modes"]:
        print(f"  {mode}: mean tail success {float(np.mean(summary[mode])):.3f}")
    return 0


BOUNDS_DEFAULTS: dict = {
    "bound": {"episodes": 200, "n_stages": 3, "seed": 0, "world": {}},
    "alignment": {
        "n_stages": 5, "per_stage": 3, "intra": 0.1, "cross_lo": 1.0,
        "cross_hi": 3.0, "samples_per_case": 200, "seed": 0,
    },
}


def cmd_check_bounds(args) -> int:
    config = _merge_defaults(BOUNDS_DEFAULTS, _apply_overrides(_load_config(args.config), args.set))
    b = config["bound"]
    world = _world_from(b["world"])
    rng = make_rng(b["seed"])
    policy = optimal_stochastic_policy(world)
    trajs = [rollout(world.mdp, policy, world.horizon, rng) for _ in range(int(b["episodes"]))]
    bound = stage_bound_report(trajs, world.n_states, int(b["n_stages"]))

    a = config["alignment"]
    quasi = build_stage_quasimetric(
        int(a["n_stages"]), int(a["per_stage"]), float(a["intra"]),
        float(a["cross_lo"]), float(a["cross_hi"]), make_rng(a["seed"]),
    )
    alignment = alignment_case_check(quasi, make_rng(a["seed"] + 1),
                                     samples_per_case=int(a["samples_per_case"]))
    manifest = start_manifest("check-bounds", config, [b["seed"], a["seed"]])
    out = _outdir(args)
    path = os.path.join(out, "bounds.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({
            "stage_bound": bound.to_json_dict(),
            "alignment": alignment.to_json_dict(),
        }, fh, sort_keys=True, indent=2)
        fh.write("\n")
    finish_manifest(manifest, [path], os.path.join(out, "manifest.json"))
    holds = bound.holds and alignment.all_inside and alignment.strictly_increasing
    print(f"wrote {path} (all bounds hold: {holds})")
    return 0 if holds else 1


def optimal_stochastic_policy(world: GridWorld, tol: float = 1e-9) -> np.ndarray:
    """Uniform distribution over optimal actions per state (ties preserved)."""
    q = value_iteration(world.mdp)
    best = q.max(axis=1, keepdims=True)
    mask = (q >= best - tol).astype(float)
    return mask / mask.sum(axis=1, keepdims=True)


def cmd_serve(args) -> int:
    if args.queries is None:
        raise CliError("serve needs --queries FILE (export one with the loop demos)")
    if not os.path.isfile(args.queries):
        raise CliError(f"queries file not found: {args.queries}")
    store = load_query_file(args.queries, log_path=args.log)
    service = LabelingService(store, port=args.port, static_dir=args.static,
                              verbose=args.verbose)
    print(f"labeling service on http://127.0.0.1:{service.port} "
          f"({store.status_counts()['pending']} pending)")
    try:
        service.serve()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagepref",
        description="Stage-aware preference learning experiments on finite MDPs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config leaf by dotted path (repeatable)")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("run-abstract", help="staged-chain query-mode comparison")
    common(p)
    p.add_argument("--seeds", type=int, default=None, help="use seeds 0..N-1")
    p.set_defaults(func=cmd_run_abstract)

    p = sub.add_parser("run-sortcount", help="comparison-count accounting")
    common(p)
    p.set_defaults(func=cmd_run_sortcount)

    p = sub.add_parser("run-loop", help="single feedback-loop run on the gridworld")
    common(p)
    p.set_defaults(func=cmd_run_loop)

    p = sub.add_parser("run-ablation", help="loop sweep across selection modes")
    common(p)
    p.set_defaults(func=cmd_run_ablation)

    p = sub.add_parser("check-bounds", help="stage-measure and alignment-case audits")
    common(p)
    p.set_defaults(func=cmd_check_bounds)

    p = sub.add_parser("serve", help="HTTP labeling service over a query file")
    p.add_argument("--queries", default=None, help="query file (JSON)")
    p.add_argument("--log", default="preferences.jsonl", help="JSONL label log")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--static", default=None, help="serve a frontend build from this dir")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
