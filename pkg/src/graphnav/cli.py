"""Command-line front end: scene generation, training, evaluation, sweeps,
and trajectory export, driven by one JSON run config with overrides.

Exit codes are a stable contract: 0 success, 2 usage or config errors,
3 runtime failures inside a run. Every command that writes artifacts also
writes the resolved run config and its hash next to them. Relative output
directories resolve against $GRAPHNAV_OUT_ROOT when it is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_hash,
    config_to_json,
    load_config,
)
from .envs import SceneBundle, SearchEnv, prepare_scene
from .evaluation import (
    ABLATION_MODES,
    EvalError,
    LawnmowerConfig,
    ablation_suite,
    ablation_table,
    curves_csv,
    lawnmower_baseline,
    noise_sweep,
    run_eval,
    summary_to_dict,
)
from .floorplan import generate_floorplan, plan_to_json
from .neural import load_checkpoint
from .scenegraph import dsg_to_json
from .seeding import derive_seed
from .spatial import grid_to_json
from .world import episode_record, record_plan, record_to_csv
from . import rl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

OUT_ROOT_ENV = "GRAPHNAV_OUT_ROOT"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def out_root(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir)
    if path.is_absolute():
        return path
    return Path(os.environ.get(OUT_ROOT_ENV, ".")) / path


def write_run_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(config_to_json(cfg))
    (out / "config_hash.txt").write_text(config_hash(cfg) + "\n")


def build_bundles(cfg: RunConfig) -> list[SceneBundle]:
    return [
        prepare_scene(
            generate_floorplan(derive_seed(cfg.seed, "scene", i), cfg.gen),
            cfg.gen.resolution,
            cfg.dsg,
        )
        for i in range(cfg.n_scenes)
    ]


def _eval_env(cfg: RunConfig, bundles: list[SceneBundle]) -> SearchEnv:
    return SearchEnv(
        bundles, cfg.episode, cfg.obs, noise=cfg.noise, camera=cfg.camera
    )


def _load_policy_checked(path: Path, cfg: RunConfig, skip_hash: bool):
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        params, meta = load_checkpoint(path)
    except Exception as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    if not skip_hash:
        got = meta.get("config_hash")
        want = config_hash(cfg)
        if got != want:
            raise UsageError(
                f"checkpoint config hash {got!r} does not match this config's "
                f"{want!r} (pass --no-hash-check to evaluate anyway)"
            )
    return params


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_env(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.rooms is not None:
        if args.rooms < 1:
            raise UsageError(f"--rooms must be positive, got {args.rooms}")
        cfg = replace(
            cfg,
            gen=replace(
                cfg.gen, n_side_rooms=(args.rooms, args.rooms), side_room_classes=None
            ),
        )
    out = out_root(cfg)
    write_run_config(cfg, out)
    for i in range(cfg.n_scenes):
        plan = generate_floorplan(derive_seed(cfg.seed, "scene", i), cfg.gen)
        bundle = prepare_scene(plan, cfg.gen.resolution, cfg.dsg)
        scene_dir = out / "scenes" / f"scene{i:05d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        (scene_dir / "floorplan.json").write_text(plan_to_json(plan))
        (scene_dir / "grid.json").write_text(grid_to_json(bundle.grid))
        (scene_dir / "dsg.json").write_text(dsg_to_json(bundle.dsg))
    print(f"wrote {cfg.n_scenes} scene(s) under {out / 'scenes'}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.total_steps is not None:
        if args.total_steps < 0:
            raise UsageError(f"--total-steps must be >= 0, got {args.total_steps}")
        cfg = replace(cfg, ppo=replace(cfg.ppo, total_steps=args.total_steps))
    resume = Path(args.resume) if args.resume else None
    if resume is not None and not resume.exists():
        raise UsageError(f"resume checkpoint not found: {resume}")
    out = out_root(cfg)
    write_run_config(cfg, out)
    bundles = build_bundles(cfg)
    envs = [
        SearchEnv(
            bundles, cfg.episode, cfg.obs, noise=cfg.noise, camera=cfg.camera, seed=lane
        )
        for lane in range(cfg.ppo.n_workers)
    ]
    result = rl.train(
        envs,
        cfg.ppo,
        out / "train",
        meta={"config_hash": config_hash(cfg)},
        resume=resume,
        checkpoint_every=args.checkpoint_every,
    )
    lines = result.metrics_path.read_text().strip().split("\n")
    print(f"trained {result.steps} steps over {result.rounds} rounds")
    print(f"final metrics: {lines[-1] if len(lines) > 1 else 'no rounds run'}")
    print(f"final checkpoint: {result.checkpoint_paths[-1]}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    if args.random:
        params, checkpoint = None, None
    else:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required unless --random is given")
        checkpoint = Path(args.checkpoint)
        params = _load_policy_checked(checkpoint, cfg, args.no_hash_check)
    out = out_root(cfg)
    write_run_config(cfg, out)
    eval_dir = out / "eval"
    records_dir = eval_dir / "records"
    hook = None
    if args.save_records:
        records_dir.mkdir(parents=True, exist_ok=True)
        counter = iter(range(args.episodes))

        def hook(env: SearchEnv) -> None:
            i = next(counter)
            _write_json(records_dir / f"episode{i:04d}.json", episode_record(env.episode))

    env = _eval_env(cfg, build_bundles(cfg))
    summary, episodes = run_eval(
        params,
        env,
        args.episodes,
        seeds=derive_seed(cfg.seed, "eval"),
        policy_mode="random" if args.random else "checkpoint",
        episode_hook=hook,
    )
    payload = {
        "checkpoint": str(checkpoint) if checkpoint else None,
        "policy_mode": "random" if args.random else "checkpoint",
        **summary_to_dict(summary),
        "episodes": [asdict(ep) for ep in episodes],
    }
    _write_json(eval_dir / "results.json", payload)
    t = summary.targets_found_pct
    print(
        f"evaluated {args.episodes} episodes: targets {t.mean:.1f}% "
        f"({t.lo:.1f}, {t.hi:.1f}), area {summary.area_explored_m2.mean:.1f} m^2, "
        f"collisions {summary.collisions.mean:.1f}"
    )
    print(f"results: {eval_dir / 'results.json'}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    modes = tuple(args.modes.split(",")) if args.modes else ABLATION_MODES
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise UsageError(f"unknown ablation modes {bad}; choose from {list(ABLATION_MODES)}")
    out = out_root(cfg)
    write_run_config(cfg, out)
    results = ablation_suite(
        build_bundles(cfg),
        cfg.ppo,
        cfg.episode,
        cfg.obs,
        out / "ablate",
        eval_episodes=args.episodes,
        eval_seed=derive_seed(cfg.seed, "ablate-eval"),
        camera=cfg.camera,
        modes=modes,
    )
    (out / "ablate" / "ablation.csv").write_text(ablation_table(results))
    _write_json(
        out / "ablate" / "results.json",
        {mode: summary_to_dict(s) for mode, s in results.items()},
    )
    for mode, s in results.items():
        print(
            f"{mode}: targets {s.targets_found_pct.mean:.1f}%, "
            f"area {s.area_explored_m2.mean:.1f} m^2"
        )
    return EXIT_OK


def cmd_noise_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.episodes < 1:
        raise UsageError(f"--episodes must be >= 1, got {args.episodes}")
    params = _load_policy_checked(Path(args.checkpoint), cfg, args.no_hash_check)
    out = out_root(cfg)
    write_run_config(cfg, out)
    rows = noise_sweep(
        params,
        build_bundles(cfg),
        cfg.episode,
        cfg.obs,
        n_episodes=args.episodes,
        seeds=derive_seed(cfg.seed, "noise-eval"),
        camera=cfg.camera,
    )
    sweep_dir = out / "noise"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    (sweep_dir / "noise_curves.csv").write_text(curves_csv(rows))
    _write_json(
        sweep_dir / "results.json",
        [
            {
                "position_sd": row["position_sd"],
                "semantic_fraction": row["semantic_fraction"],
                "room_delay_fraction": row["room_delay_fraction"],
                **summary_to_dict(row["summary"]),
            }
            for row in rows
        ],
    )
    print(f"swept {len(rows)} noise settings x {args.episodes} episodes")
    print(f"curves: {sweep_dir / 'noise_curves.csv'}")
    return EXIT_OK


def cmd_lawnmower(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    try:
        lm = LawnmowerConfig(
            width=args.width,
            height=args.height,
            lane_spacing=args.spacing,
            n_targets=args.targets,
            step_budget=args.budget,
            n_episodes=args.episodes,
            seed=cfg.seed,
        )
    except EvalError as exc:
        raise UsageError(str(exc)) from exc
    out = out_root(cfg)
    write_run_config(cfg, out)
    summary, _episodes = lawnmower_baseline(lm)
    _write_json(
        out / "lawnmower" / "results.json",
        {"baseline_config": asdict(lm), **summary_to_dict(summary)},
    )
    t = summary.targets_found_pct
    a = summary.area_explored_m2
    print(
        f"lawnmower over {lm.n_episodes} episodes: targets {t.mean:.1f}% "
        f"({t.lo:.1f}, {t.hi:.1f}), area {a.mean:.1f} m^2 ({a.lo:.1f}, {a.hi:.1f})"
    )
    return EXIT_OK


def record_svg(record: dict) -> str:
    """Top-down SVG: rooms shaded by target status, trajectory, targets."""
    plan = record_plan(record)
    w, h = plan.bounds
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:g} {h:g}"'
        f' width="{w * 40:g}" height="{h * 40:g}">',
        f'  <g transform="translate(0 {h:g}) scale(1 -1)">',
        f'    <rect x="0" y="0" width="{w:g}" height="{h:g}" fill="#30343a"/>',
    ]
    for room in plan.rooms:
        fill = "#f2c14e" if room.is_target else "#aeb8c2"
        lines.append(
            f'    <rect x="{room.min_x:g}" y="{room.min_y:g}"'
            f' width="{room.max_x - room.min_x:g}" height="{room.max_y - room.min_y:g}"'
            f' fill="{fill}" stroke="#30343a" stroke-width="0.15"/>'
        )
    for obj in plan.objects:
        x0, y0, x1, y1 = obj.footprint
        lines.append(
            f'    <rect x="{x0:g}" y="{y0:g}" width="{x1 - x0:g}" height="{y1 - y0:g}"'
            f' fill="#7d6b5d"/>'
        )
    points = " ".join(f"{row[1]:.3f},{row[2]:.3f}" for row in record["rows"])
    lines.append(
        f'    <polyline points="{points}" fill="none" stroke="#1b6fe0"'
        f' stroke-width="0.12"/>'
    )
    sx, sy = record["rows"][0][1], record["rows"][0][2]
    lines.append(f'    <circle cx="{sx:.3f}" cy="{sy:.3f}" r="0.25" fill="#1b6fe0"/>')
    for (tx, ty), got in zip(record["targets"], record["collected"]):
        fill = "#2ca02c" if got else "#d62728"
        lines.append(f'    <circle cx="{tx:.3f}" cy="{ty:.3f}" r="0.3" fill="{fill}"/>')
    lines += ["  </g>", "</svg>"]
    return "\n".join(lines) + "\n"


def cmd_export_traj(args: argparse.Namespace) -> int:
    record_path = Path(args.record)
    if not record_path.exists():
        raise UsageError(f"record not found: {record_path}")
    try:
        record = json.loads(record_path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"record is not valid JSON: {exc}") from exc
    text = record_to_csv(record) if args.format == "csv" else record_svg(record)
    out_file = (
        Path(args.out_file)
        if args.out_file
        else record_path.with_suffix("." + args.format)
    )
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(text)
    print(f"wrote {out_file}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphnav",
        description="Multi-object search: scene generation, PPO training, "
        "evaluation, ablations, noise sweeps, and trajectory export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", default=None, help="run config JSON file")
        sp.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field, e.g. --set ppo.total_steps=5000",
        )
        sp.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")

    g = sub.add_parser("gen-env", help="generate scenes; write floorplan/grid/DSG JSON")
    common(g)
    g.add_argument("--rooms", type=int, default=None, help="fix the side-room count")
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", help="train a policy")
    common(t)
    t.add_argument("--total-steps", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=10, metavar="ROUNDS")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument(
        "--random", action="store_true", help="uniform-random baseline, no checkpoint"
    )
    e.add_argument("--no-hash-check", action="store_true")
    e.add_argument(
        "--save-records",
        action="store_true",
        help="write a per-episode record JSON for export-traj",
    )
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate one policy per ablation mode")
    common(a)
    a.add_argument("--episodes", type=int, default=50)
    a.add_argument("--modes", default=None, help="comma-separated subset of modes")
    a.set_defaults(func=cmd_ablate)

    n = sub.add_parser("noise-sweep", help="evaluate a checkpoint across noise settings")
    common(n)
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--episodes", type=int, default=50)
    n.add_argument("--no-hash-check", action="store_true")
    n.set_defaults(func=cmd_noise_sweep)

    m = sub.add_parser("lawnmower", help="scripted serpentine-coverage baseline")
    common(m)
    m.add_argument("--episodes", type=int, default=10_000)
    m.add_argument("--width", type=float, default=46.0)
    m.add_argument("--height", type=float, default=30.0)
    m.add_argument("--spacing", type=float, default=4.0)
    m.add_argument("--targets", type=int, default=30)
    m.add_argument("--budget", type=float, default=400.0)
    m.set_defaults(func=cmd_lawnmower)

    x = sub.add_parser("export-traj", help="render an episode record to CSV or SVG")
    x.add_argument("--record", required=True, help="episode record JSON from eval")
    x.add_argument("--format", choices=("csv", "svg"), required=True)
    x.add_argument("--out-file", default=None)
    x.set_defaults(func=cmd_export_traj)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # contract violations inside a run
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
