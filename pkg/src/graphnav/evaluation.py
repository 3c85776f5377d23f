"""Evaluation: per-episode metrics, bootstrap intervals, the scripted
coverage baseline, and the ablation / noise sweep drivers.

Episode metrics are the task's three headline numbers: percentage of targets
found, collision count, and explored area in 1 m^2 cells. Summaries carry a
95% percentile-bootstrap interval per metric. Everything here is
deterministic given its seed arguments, including the bootstrap.
"""
from __future__ import annotations

import itertools
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .envs import SceneBundle, SearchEnv
from .neural import PolicyParameters, load_checkpoint, policy_forward, sample_action
from .observation import ObsConfig
from .rl import PpoConfig, train
from .scenegraph import NoiseConfig
from .seeding import derive_rng, derive_seed
from .spatial import Camera
from .world import EpisodeConfig


class EvalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EpisodeMetrics:
    targets_found_pct: float
    collisions: int
    area_explored_m2: int
    targets_found: int = 0
    steps: int = 0


@dataclass(frozen=True)
class MetricStat:
    mean: float
    lo: float
    hi: float


SUMMARY_METRICS = ("targets_found_pct", "collisions", "area_explored_m2")


@dataclass(frozen=True)
class MetricsSummary:
    n_episodes: int
    targets_found_pct: MetricStat
    collisions: MetricStat
    area_explored_m2: MetricStat


def area_explored(trajectory, bounds: tuple[float, float] | None = None) -> int:
    """Count distinct 1 m x 1 m cells containing any trajectory point.

    ``trajectory`` is (n, >=2) array-like; columns beyond x, y are ignored.
    With ``bounds`` = (width, height), cell indices are clamped so a point
    sitting exactly on the far edge lands in the last interior cell.
    """
    pts = np.asarray(trajectory, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(1, -1)
    if pts.size == 0:
        raise EvalError("area_explored needs a non-empty trajectory")
    if pts.shape[1] < 2:
        raise EvalError(f"trajectory points need x and y, got shape {pts.shape}")
    xi = np.floor(pts[:, 0]).astype(np.int64)
    yi = np.floor(pts[:, 1]).astype(np.int64)
    if bounds is not None:
        xi = np.clip(xi, 0, max(math.ceil(bounds[0]) - 1, 0))
        yi = np.clip(yi, 0, max(math.ceil(bounds[1]) - 1, 0))
    return int(np.unique(np.stack([xi, yi], axis=1), axis=0).shape[0])


def bootstrap_ci(
    samples, n_resamples: int = 1000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile interval of resampled means, deterministic in ``seed``.

    Quantile convention: sort the n_resamples means and take the entries at
    floor(((1-level)/2) * n_resamples) and floor(((1+level)/2) * n_resamples),
    the latter clamped to the last index.
    """
    vals = np.asarray(samples, dtype=float).ravel()
    if vals.size == 0:
        raise EvalError("bootstrap_ci needs at least one sample")
    if not 0.0 < level < 1.0:
        raise EvalError(f"level out of range (0, 1): {level}")
    if n_resamples < 1:
        raise EvalError(f"n_resamples must be positive: {n_resamples}")
    rng = derive_rng(seed, "bootstrap")
    idx = rng.integers(0, vals.size, size=(n_resamples, vals.size))
    means = np.sort(vals[idx].mean(axis=1))
    lo_i = int((1.0 - level) / 2.0 * n_resamples)
    hi_i = min(int((1.0 + level) / 2.0 * n_resamples), n_resamples - 1)
    return float(means[lo_i]), float(means[hi_i])


def summarize(episodes: Sequence[EpisodeMetrics], seed: int = 0) -> MetricsSummary:
    if not episodes:
        raise EvalError("summarize needs at least one episode")
    stats = {}
    for name in SUMMARY_METRICS:
        vals = np.array([getattr(ep, name) for ep in episodes], dtype=float)
        lo, hi = bootstrap_ci(vals, seed=derive_seed(seed, "ci", name))
        stats[name] = MetricStat(mean=float(vals.mean()), lo=lo, hi=hi)
    return MetricsSummary(n_episodes=len(episodes), **stats)


def summary_to_dict(summary: MetricsSummary) -> dict:
    out: dict = {"n_episodes": summary.n_episodes, "metrics": {}}
    for name in SUMMARY_METRICS:
        stat = getattr(summary, name)
        out["metrics"][name] = {"mean": stat.mean, "ci": [stat.lo, stat.hi]}
    return out


# ---------------------------------------------------------------------------
# policy evaluation


def _load_policy(policy, expected_config_hash: str | None):
    if isinstance(policy, PolicyParameters):
        return policy, {}
    params, meta = load_checkpoint(policy)
    if expected_config_hash is not None:
        got = meta.get("config_hash")
        if got != expected_config_hash:
            raise EvalError(
                f"checkpoint config hash {got!r} does not match expected "
                f"{expected_config_hash!r}"
            )
    return params, meta


def _episode_metrics(env: SearchEnv) -> EpisodeMetrics:
    ep = env.episode
    total = ep.config.n_targets
    pct = 100.0 * ep.targets_found / total if total else 100.0
    w = env.bundle.grid.occupied.shape[1] * env.bundle.grid.resolution
    h = env.bundle.grid.occupied.shape[0] * env.bundle.grid.resolution
    return EpisodeMetrics(
        targets_found_pct=pct,
        collisions=ep.collisions,
        area_explored_m2=area_explored(np.asarray(ep.trajectory), bounds=(w, h)),
        targets_found=ep.targets_found,
        steps=ep.steps,
    )


def run_eval(
    policy,
    env: SearchEnv,
    n_episodes: int,
    seeds: int | Sequence[int] = 0,
    policy_mode: str = "checkpoint",
    expected_config_hash: str | None = None,
    episode_hook=None,
) -> tuple[MetricsSummary, list[EpisodeMetrics]]:
    """Evaluate a policy over seeded episodes; actions are sampled.

    ``policy`` is a PolicyParameters or a checkpoint path (hash-checked when
    ``expected_config_hash`` is given); ``policy_mode="random"`` ignores it
    and draws uniform actions. ``seeds`` is either a base seed (per-episode
    seeds are derived from it) or an explicit list of length ``n_episodes``.
    ``episode_hook(env)`` runs after each finished episode, for exporters
    that want the terminal episode state.
    """
    if n_episodes < 1:
        raise EvalError(f"n_episodes must be positive: {n_episodes}")
    if policy_mode not in ("checkpoint", "random"):
        raise EvalError(f"unknown policy_mode: {policy_mode!r}")
    if policy_mode == "random":
        params = None
    else:
        params, _meta = _load_policy(policy, expected_config_hash)
    if isinstance(seeds, (int, np.integer)):
        ep_seeds = [derive_seed(int(seeds), "episode", i) for i in range(n_episodes)]
    else:
        ep_seeds = [int(s) for s in seeds]
        if len(ep_seeds) != n_episodes:
            raise EvalError(
                f"got {len(ep_seeds)} seeds for {n_episodes} episodes"
            )
    episodes = []
    for ep_seed in ep_seeds:
        rng = derive_rng(ep_seed, "eval-actions")
        obs = env.reset(seed=ep_seed)
        done = False
        while not done:
            if params is None:
                action = int(rng.integers(env.n_actions))
            else:
                logits, _value, _cache = policy_forward(params, obs)
                action, _lp, _ent = sample_action(logits, rng)
            obs, _reward, done, _info = env.step(action)
        episodes.append(_episode_metrics(env))
        if episode_hook is not None:
            episode_hook(env)
    return summarize(episodes), episodes


# ---------------------------------------------------------------------------
# scripted coverage baseline


@dataclass(frozen=True)
class LawnmowerConfig:
    """Obstacle-free rectangle swept in serpentine lanes.

    Lanes run parallel to the longer side, spaced ``lane_spacing`` apart and
    centered across the shorter side. The walker turns once before every leg
    (entry leg, lane, or connector), charges ``steps_per_meter`` per meter of
    forward motion and ``steps_per_quarter_turn`` per turn, and checks target
    collection at every 0.5 m step. It stops when the budget cannot cover the
    next turn or any further forward motion.
    """

    width: float = 46.0
    height: float = 30.0
    lane_spacing: float = 4.0
    n_targets: int = 30
    collect_radius: float = 2.0
    step_budget: float = 400.0
    steps_per_meter: float = 2.0
    steps_per_quarter_turn: float = 11.0
    n_episodes: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise EvalError(f"degenerate rectangle: {self.width} x {self.height}")
        if not 0 < self.lane_spacing <= min(self.width, self.height):
            raise EvalError(f"lane_spacing out of range: {self.lane_spacing}")
        if self.n_targets < 1 or self.n_episodes < 1:
            raise EvalError("n_targets and n_episodes must be positive")


@dataclass(frozen=True)
class LawnmowerEpisode:
    positions: np.ndarray  # (n, 2) visited points, 0.5 m apart along the path
    collected: np.ndarray  # (n_targets,) bool
    meters_forward: float
    quarter_turns: int
    steps_used: float


def _lane_rows(extent: float, spacing: float) -> np.ndarray:
    n = int(extent // spacing) + 1
    offset = (extent - (n - 1) * spacing) / 2.0
    return offset + spacing * np.arange(n)


def _serpentine_legs(
    cfg: LawnmowerConfig, start_long: float, start_cross: float
) -> list[tuple[float, float, float, float]]:
    """Legs as (u0, v0, u1, v1) in (long-axis, cross-axis) coordinates."""
    long_extent = max(cfg.width, cfg.height)
    cross_extent = min(cfg.width, cfg.height)
    lanes = _lane_rows(cross_extent, cfg.lane_spacing)
    k = int(np.argmin(np.abs(lanes - start_cross)))
    entry_u = 0.0 if start_long <= long_extent / 2.0 else long_extent
    # sweep toward the side with more lanes left; ties go upward
    direction = 1 if (len(lanes) - 1 - k) >= k else -1
    legs = [(start_long, start_cross, entry_u, lanes[k])]
    u = entry_u
    while True:
        far_u = long_extent - u
        legs.append((u, lanes[k], far_u, lanes[k]))
        u = far_u
        nk = k + direction
        if not 0 <= nk < len(lanes):
            return legs
        legs.append((u, lanes[k], u, lanes[nk]))
        k = nk


def simulate_lawnmower_episode(
    cfg: LawnmowerConfig, start: tuple[float, float], targets: np.ndarray
) -> LawnmowerEpisode:
    """Walk the serpentine from ``start`` until the step budget runs out."""
    long_first = cfg.width >= cfg.height
    su, sv = (start[0], start[1]) if long_first else (start[1], start[0])
    legs = _serpentine_legs(cfg, su, sv)
    budget = cfg.step_budget
    meters = 0.0
    turns = 0
    points = [np.array([su, sv])]
    for u0, v0, u1, v1 in legs:
        if budget < cfg.steps_per_quarter_turn:
            break
        budget -= cfg.steps_per_quarter_turn
        turns += 1
        length = math.hypot(u1 - u0, v1 - v0)
        if length == 0.0:
            continue
        go = min(length, budget / cfg.steps_per_meter)
        if go <= 0.0:
            break
        budget -= go * cfg.steps_per_meter
        meters += go
        ts = np.arange(0.5, go + 1e-9, 0.5)
        if ts.size == 0 or ts[-1] < go - 1e-9:
            ts = np.append(ts, go)
        d = np.array([(u1 - u0) / length, (v1 - v0) / length])
        points.append(np.array([u0, v0]) + ts[:, None] * d)
        if go < length - 1e-9:
            break
    path = np.vstack([p.reshape(-1, 2) for p in points])
    positions = path if long_first else path[:, ::-1]
    dists = cdist(np.asarray(targets, dtype=float), positions)
    collected = dists.min(axis=1) <= cfg.collect_radius
    return LawnmowerEpisode(
        positions=positions,
        collected=collected,
        meters_forward=meters,
        quarter_turns=turns,
        steps_used=cfg.step_budget - budget,
    )


def lawnmower_baseline(
    cfg: LawnmowerConfig = LawnmowerConfig(),
) -> tuple[MetricsSummary, list[EpisodeMetrics]]:
    episodes = []
    for i in range(cfg.n_episodes):
        rng = derive_rng(cfg.seed, "episode", i)
        start = (rng.uniform(0.0, cfg.width), rng.uniform(0.0, cfg.height))
        targets = rng.uniform(
            [0.0, 0.0], [cfg.width, cfg.height], size=(cfg.n_targets, 2)
        )
        sim = simulate_lawnmower_episode(cfg, start, targets)
        episodes.append(
            EpisodeMetrics(
                targets_found_pct=100.0 * sim.collected.sum() / cfg.n_targets,
                collisions=0,
                area_explored_m2=area_explored(
                    sim.positions, bounds=(cfg.width, cfg.height)
                ),
                targets_found=int(sim.collected.sum()),
                steps=int(round(sim.steps_used)),
            )
        )
    return summarize(episodes, seed=cfg.seed), episodes


# ---------------------------------------------------------------------------
# ablation and noise sweeps


ABLATION_MODES = (
    "full",
    "no_hierarchy",
    "no_memory",
    "no_occlusion_check",
    "no_action_layer",
)


def obs_config_for_mode(base: ObsConfig, mode: str) -> ObsConfig:
    if mode not in ABLATION_MODES:
        raise EvalError(f"unknown ablation mode: {mode!r}")
    cleared = replace(
        base,
        no_hierarchy=False,
        no_memory=False,
        no_occlusion_check=False,
        no_action_layer=False,
    )
    return cleared if mode == "full" else replace(cleared, **{mode: True})


def ablation_suite(
    bundles: list[SceneBundle],
    ppo_config: PpoConfig,
    episode_config: EpisodeConfig,
    base_obs_config: ObsConfig,
    out_dir,
    eval_episodes: int,
    eval_seed: int = 0,
    camera: Camera = Camera(),
    modes: Sequence[str] = ABLATION_MODES,
) -> dict[str, MetricsSummary]:
    """Train one policy per mode with shared seeds, then evaluate each.

    Artifacts land under ``out_dir/<mode>/``; the returned table maps mode
    name to its evaluation summary.
    """
    out_dir = Path(out_dir)
    results: dict[str, MetricsSummary] = {}
    for mode in modes:
        obs_cfg = obs_config_for_mode(base_obs_config, mode)
        envs = [
            SearchEnv(bundles, episode_config, obs_cfg, camera=camera, seed=lane)
            for lane in range(ppo_config.n_workers)
        ]
        trained = train(envs, ppo_config, out_dir / mode, meta={"ablation_mode": mode})
        eval_env = SearchEnv(bundles, episode_config, obs_cfg, camera=camera)
        summary, _eps = run_eval(trained.params, eval_env, eval_episodes, seeds=eval_seed)
        results[mode] = summary
    return results


def default_noise_sweep() -> list[NoiseConfig]:
    """One shared zero cell, then each degradation axis swept on its own."""
    cells = [NoiseConfig()]
    cells += [NoiseConfig(position_sd=sd) for sd in (0.5, 1.0, 1.5, 2.0)]
    cells += [NoiseConfig(semantic_fraction=f) for f in (0.2, 0.4, 0.6, 0.8)]
    cells += [NoiseConfig(room_delay_fraction=0.5)]
    return cells


def noise_sweep(
    policy,
    bundles: list[SceneBundle],
    episode_config: EpisodeConfig,
    obs_config: ObsConfig,
    n_episodes: int,
    seeds: int | Sequence[int] = 0,
    sweep: Sequence[NoiseConfig] | None = None,
    camera: Camera = Camera(),
    expected_config_hash: str | None = None,
) -> list[dict]:
    """Evaluate one fixed policy across a grid of noise settings.

    Episode seeds are shared across cells, so the all-zero cell reproduces a
    plain ``run_eval`` on a noiseless environment exactly.
    """
    params, _meta = _load_policy(policy, expected_config_hash)
    rows = []
    for noise in sweep if sweep is not None else default_noise_sweep():
        env = SearchEnv(
            bundles, episode_config, obs_config, noise=noise, camera=camera
        )
        summary, episodes = run_eval(params, env, n_episodes, seeds=seeds)
        rows.append(
            {
                "position_sd": noise.position_sd,
                "semantic_fraction": noise.semantic_fraction,
                "room_delay_fraction": noise.room_delay_fraction,
                "summary": summary,
                "episodes": episodes,
            }
        )
    return rows


CURVES_HEADER = ",".join(
    ["position_sd", "semantic_fraction", "room_delay_fraction", "n_episodes"]
    + [
        f"{name}_{part}"
        for name, part in itertools.product(SUMMARY_METRICS, ("mean", "lo", "hi"))
    ]
)


def curves_csv(rows: Sequence[dict]) -> str:
    """Noise-sweep rows as CSV, one line per cell, floats in repr form."""
    lines = [CURVES_HEADER]
    for row in rows:
        summary = row["summary"]
        cells = [
            repr(float(row["position_sd"])),
            repr(float(row["semantic_fraction"])),
            repr(float(row["room_delay_fraction"])),
            str(summary.n_episodes),
        ]
        for name in SUMMARY_METRICS:
            stat = getattr(summary, name)
            cells += [repr(stat.mean), repr(stat.lo), repr(stat.hi)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def ablation_table(results: dict[str, MetricsSummary]) -> str:
    """Mode-per-row CSV shaped like the ablation tables in the docs."""
    lines = ["mode," + ",".join(
        f"{name}_{part}"
        for name, part in itertools.product(SUMMARY_METRICS, ("mean", "lo", "hi"))
    )]
    for mode, summary in results.items():
        cells = [mode]
        for name in SUMMARY_METRICS:
            stat = getattr(summary, name)
            cells += [repr(stat.mean), repr(stat.lo), repr(stat.hi)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
