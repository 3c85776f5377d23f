"""Episode dynamics: a disc robot collecting point targets in a floorplan.

The action set is discrete: a fixed forward translation and fixed-angle
turns. Turns never collide (the robot is a disc); forward motion is checked
as a swept disc sampled at half-cell spacing and cancelled entirely on
contact. Targets within the collection radius of the post-step position are
collected after every step, turns included; the spawn pose itself collects
nothing.
"""
from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .floorplan import FloorPlan, plan_from_json, plan_to_json, rasterize, spawn_targets
from .seeding import derive_rng
from .spatial import OccupancyGrid, disc_collides

ROBOT_RADIUS = 0.125  # meters
ROBOT_HEIGHT = 0.5  # meters, metadata only: the simulator plays out in 2-D


class WorldError(RuntimeError):
    pass


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


ACTION_NAMES = {Action.FORWARD: "forward", Action.TURN_LEFT: "turn_left", Action.TURN_RIGHT: "turn_right"}


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 400
    n_targets: int = 30
    collect_radius: float = 2.0
    forward_step: float = 0.5
    turn_step_deg: float = 8.0
    reward_per_target: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    collided: bool
    targets_collected: int
    done: bool
    done_reason: str | None  # "all_collected" | "step_limit" | None


@dataclass
class Episode:
    plan: FloorPlan
    grid: OccupancyGrid
    config: EpisodeConfig
    x: float
    y: float
    heading: float  # radians, wrapped to (-pi, pi]
    targets: np.ndarray  # (n, 2)
    collected: np.ndarray  # (n,) bool
    steps: int = 0
    collisions: int = 0
    done: bool = False
    done_reason: str | None = None
    trajectory: list[tuple[float, float, float]] = field(default_factory=list)
    # per-step log rows for the trajectory CSV
    log: list[tuple[int, float, float, float, str, float, bool, int]] = field(default_factory=list)

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)

    @property
    def targets_remaining(self) -> int:
        return int((~self.collected).sum())

    @property
    def targets_found(self) -> int:
        return int(self.collected.sum())


def _wrap(angle: float) -> float:
    while angle > math.pi:
        angle -= 2.0 * math.pi
    while angle <= -math.pi:
        angle += 2.0 * math.pi
    return angle


def reset(
    plan: FloorPlan,
    config: EpisodeConfig,
    seed: int | None = None,
    grid: OccupancyGrid | None = None,
) -> Episode:
    """Start an episode: targets in target rooms, a collision-free spawn pose.

    Deterministic in (plan, config, seed). No targets are collected at reset;
    an episode with zero targets is born finished.
    """
    if seed is None:
        seed = config.seed
    if grid is None:
        grid = rasterize(plan, 0.25)
    targets = spawn_targets(plan, seed, config.n_targets, grid)

    rng = derive_rng(seed, "spawn")
    w, h = plan.bounds
    for _ in range(100_000):
        x = float(rng.uniform(0.0, w))
        y = float(rng.uniform(0.0, h))
        if not disc_collides(grid, (x, y), ROBOT_RADIUS):
            break
    else:
        raise WorldError("could not find a collision-free spawn pose")
    heading = float(rng.uniform(-math.pi, math.pi))

    ep = Episode(
        plan=plan,
        grid=grid,
        config=config,
        x=x,
        y=y,
        heading=heading,
        targets=targets,
        collected=np.zeros(len(targets), dtype=bool),
    )
    ep.trajectory.append(ep.pose)
    if len(targets) == 0:
        ep.done = True
        ep.done_reason = "all_collected"
    ep.log.append((0, ep.x, ep.y, math.degrees(ep.heading), "", 0.0, False, ep.targets_remaining))
    return ep


def step(ep: Episode, action: Action | int) -> StepOutcome:
    """Advance one step. Raises WorldError on a finished episode."""
    if ep.done:
        raise WorldError("episode is already done")
    action = Action(action)
    cfg = ep.config
    collided = False

    if action == Action.FORWARD:
        dist = cfg.forward_step
        dx = math.cos(ep.heading) * dist
        dy = math.sin(ep.heading) * dist
        n = max(1, int(math.ceil(dist / (ep.grid.resolution / 2.0))))
        for k in range(1, n + 1):
            t = k / n
            if disc_collides(ep.grid, (ep.x + t * dx, ep.y + t * dy), ROBOT_RADIUS):
                collided = True
                break
        if collided:
            ep.collisions += 1
        else:
            ep.x += dx
            ep.y += dy
    elif action == Action.TURN_LEFT:
        ep.heading = _wrap(ep.heading + math.radians(cfg.turn_step_deg))
    else:
        ep.heading = _wrap(ep.heading - math.radians(cfg.turn_step_deg))

    ep.steps += 1
    ep.trajectory.append(ep.pose)

    n_collected = 0
    if ep.targets_remaining:
        open_idx = np.nonzero(~ep.collected)[0]
        d = ep.targets[open_idx] - np.array([ep.x, ep.y])
        hits = open_idx[np.hypot(d[:, 0], d[:, 1]) <= cfg.collect_radius]
        n_collected = len(hits)
        ep.collected[hits] = True
    reward = cfg.reward_per_target * n_collected

    if ep.targets_remaining == 0:
        ep.done = True
        ep.done_reason = "all_collected"
    elif ep.steps >= cfg.max_steps:
        ep.done = True
        ep.done_reason = "step_limit"

    ep.log.append(
        (
            ep.steps,
            ep.x,
            ep.y,
            math.degrees(ep.heading),
            ACTION_NAMES[action],
            reward,
            collided,
            ep.targets_remaining,
        )
    )
    return StepOutcome(
        reward=reward,
        collided=collided,
        targets_collected=n_collected,
        done=ep.done,
        done_reason=ep.done_reason,
    )


# ---------------------------------------------------------------------------
# Trajectory export
# ---------------------------------------------------------------------------

TRAJECTORY_HEADER = "step,x,y,heading_deg,action,reward,collided,targets_remaining"


def trajectory_csv(ep: Episode) -> str:
    """One row per step plus the spawn row."""
    buf = io.StringIO()
    buf.write(TRAJECTORY_HEADER + "\n")
    for row in ep.log:
        s, x, y, hdg, act, rew, col, rem = row
        buf.write(f"{s},{x!r},{y!r},{hdg!r},{act},{rew!r},{str(col).lower()},{rem}\n")
    return buf.getvalue()


def episode_record(ep: Episode) -> dict:
    """Self-contained episode record (plan embedded) for replay/rendering."""
    return {
        "plan": json.loads(plan_to_json(ep.plan)),
        "config": {
            "max_steps": ep.config.max_steps,
            "n_targets": ep.config.n_targets,
            "collect_radius": ep.config.collect_radius,
            "forward_step": ep.config.forward_step,
            "turn_step_deg": ep.config.turn_step_deg,
            "reward_per_target": ep.config.reward_per_target,
        },
        "targets": ep.targets.tolist(),
        "collected": ep.collected.tolist(),
        "collisions": ep.collisions,
        "done_reason": ep.done_reason,
        "rows": [list(r) for r in ep.log],
    }


def record_to_csv(record: dict) -> str:
    buf = io.StringIO()
    buf.write(TRAJECTORY_HEADER + "\n")
    for s, x, y, hdg, act, rew, col, rem in record["rows"]:
        col_s = str(bool(col)).lower()
        buf.write(f"{s},{x!r},{y!r},{hdg!r},{act},{rew!r},{col_s},{rem}\n")
    return buf.getvalue()


def record_plan(record: dict) -> FloorPlan:
    return plan_from_json(json.dumps(record["plan"]))
