"""Environment wrappers for rollout collection.

SearchEnv glues the simulator episode to scene-graph disclosure and
observation building: reset starts a fresh episode over a cached scene with
an empty disclosure (nothing has been seen yet), each step advances the
robot, runs a visibility pass, and rebuilds the observation. BanditEnv is a
three-armed bandit with a constant observation, used to smoke-test the
training machinery without any simulator in the loop.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np

from .floorplan import FloorPlan, rasterize
from .observation import GraphObservation, ObsConfig, build_observation
from .scenegraph import (
    DisclosureState,
    DsgParams,
    NoiseConfig,
    SceneGraph,
    accumulate,
    apply_noise,
    build_offline_dsg,
    init_disclosure,
    observe,
)
from .seeding import derive_seed
from .spatial import Camera, DistanceField, OccupancyGrid, compute_distance_field
from . import world
from .world import Episode, EpisodeConfig


class EnvError(RuntimeError):
    pass


class Env(Protocol):
    n_actions: int
    last_observation: GraphObservation | None

    def reset(self, seed: int | None = None) -> GraphObservation: ...

    def step(self, action: int) -> tuple[GraphObservation, float, bool, dict]: ...

    def reseed(self, base: int) -> None: ...


@dataclass
class SceneBundle:
    """Immutable per-scene data shared by every episode on that scene."""

    plan: FloorPlan
    grid: OccupancyGrid
    dfield: DistanceField
    dsg: SceneGraph  # noiseless offline scene graph


def prepare_scene(
    plan: FloorPlan, resolution: float = 0.25, dsg_params: DsgParams = DsgParams()
) -> SceneBundle:
    grid = rasterize(plan, resolution)
    dfield = compute_distance_field(grid)
    return SceneBundle(plan=plan, grid=grid, dfield=dfield, dsg=build_offline_dsg(plan, grid, dfield, dsg_params))


class SearchEnv:
    """Multi-object search over one or more prepared scenes.

    Episode seeds come from (base, episode index) so a lane replays exactly
    after reseed(); the scene, spawn pose, targets, and the episode's noise
    draw all derive from that one seed.
    """

    n_actions = 3

    def __init__(
        self,
        bundles: list[SceneBundle] | SceneBundle,
        episode_config: EpisodeConfig = EpisodeConfig(),
        obs_config: ObsConfig = ObsConfig(),
        noise: NoiseConfig = NoiseConfig(),
        camera: Camera = Camera(),
        seed: int = 0,
    ) -> None:
        self.bundles = [bundles] if isinstance(bundles, SceneBundle) else list(bundles)
        if not self.bundles:
            raise EnvError("SearchEnv needs at least one scene")
        self.episode_config = episode_config
        self.obs_config = obs_config
        self.noise = noise
        self.camera = camera
        self._base = seed
        self._episode_index = 0
        self.bundle: SceneBundle | None = None
        self.episode: Episode | None = None
        self.disc: DisclosureState | None = None
        self.last_observation: GraphObservation | None = None

    def reseed(self, base: int) -> None:
        self._base = base
        self._episode_index = 0

    def reset(self, seed: int | None = None) -> GraphObservation:
        if seed is None:
            seed = derive_seed(self._base, "episode", self._episode_index)
            self._episode_index += 1
        self.bundle = self.bundles[seed % len(self.bundles)]
        reported = self.bundle.dsg
        if self.noise.enabled:
            reported = apply_noise(
                reported, replace(self.noise, seed=derive_seed(seed, "noise"))
            )
        self.disc = init_disclosure(reported, self.noise.room_delay_fraction)
        self.episode = world.reset(
            self.bundle.plan, self.episode_config, seed=seed, grid=self.bundle.grid
        )
        self.last_observation = self._observation()
        return self.last_observation

    def _observation(self) -> GraphObservation:
        return build_observation(
            self.disc,
            self.episode.pose,
            np.asarray(self.episode.trajectory),
            self.bundle.grid,
            self.bundle.dfield,
            self.obs_config,
        )

    def step(self, action: int) -> tuple[GraphObservation, float, bool, dict]:
        if self.episode is None:
            raise EnvError("step before reset")
        outcome = world.step(self.episode, action)
        result = observe(
            self.disc, self.bundle.dsg, self.episode.pose, self.camera, self.bundle.grid
        )
        accumulate(self.disc, result)
        info = {
            "collided": outcome.collided,
            "targets_collected": outcome.targets_collected,
            "done_reason": outcome.done_reason,
            "truncated": outcome.done_reason == "step_limit",
        }
        self.last_observation = self._observation()
        return self.last_observation, outcome.reward, outcome.done, info


def _ring_observation() -> GraphObservation:
    n = 8
    feats = np.zeros((n, 10))
    feats[:, 6] = 3.0  # kind code for an action node
    feats[:, 8] = 1.0  # "free" bit
    edges = sorted((i, (i + 1) % n) if i < (i + 1) % n else ((i + 1) % n, i) for i in range(n))
    return GraphObservation(
        kinds=["action"] * n,
        node_ids=[f"a{i}" for i in range(n)],
        features=feats,
        edges=edges,
        action_order=list(range(n)),
    )


class BanditEnv:
    """Three-armed bandit: the paying arm rewards 1, others 0, one step per
    episode. The observation never changes, so only the update rule is under
    test when this environment trains."""

    n_actions = 3

    def __init__(self, paying_arm: int = 1) -> None:
        if not 0 <= paying_arm < self.n_actions:
            raise EnvError(f"paying_arm out of range: {paying_arm}")
        self.paying_arm = paying_arm
        self._obs = _ring_observation()
        self.last_observation: GraphObservation | None = None

    def reseed(self, base: int) -> None:
        pass

    def reset(self, seed: int | None = None) -> GraphObservation:
        self.last_observation = self._obs
        return self._obs

    def step(self, action: int) -> tuple[GraphObservation, float, bool, dict]:
        if self.last_observation is None:
            raise EnvError("step before reset")
        reward = 1.0 if int(action) == self.paying_arm else 0.0
        return self._obs, reward, True, {"truncated": False, "done_reason": "all_collected"}
