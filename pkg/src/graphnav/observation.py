"""Agent-centric graph observations.

Each step the disclosed scene graph is re-expressed in the robot's frame and
extended with a ring of candidate-motion "action" nodes around the robot.
Every node carries a 10-entry feature vector; slots that do not apply to a
node's kind hold a negative sentinel so the vector stays flat numeric.

Feature layout:
    [0:3] position relative to the robot (x forward, y left, z above sensor)
    [3:6] bounding-box dimensions (objects only)
    [6]   kind code (object 0, place 1, room 2, action 3)
    [7]   semantic class code (objects and rooms only)
    [8]   visited bit for graph nodes / free-space bit for action nodes
    [9]   clearance value (places and action nodes; 0 for objects)
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .floorplan import OBJECT_CLASSES, ROOM_CLASSES
from .scenegraph import DisclosureState, ObjectNode, PlaceNode, RoomNode, _id_key
from .spatial import DistanceField, OccupancyGrid, esdf_at, is_free, segments_free


class ObservationError(ValueError):
    pass


KIND_CODES = {"object": 0.0, "place": 1.0, "room": 2.0, "action": 3.0}

# Rooms take codes 0..5, objects 6..9. The table is fixed and ships inside
# checkpoints so trained policies never see codes drift.
CLASS_CODES: dict[str, float] = {c: float(i) for i, c in enumerate(ROOM_CLASSES)}
CLASS_CODES.update({c: float(len(ROOM_CLASSES) + i) for i, c in enumerate(OBJECT_CLASSES)})

FEATURE_DIM = 10


@dataclass(frozen=True)
class ObsConfig:
    action_radius: float = 1.0
    n_action: int = 8
    action_edge_dist: float = 1.0
    free_clearance: float = 0.1
    visited_dist: float = 2.0
    null_value: float = -1.0
    sensor_height: float = 0.7
    no_hierarchy: bool = False
    no_memory: bool = False
    no_occlusion_check: bool = False
    no_action_layer: bool = False

    def __post_init__(self) -> None:
        if self.n_action < 1:
            raise ObservationError(f"n_action must be >= 1, got {self.n_action}")
        for name in ("action_radius", "action_edge_dist", "free_clearance", "visited_dist"):
            if getattr(self, name) <= 0:
                raise ObservationError(f"{name} must be positive")


@dataclass
class ActionNode:
    """One candidate-motion node on the ring around the robot."""

    position: tuple[float, float]
    free: bool
    esdf: float


@dataclass
class GraphObservation:
    kinds: list[str]
    node_ids: list[str]
    features: np.ndarray  # (n, 10)
    edges: list[tuple[int, int]]  # undirected, i < j
    action_order: list[int]

    def __post_init__(self) -> None:
        n = len(self.kinds)
        if len(self.node_ids) != n or self.features.shape != (n, FEATURE_DIM):
            raise ObservationError(
                f"inconsistent observation: {n} kinds, {len(self.node_ids)} ids, "
                f"features {self.features.shape}"
            )
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise ObservationError(f"edge ({i}, {j}) out of range for {n} nodes")
        for idx in self.action_order:
            if self.kinds[idx] != "action":
                raise ObservationError(f"action_order entry {idx} is a {self.kinds[idx]} node")
        if len(self.action_order) != sum(k == "action" for k in self.kinds):
            raise ObservationError("action_order must cover every action node")

    @property
    def n_nodes(self) -> int:
        return len(self.kinds)


def to_robot_frame(
    p_world: tuple[float, float, float],
    robot_pose: tuple[float, float, float],
    sensor_height: float = 0.0,
) -> tuple[float, float, float]:
    """World point -> robot frame: +x dead ahead, +y to the robot's left,
    z relative to sensor height."""
    rx, ry, heading = robot_pose
    dx, dy = p_world[0] - rx, p_world[1] - ry
    c, s = math.cos(heading), math.sin(heading)
    return (c * dx + s * dy, -s * dx + c * dy, p_world[2] - sensor_height)


def place_action_layer(
    robot_pose: tuple[float, float, float],
    cfg: ObsConfig,
    grid: OccupancyGrid,
    dfield: DistanceField,
) -> list[ActionNode]:
    """Ring of n_action nodes at action_radius: index 0 dead ahead, then
    counterclockwise at even angular spacing."""
    rx, ry, heading = robot_pose
    nodes = []
    for k in range(cfg.n_action):
        ang = heading + k * (2.0 * math.pi / cfg.n_action)
        pos = (rx + cfg.action_radius * math.cos(ang), ry + cfg.action_radius * math.sin(ang))
        d, inside = esdf_at(dfield, pos)
        free = inside and is_free(dfield, pos, cfg.free_clearance)
        nodes.append(ActionNode(position=pos, free=free, esdf=d if inside else 0.0))
    return nodes


def action_edges(
    action_nodes: list[ActionNode],
    node_positions: np.ndarray,
    cfg: ObsConfig,
    grid: OccupancyGrid,
) -> list[tuple[int, int]]:
    """Pairs (action index, graph-node index). An edge needs the action node
    in free space, the graph node within action_edge_dist (2D, reported
    positions), and an unobstructed straight line between them; the occlusion
    ablation keeps only the distance test."""
    if len(node_positions) == 0:
        return []
    pts = np.asarray(node_positions, dtype=float)
    out: list[tuple[int, int]] = []
    for k, node in enumerate(action_nodes):
        if not cfg.no_occlusion_check and not node.free:
            continue
        d = np.hypot(pts[:, 0] - node.position[0], pts[:, 1] - node.position[1])
        (cand,) = np.nonzero(d <= cfg.action_edge_dist)
        if len(cand) == 0:
            continue
        if cfg.no_occlusion_check:
            out.extend((k, int(j)) for j in cand)
        else:
            starts = np.tile(np.asarray(node.position), (len(cand), 1))
            clear = segments_free(grid, starts, pts[cand])
            out.extend((k, int(j)) for j, ok in zip(cand, clear) if ok)
    return out


def _visited_bits(positions: np.ndarray, trajectory: np.ndarray, visited_dist: float) -> np.ndarray:
    if len(positions) == 0:
        return np.zeros(0)
    traj = np.asarray(trajectory, dtype=float)
    if traj.size == 0:
        return np.zeros(len(positions))
    traj = traj[:, :2]
    d2 = (positions[:, None, 0] - traj[None, :, 0]) ** 2 + (
        positions[:, None, 1] - traj[None, :, 1]
    ) ** 2
    return (d2.min(axis=1) <= visited_dist**2).astype(float)


def node_features(
    node: PlaceNode | ObjectNode | RoomNode | ActionNode,
    robot_pose: tuple[float, float, float],
    trajectory: np.ndarray,
    dfield: DistanceField,
    cfg: ObsConfig,
) -> np.ndarray:
    """Feature vector for one node. The batch path in build_observation must
    agree with this reference entry-for-entry."""
    null = cfg.null_value
    f = np.full(FEATURE_DIM, null, dtype=float)
    if isinstance(node, ActionNode):
        pos3 = (node.position[0], node.position[1], cfg.sensor_height)
        f[0:3] = to_robot_frame(pos3, robot_pose, cfg.sensor_height)
        f[6] = KIND_CODES["action"]
        f[8] = 1.0 if node.free else 0.0
        f[9] = node.esdf
        return f
    f[0:3] = to_robot_frame(node.position, robot_pose, cfg.sensor_height)
    xy = np.asarray([node.position[:2]])
    visited = 0.0 if cfg.no_memory else float(_visited_bits(xy, trajectory, cfg.visited_dist)[0])
    if isinstance(node, PlaceNode):
        f[6] = KIND_CODES["place"]
        f[8] = visited
        f[9] = node.esdf_value
    elif isinstance(node, ObjectNode):
        f[3:6] = node.dims
        f[6] = KIND_CODES["object"]
        f[7] = CLASS_CODES[node.semantic_class]
        f[8] = visited
        f[9] = 0.0
    elif isinstance(node, RoomNode):
        f[6] = KIND_CODES["room"]
        f[7] = CLASS_CODES[node.semantic_class]
        f[8] = visited
    else:
        raise ObservationError(f"unknown node type {type(node).__name__}")
    return f


def build_observation(
    disc: DisclosureState,
    robot_pose: tuple[float, float, float],
    trajectory: np.ndarray,
    grid: OccupancyGrid,
    dfield: DistanceField,
    cfg: ObsConfig,
) -> GraphObservation:
    """Assemble the observation graph: disclosed scene-graph nodes (memory
    mode) or instantaneously visible ones (memoryless), their surviving
    edges, and the action ring wired in by action_edges."""
    g = disc.graph
    if cfg.no_memory:
        place_ids = sorted((i for i in disc.last_visible if i in g.places), key=_id_key)
        object_ids = sorted((i for i in disc.last_visible if i in g.objects), key=_id_key)
        room_ids = sorted((i for i in disc.last_visible if i in g.rooms), key=_id_key)
    else:
        place_ids, object_ids, room_ids = disc.subgraph_nodes()
    if cfg.no_hierarchy:
        object_ids, room_ids = [], []

    ids: list[str] = list(place_ids) + list(object_ids) + list(room_ids)
    kinds: list[str] = (
        ["place"] * len(place_ids) + ["object"] * len(object_ids) + ["room"] * len(room_ids)
    )
    index = {nid: i for i, nid in enumerate(ids)}
    nodes = [g.places[i] for i in place_ids]
    nodes += [g.objects[i] for i in object_ids]
    nodes += [g.rooms[i] for i in room_ids]

    n_dsg = len(ids)
    feats = np.full((n_dsg, FEATURE_DIM), cfg.null_value, dtype=float)
    if n_dsg:
        pos = np.array([nd.position for nd in nodes], dtype=float)
        rx, ry, heading = robot_pose
        c, s = math.cos(heading), math.sin(heading)
        dx, dy = pos[:, 0] - rx, pos[:, 1] - ry
        feats[:, 0] = c * dx + s * dy
        feats[:, 1] = -s * dx + c * dy
        feats[:, 2] = pos[:, 2] - cfg.sensor_height
        feats[:, 6] = [KIND_CODES[k] for k in kinds]
        if cfg.no_memory:
            feats[:, 8] = 0.0
        else:
            feats[:, 8] = _visited_bits(pos[:, :2], trajectory, cfg.visited_dist)
        for i, nd in enumerate(nodes):
            if isinstance(nd, PlaceNode):
                feats[i, 9] = nd.esdf_value
            elif isinstance(nd, ObjectNode):
                feats[i, 3:6] = nd.dims
                feats[i, 7] = CLASS_CODES[nd.semantic_class]
                feats[i, 9] = 0.0
            else:
                feats[i, 7] = CLASS_CODES[nd.semantic_class]

    edges: set[tuple[int, int]] = set()
    for _, a, b in disc.subgraph_edges():
        if a in index and b in index:
            i, j = index[a], index[b]
            edges.add((min(i, j), max(i, j)))

    action_order: list[int] = []
    if not cfg.no_action_layer:
        ring = place_action_layer(robot_pose, cfg, grid, dfield)
        a_feats = np.stack([node_features(a, robot_pose, trajectory, dfield, cfg) for a in ring])
        for k, _ in enumerate(ring):
            action_order.append(n_dsg + k)
            kinds.append("action")
            ids.append(f"a{k}")
        feats = np.vstack([feats, a_feats]) if n_dsg else a_feats
        dsg_xy = np.array([nd.position[:2] for nd in nodes], dtype=float).reshape(-1, 2)
        for k, j in action_edges(ring, dsg_xy, cfg, grid):
            i, jj = n_dsg + k, j
            edges.add((min(i, jj), max(i, jj)))

    return GraphObservation(
        kinds=kinds,
        node_ids=ids,
        features=feats,
        edges=sorted(edges),
        action_order=action_order,
    )


def observation_to_json(obs: GraphObservation) -> str:
    payload = {
        "nodes": [
            {"kind": k, "features": [float(v) for v in row]}
            for k, row in zip(obs.kinds, obs.features)
        ],
        "edges": [list(e) for e in obs.edges],
        "action_order": list(obs.action_order),
    }
    return json.dumps(payload, sort_keys=True)
