"""Hierarchical scene graphs over floorplans, sensor noise, and disclosure.

The offline graph has three layers: place nodes on a free-space lattice
(annotated with clearance values), object nodes for furniture, and room
nodes containing both. During an episode the robot discloses the graph
incrementally: places become observed when directly visible, and objects
and rooms attach through their edges to newly visible places. Disclosure is
monotone; nothing is ever retracted.

Noise models perturb the *reported* graph only. Visibility and collision
always run on the true geometry, so a noisy graph changes what the policy
sees, not how the world behaves.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .floorplan import OBJECT_CLASSES, ROOM_CLASSES, FloorPlan
from .seeding import derive_rng
from .spatial import (
    Camera,
    DistanceField,
    OccupancyGrid,
    esdf_at,
    line_cells,
    segments_free,
    visible_points,
)


class DsgError(ValueError):
    pass


@dataclass
class PlaceNode:
    id: str
    position: tuple[float, float, float]
    esdf_value: float


@dataclass
class ObjectNode:
    id: str
    position: tuple[float, float, float]
    dims: tuple[float, float, float]
    semantic_class: str


@dataclass
class RoomNode:
    id: str
    position: tuple[float, float, float]
    dims: tuple[float, float, float]
    semantic_class: str
    children: list[str] = field(default_factory=list)  # place ids


EDGE_KINDS = ("place_place", "place_object", "room_place", "room_object")


@dataclass
class SceneGraph:
    places: dict[str, PlaceNode]
    objects: dict[str, ObjectNode]
    rooms: dict[str, RoomNode]
    edges: list[tuple[str, str, str]]  # (kind, id_a, id_b)

    def __post_init__(self) -> None:
        self.place_neighbors: dict[str, set[str]] = {p: set() for p in self.places}
        self.place_objects: dict[str, set[str]] = {p: set() for p in self.places}
        self.place_rooms: dict[str, set[str]] = {p: set() for p in self.places}
        for kind, a, b in self.edges:
            if kind == "place_place":
                self.place_neighbors[a].add(b)
                self.place_neighbors[b].add(a)
            elif kind == "place_object":
                self.place_objects[a].add(b)
            elif kind == "room_place":
                self.place_rooms[b].add(a)
            elif kind != "room_object":
                raise DsgError(f"unknown edge kind {kind!r}")

    def has_node(self, nid: str) -> bool:
        return nid in self.places or nid in self.objects or nid in self.rooms

    def kind_of(self, nid: str) -> str:
        if nid in self.places:
            return "place"
        if nid in self.objects:
            return "object"
        if nid in self.rooms:
            return "room"
        raise DsgError(f"unknown node id {nid!r}")


def _id_key(nid: str) -> tuple[str, int]:
    i = 0
    while i < len(nid) and not nid[i].isdigit():
        i += 1
    return (nid[:i], int(nid[i:]) if i < len(nid) else -1)


@dataclass(frozen=True)
class DsgParams:
    place_spacing: float = 1.0
    place_margin: float = 0.2
    edge_radius: float = 1.6
    object_link_radius: float = 2.0
    sensor_height: float = 0.7
    room_height: float = 2.5


def build_offline_dsg(
    plan: FloorPlan,
    grid: OccupancyGrid,
    dfield: DistanceField,
    params: DsgParams = DsgParams(),
) -> SceneGraph:
    """Construct the complete scene graph for a plan.

    Places sit on a lattice of ``place_spacing`` restricted to cells whose
    clearance exceeds ``place_margin`` and connect to lattice neighbors
    within ``edge_radius`` that they can see. Objects link to the places
    within ``object_link_radius`` that have line of sight to them (the
    object's own footprint is transparent to that test, since any ray out of
    an object starts inside it), falling back to the nearest sighted place.
    Rooms connect to the places and objects they contain.
    """
    w, h = plan.bounds
    s = params.place_spacing

    positions: list[tuple[float, float]] = []
    esdfs: list[float] = []
    for ky in range(int(math.floor(h / s)) + 1):
        for kx in range(int(math.floor(w / s)) + 1):
            x, y = kx * s, ky * s
            d, inside = esdf_at(dfield, (x, y))
            if inside and d > params.place_margin:
                positions.append((x, y))
                esdfs.append(d)

    places = {
        f"p{i}": PlaceNode(f"p{i}", (x, y, params.sensor_height), e)
        for i, ((x, y), e) in enumerate(zip(positions, esdfs))
    }
    edges: list[tuple[str, str, str]] = []

    if positions:
        pos = np.asarray(positions, dtype=float)
        dmat = cdist(pos, pos)
        ii, jj = np.nonzero(np.triu(dmat <= params.edge_radius, k=1))
        if len(ii):
            free = segments_free(grid, pos[ii], pos[jj])
            for i, j, ok in zip(ii, jj, free):
                if ok:
                    edges.append(("place_place", f"p{i}", f"p{j}"))

        objects: dict[str, ObjectNode] = {}
        for spec in plan.objects:
            objects[spec.id] = ObjectNode(spec.id, spec.position, spec.dims, spec.semantic_class)
            oxy = np.array(spec.position[:2])
            dists = np.hypot(pos[:, 0] - oxy[0], pos[:, 1] - oxy[1])
            order = np.argsort(dists, kind="stable")
            linked = False
            for i in order:
                if dists[i] > params.object_link_radius and linked:
                    break
                if _sees_object(grid, pos[i], oxy, spec.footprint):
                    edges.append(("place_object", f"p{i}", spec.id))
                    linked = True
                    if dists[i] > params.object_link_radius:
                        break  # fallback: nearest sighted place only
    else:
        objects = {
            spec.id: ObjectNode(spec.id, spec.position, spec.dims, spec.semantic_class)
            for spec in plan.objects
        }

    rooms: dict[str, RoomNode] = {}
    placed_ids = list(places)
    for spec in plan.rooms:
        cx, cy = spec.center
        dx, dy = spec.dims
        rooms[spec.id] = RoomNode(
            spec.id,
            (cx, cy, params.room_height / 2),
            (dx, dy, params.room_height),
            spec.semantic_class,
        )
    assigned_place: set[str] = set()
    assigned_obj: set[str] = set()
    for spec in plan.rooms:
        for pid in placed_ids:
            if pid in assigned_place:
                continue
            px, py, _ = places[pid].position
            if spec.contains(px, py):
                edges.append(("room_place", spec.id, pid))
                rooms[spec.id].children.append(pid)
                assigned_place.add(pid)
        for oid, obj in objects.items():
            if oid in assigned_obj:
                continue
            if spec.contains(obj.position[0], obj.position[1]):
                edges.append(("room_object", spec.id, oid))
                assigned_obj.add(oid)

    return SceneGraph(places=places, objects=objects, rooms=rooms, edges=edges)


def _sees_object(grid, place_xy, obj_xy, footprint) -> bool:
    """Line of sight from a place to an object center, treating the object's
    own footprint cells as free (the segment necessarily ends inside them)."""
    try:
        cells = line_cells(grid, place_xy, obj_xy)
    except Exception:
        return False
    x0, y0, x1, y1 = footprint
    res = grid.resolution
    ox, oy = grid.origin
    for ix, iy in cells:
        if not grid.occupied[iy, ix]:
            continue
        cx0, cy0 = ox + ix * res, oy + iy * res
        if cx0 + res > x0 and cx0 < x1 and cy0 + res > y0 and cy0 < y1:
            continue  # cell overlaps the target object's footprint
        return False
    return True


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor-degradation knobs. All perturbations are drawn once per
    episode (fix the seed to fix the realization)."""

    position_sd: float = 0.0
    semantic_fraction: float = 0.0
    room_delay_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.position_sd <= 2.0:
            raise DsgError(f"position_sd out of range [0, 2]: {self.position_sd}")
        if not 0.0 <= self.semantic_fraction <= 1.0:
            raise DsgError(f"semantic_fraction out of range [0, 1]: {self.semantic_fraction}")
        if not 0.0 <= self.room_delay_fraction <= 1.0:
            raise DsgError(f"room_delay_fraction out of range [0, 1]: {self.room_delay_fraction}")

    @property
    def enabled(self) -> bool:
        return self.position_sd > 0 or self.semantic_fraction > 0 or self.room_delay_fraction > 0


def apply_noise(dsg: SceneGraph, noise: NoiseConfig) -> SceneGraph:
    """Perturbed copy of the graph: reported node positions get independent
    per-axis Gaussian offsets (x and y), and a fixed fraction of labeled
    nodes have their class resampled from the same vocabulary excluding the
    true class. Edges, children, and stored clearance values are untouched."""
    places = {pid: replace(node) for pid, node in dsg.places.items()}
    objects = {oid: replace(node) for oid, node in dsg.objects.items()}
    rooms = {
        rid: replace(node, children=list(node.children)) for rid, node in dsg.rooms.items()
    }

    if noise.position_sd > 0:
        rng = derive_rng(noise.seed, "positions")
        for group in (places, objects, rooms):
            for node in group.values():
                off = rng.normal(0.0, noise.position_sd, size=2)
                x, y, z = node.position
                node.position = (x + float(off[0]), y + float(off[1]), z)

    if noise.semantic_fraction > 0:
        rng = derive_rng(noise.seed, "semantic")
        labeled: list[tuple[str, ObjectNode | RoomNode, tuple[str, ...]]] = []
        for oid in sorted(objects, key=_id_key):
            labeled.append((oid, objects[oid], OBJECT_CLASSES))
        for rid in sorted(rooms, key=_id_key):
            labeled.append((rid, rooms[rid], ROOM_CLASSES))
        k = int(math.floor(noise.semantic_fraction * len(labeled)))
        picks = rng.permutation(len(labeled))[:k]
        for idx in picks:
            _, node, vocab = labeled[idx]
            others = [c for c in vocab if c != node.semantic_class]
            node.semantic_class = str(others[int(rng.integers(0, len(others)))])

    return SceneGraph(places=places, objects=objects, rooms=rooms, edges=list(dsg.edges))


# ---------------------------------------------------------------------------
# Disclosure
# ---------------------------------------------------------------------------


@dataclass
class ObserveResult:
    new_ids: list[str]
    visible_places: set[str]
    visible_nodes: set[str]  # everything observable this instant (for memoryless mode)


@dataclass
class DisclosureState:
    """What the robot has accumulated so far. ``graph`` is the reported
    (possibly noisy) scene graph; observation always grows monotonically."""

    graph: SceneGraph
    room_delay_fraction: float = 0.0
    observed_places: set[str] = field(default_factory=set)
    observed_objects: set[str] = field(default_factory=set)
    observed_rooms: set[str] = field(default_factory=set)
    room_child_seen: dict[str, set[str]] = field(default_factory=dict)
    last_visible: set[str] = field(default_factory=set)

    @property
    def observed(self) -> set[str]:
        return self.observed_places | self.observed_objects | self.observed_rooms

    def subgraph_nodes(self) -> tuple[list[str], list[str], list[str]]:
        return (
            sorted(self.observed_places, key=_id_key),
            sorted(self.observed_objects, key=_id_key),
            sorted(self.observed_rooms, key=_id_key),
        )

    def subgraph_edges(self) -> list[tuple[str, str, str]]:
        seen = self.observed
        return [e for e in self.graph.edges if e[1] in seen and e[2] in seen]


def init_disclosure(graph: SceneGraph, room_delay_fraction: float = 0.0) -> DisclosureState:
    return DisclosureState(
        graph=graph,
        room_delay_fraction=room_delay_fraction,
        room_child_seen={rid: set() for rid in graph.rooms},
    )


def observe(
    state: DisclosureState,
    true_graph: SceneGraph,
    pose: tuple[float, float, float],
    camera: Camera,
    grid: OccupancyGrid,
) -> ObserveResult:
    """Pure visibility pass from a pose. Returns newly observed node ids in
    deterministic order plus the instantaneous visible set.

    Visibility runs on true place positions. Objects surface through edges
    to visible places. A room surfaces through an edge to a visible place;
    with room delay active, only once the robot has cumulatively observed at
    least ceil(fraction * n_children) of its child places.
    """
    g = state.graph
    pids = sorted(true_graph.places, key=_id_key)
    pts = np.array([true_graph.places[p].position[:2] for p in pids]) if pids else np.zeros((0, 2))
    vis_mask = visible_points(grid, pose, pts, camera)
    visible_places = {pid for pid, v in zip(pids, vis_mask) if v}

    visible_objects: set[str] = set()
    for pid in visible_places:
        visible_objects |= g.place_objects.get(pid, set())

    candidate_rooms: set[str] = set()
    for pid in visible_places:
        candidate_rooms |= g.place_rooms.get(pid, set())
    visible_rooms: set[str] = set()
    for rid in candidate_rooms:
        children = g.rooms[rid].children
        if state.room_delay_fraction > 0 and children:
            seen = state.room_child_seen.get(rid, set()) | (visible_places & set(children))
            threshold = math.ceil(state.room_delay_fraction * len(children))
            if len(seen) < threshold:
                continue
        visible_rooms.add(rid)
    visible_rooms |= state.observed_rooms & candidate_rooms  # released rooms stay released

    new_ids = (
        sorted(visible_places - state.observed_places, key=_id_key)
        + sorted(visible_objects - state.observed_objects, key=_id_key)
        + sorted(visible_rooms - state.observed_rooms, key=_id_key)
    )
    visible_nodes = visible_places | visible_objects | visible_rooms
    return ObserveResult(new_ids=new_ids, visible_places=visible_places, visible_nodes=visible_nodes)


def accumulate(state: DisclosureState, result: ObserveResult | list[str]) -> DisclosureState:
    """Merge newly observed ids into the state (monotone). Accepts either an
    ObserveResult or a bare id list; unknown ids raise DsgError."""
    if isinstance(result, ObserveResult):
        new_ids = result.new_ids
        state.last_visible = set(result.visible_nodes)
        seen_places = result.visible_places
    else:
        new_ids = list(result)
        seen_places = {nid for nid in new_ids if nid in state.graph.places}
    g = state.graph
    for nid in new_ids:
        kind = g.kind_of(nid)  # raises on unknown ids
        if kind == "place":
            state.observed_places.add(nid)
        elif kind == "object":
            state.observed_objects.add(nid)
        else:
            state.observed_rooms.add(nid)
    for pid in seen_places:
        for rid in g.place_rooms.get(pid, set()):
            state.room_child_seen.setdefault(rid, set()).add(pid)
    return state


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def dsg_to_json(dsg: SceneGraph) -> str:
    payload = {
        "places": [
            {"id": p.id, "pos": list(p.position), "esdf": p.esdf_value}
            for p in (dsg.places[k] for k in sorted(dsg.places, key=_id_key))
        ],
        "objects": [
            {"id": o.id, "pos": list(o.position), "dims": list(o.dims), "class": o.semantic_class}
            for o in (dsg.objects[k] for k in sorted(dsg.objects, key=_id_key))
        ],
        "rooms": [
            {
                "id": r.id,
                "pos": list(r.position),
                "dims": list(r.dims),
                "class": r.semantic_class,
                "children": sorted(r.children, key=_id_key),
            }
            for r in (dsg.rooms[k] for k in sorted(dsg.rooms, key=_id_key))
        ],
        "edges": [list(e) for e in dsg.edges],
    }
    return json.dumps(payload, sort_keys=True)


def dsg_from_json(text: str) -> SceneGraph:
    payload = json.loads(text)
    places = {p["id"]: PlaceNode(p["id"], tuple(p["pos"]), p["esdf"]) for p in payload["places"]}
    objects = {
        o["id"]: ObjectNode(o["id"], tuple(o["pos"]), tuple(o["dims"]), o["class"])
        for o in payload["objects"]
    }
    rooms = {
        r["id"]: RoomNode(r["id"], tuple(r["pos"]), tuple(r["dims"]), r["class"], list(r["children"]))
        for r in payload["rooms"]
    }
    edges = [tuple(e) for e in payload["edges"]]
    return SceneGraph(places=places, objects=objects, rooms=rooms, edges=edges)
