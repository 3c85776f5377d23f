"""Procedural office floorplans and their rasterization.

Layout scheme: a central hallway spine runs the full width of the bounds,
with rectangular rooms attached above and below. Walls live on shared room
boundaries; every side room opens onto the hallway through a doorway.
Doors are implied by geometry (centered on the shared room/hallway edge), so
a plan serializes as nothing but rooms + objects and re-rasterizes
identically.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .seeding import derive_rng
from .spatial import OccupancyGrid

ROOM_CLASSES = ("office", "conference", "hallway", "bathroom", "breakroom", "storage")
TARGET_CLASSES = frozenset({"office", "conference"})

# object class -> footprint and height (dx, dy, dz) in meters
OBJECT_DIMS = {
    "desk": (1.2, 0.6, 0.75),
    "chair": (0.5, 0.5, 0.9),
    "table": (1.6, 0.8, 0.75),
    "cabinet": (0.8, 0.4, 1.8),
}
OBJECT_CLASSES = tuple(OBJECT_DIMS)

_SIDE_CLASS_POOL = ("office", "conference", "bathroom", "breakroom", "storage")
_SIDE_CLASS_WEIGHTS = (0.35, 0.15, 0.10, 0.15, 0.25)


class PlanError(ValueError):
    """Raised for invalid plan parameters or impossible layouts."""


@dataclass(frozen=True)
class RoomSpec:
    id: str
    min_x: float
    min_y: float
    max_x: float
    max_y: float
    semantic_class: str

    def __post_init__(self) -> None:
        if self.semantic_class not in ROOM_CLASSES:
            raise PlanError(f"unknown room class {self.semantic_class!r}")
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise PlanError(f"degenerate room rectangle {self.id}")

    @property
    def is_target(self) -> bool:
        return self.semantic_class in TARGET_CLASSES

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))

    @property
    def dims(self) -> tuple[float, float]:
        return (self.max_x - self.min_x, self.max_y - self.min_y)

    def contains(self, x: float, y: float) -> bool:
        return self.min_x <= x <= self.max_x and self.min_y <= y <= self.max_y


@dataclass(frozen=True)
class ObjectSpec:
    """A box-shaped piece of furniture. ``position`` is the footprint center
    with z at half the object's height, so the box sits on the floor."""

    id: str
    position: tuple[float, float, float]
    dims: tuple[float, float, float]
    semantic_class: str

    def __post_init__(self) -> None:
        if self.semantic_class not in OBJECT_DIMS:
            raise PlanError(f"unknown object class {self.semantic_class!r}")

    @property
    def footprint(self) -> tuple[float, float, float, float]:
        x, y, _ = self.position
        dx, dy, _ = self.dims
        return (x - dx / 2, y - dy / 2, x + dx / 2, y + dy / 2)


@dataclass
class FloorPlan:
    bounds: tuple[float, float]  # (width, height) meters, origin at (0, 0)
    rooms: list[RoomSpec]
    objects: list[ObjectSpec]
    # Wall band and doorway sizes are part of the plan itself: rasterization
    # and door derivation read them from here so a plan generated with
    # non-default widths renders the same everywhere.
    wall_thickness: float = 0.3
    door_width: float = 1.0

    def room_by_id(self, rid: str) -> RoomSpec:
        for r in self.rooms:
            if r.id == rid:
                return r
        raise PlanError(f"no room with id {rid!r}")

    def target_rooms(self) -> list[RoomSpec]:
        return [r for r in self.rooms if r.is_target]

    def room_containing(self, x: float, y: float) -> RoomSpec | None:
        for r in self.rooms:
            if r.contains(x, y):
                return r
        return None


@dataclass(frozen=True)
class GenParams:
    width: float = 20.0
    height: float = 15.0
    corridor_width: float = 2.0
    door_width: float = 1.0
    wall_thickness: float = 0.3
    min_room_width: float = 3.0
    n_side_rooms: tuple[int, int] = (4, 6)
    objects_per_room: tuple[int, int] = (0, 2)
    side_room_classes: tuple[str, ...] | None = None
    resolution: float = 0.25
    max_retries: int = 25

    def __post_init__(self) -> None:
        if self.door_width < 0.5:
            raise PlanError("door_width must leave margin around the robot diameter (>= 0.5)")
        if self.resolution > 0.25:
            raise PlanError("validation resolution must be <= 0.25 m")
        if self.wall_thickness < self.resolution:
            raise PlanError("walls thinner than one cell would rasterize with leaks")
        band = (self.height - self.corridor_width) / 2
        if band < 2.0:
            raise PlanError("bounds too small for corridor plus rooms")


@dataclass(frozen=True)
class Door:
    room_a: str
    room_b: str
    # Opening rectangle in world coordinates (spans the wall band).
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.min_x + self.max_x), 0.5 * (self.min_y + self.max_y))


def door_openings(
    plan: FloorPlan,
    door_width: float | None = None,
    wall_thickness: float | None = None,
) -> list[Door]:
    """Doors implied by room adjacency: every wall shared with a hallway gets
    one opening of ``door_width`` centered on the shared segment. Widths
    default to the plan's own."""
    if door_width is None:
        door_width = plan.door_width
    if wall_thickness is None:
        wall_thickness = plan.wall_thickness
    doors: list[Door] = []
    tol = 1e-6
    for i, a in enumerate(plan.rooms):
        for b in plan.rooms[i + 1 :]:
            if a.semantic_class != "hallway" and b.semantic_class != "hallway":
                continue
            # horizontal shared wall (rooms stacked in y)
            for lo, hi in ((a, b), (b, a)):
                if abs(lo.max_y - hi.min_y) < tol:
                    x0 = max(lo.min_x, hi.min_x)
                    x1 = min(lo.max_x, hi.max_x)
                    if x1 - x0 >= door_width + 0.2:
                        cx = 0.5 * (x0 + x1)
                        doors.append(
                            Door(
                                lo.id,
                                hi.id,
                                cx - door_width / 2,
                                lo.max_y - wall_thickness,
                                cx + door_width / 2,
                                lo.max_y + wall_thickness,
                            )
                        )
                if abs(lo.max_x - hi.min_x) < tol:
                    y0 = max(lo.min_y, hi.min_y)
                    y1 = min(lo.max_y, hi.max_y)
                    if y1 - y0 >= door_width + 0.2:
                        cy = 0.5 * (y0 + y1)
                        doors.append(
                            Door(
                                lo.id,
                                hi.id,
                                lo.max_x - wall_thickness,
                                cy - door_width / 2,
                                lo.max_x + wall_thickness,
                                cy + door_width / 2,
                            )
                        )
    return doors


def rasterize(
    plan: FloorPlan,
    resolution: float,
    wall_thickness: float | None = None,
    door_width: float | None = None,
) -> OccupancyGrid:
    """Occupancy raster: everything solid except room interiors and doorways;
    object footprints are stamped back in as occupied.

    A cell is free iff its center lies in carved space, so walls at least one
    cell thick never leak. Wall and door widths default to the plan's own.
    """
    if resolution > 0.25:
        raise PlanError(f"resolution {resolution} too coarse (max 0.25 m)")
    if wall_thickness is None:
        wall_thickness = plan.wall_thickness
    if door_width is None:
        door_width = plan.door_width
    w, h = plan.bounds
    nx = int(np.ceil(w / resolution - 1e-9))
    ny = int(np.ceil(h / resolution - 1e-9))
    occ = np.ones((ny, nx), dtype=bool)
    xs = (np.arange(nx) + 0.5) * resolution
    ys = (np.arange(ny) + 0.5) * resolution

    def carve(x0: float, y0: float, x1: float, y1: float) -> None:
        mx = (xs >= x0) & (xs <= x1)
        my = (ys >= y0) & (ys <= y1)
        occ[np.ix_(my, mx)] = False

    def stamp(x0: float, y0: float, x1: float, y1: float) -> None:
        mx = (xs >= x0) & (xs <= x1)
        my = (ys >= y0) & (ys <= y1)
        occ[np.ix_(my, mx)] = True

    half = wall_thickness / 2
    for room in plan.rooms:
        carve(room.min_x + half, room.min_y + half, room.max_x - half, room.max_y - half)
    for door in door_openings(plan, door_width, wall_thickness):
        carve(door.min_x, door.min_y, door.max_x, door.max_y)
    for obj in plan.objects:
        x0, y0, x1, y1 = obj.footprint
        # center-in stamping: strict on the high edge so an axis-aligned
        # 1 m x 1 m box covers exactly 16 cells at 0.25 m
        mx = (xs > x0) & (xs < x1)
        my = (ys > y0) & (ys < y1)
        occ[np.ix_(my, mx)] = True
    return OccupancyGrid(resolution=resolution, occupied=occ)


def free_space_connected(grid: OccupancyGrid) -> bool:
    """True iff all free cells form one 4-connected component."""
    free = ~grid.occupied
    if not free.any():
        return False
    _, n = ndimage.label(free)
    return n == 1


def generate_floorplan(seed: int, params: GenParams = GenParams()) -> FloorPlan:
    """Deterministic procedural office: hallway spine, side rooms, furniture.

    Guarantees at least one target room (office/conference) and at least one
    distractor (the hallway itself always qualifies), and that the rasterized
    free space is fully connected. Layouts failing validation are re-rolled
    from the same generator stream, so results stay a pure function of
    (seed, params).
    """
    rng = derive_rng(seed, "floorplan")
    last_err = "no attempts made"
    for _ in range(params.max_retries):
        plan = _layout_once(rng, params)
        if plan is None:
            last_err = "room/furniture placement failed"
            continue
        grid = rasterize(plan, params.resolution)
        if not free_space_connected(grid):
            last_err = "free space not connected"
            continue
        if not _rooms_have_free_cells(plan, grid):
            last_err = "room with no free cells"
            continue
        return plan
    raise PlanError(f"floorplan generation failed after {params.max_retries} attempts: {last_err}")


def _layout_once(rng: np.random.Generator, params: GenParams) -> FloorPlan | None:
    w, h = params.width, params.height
    cw = params.corridor_width
    cy0 = (h - cw) / 2
    corridor = RoomSpec("r0", 0.0, cy0, w, cy0 + cw, "hallway")

    if params.side_room_classes is not None:
        n_side = len(params.side_room_classes)
    else:
        lo, hi = params.n_side_rooms
        n_side = int(rng.integers(lo, hi + 1))
    max_per_band = int(w // params.min_room_width)
    n_top = min((n_side + 1) // 2, max_per_band)
    n_bot = min(n_side - n_top, max_per_band)
    if n_top + n_bot < n_side:
        return None

    def split_band(k: int) -> list[tuple[float, float]]:
        if k == 0:
            return []
        slack = w - k * params.min_room_width
        props = rng.random(k) + 0.25
        widths = params.min_room_width + slack * props / props.sum()
        edges = np.concatenate([[0.0], np.cumsum(widths)])
        edges[-1] = w
        return [(float(edges[i]), float(edges[i + 1])) for i in range(k)]

    rects: list[tuple[float, float, float, float]] = []
    for x0, x1 in split_band(n_top):
        rects.append((x0, cy0 + cw, x1, h))
    for x0, x1 in split_band(n_bot):
        rects.append((x0, 0.0, x1, cy0))

    if params.side_room_classes is not None:
        classes = list(params.side_room_classes)
    else:
        classes = list(rng.choice(_SIDE_CLASS_POOL, size=n_side, p=_SIDE_CLASS_WEIGHTS))
        if not any(c in TARGET_CLASSES for c in classes):
            classes[int(rng.integers(0, n_side))] = "office"

    rooms = [corridor]
    for i, ((x0, y0, x1, y1), cls) in enumerate(zip(rects, classes)):
        rooms.append(RoomSpec(f"r{i + 1}", x0, y0, x1, y1, cls))

    plan = FloorPlan(
        bounds=(w, h),
        rooms=rooms,
        objects=[],
        wall_thickness=params.wall_thickness,
        door_width=params.door_width,
    )
    doors = {d.room_a if d.room_b == "r0" else d.room_b: d for d in door_openings(plan)}
    for room in rooms[1:]:
        if room.id not in doors:
            return None  # room without hallway access

    objects: list[ObjectSpec] = []
    obj_lo, obj_hi = params.objects_per_room
    margin = 0.55
    for room in rooms[1:]:
        count = int(rng.integers(obj_lo, obj_hi + 1))
        door = doors[room.id]
        placed: list[tuple[float, float, float, float]] = []
        for _ in range(count):
            cls = str(rng.choice(OBJECT_CLASSES))
            dx, dy, dz = OBJECT_DIMS[cls]
            lo_x = room.min_x + dx / 2 + margin
            hi_x = room.max_x - dx / 2 - margin
            lo_y = room.min_y + dy / 2 + margin
            hi_y = room.max_y - dy / 2 - margin
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            for _attempt in range(20):
                px = float(rng.uniform(lo_x, hi_x))
                py = float(rng.uniform(lo_y, hi_y))
                rect = (px - dx / 2, py - dy / 2, px + dx / 2, py + dy / 2)
                dcx, dcy = door.center
                door_clear = (
                    max(rect[0] - dcx, dcx - rect[2], 0.0) ** 2
                    + max(rect[1] - dcy, dcy - rect[3], 0.0) ** 2
                ) > 1.0**2
                overlap = any(
                    rect[0] < o[2] + 0.4 and o[0] < rect[2] + 0.4 and rect[1] < o[3] + 0.4 and o[1] < rect[3] + 0.4
                    for o in placed
                )
                if door_clear and not overlap:
                    placed.append(rect)
                    objects.append(
                        ObjectSpec(f"o{len(objects)}", (px, py, dz / 2), (dx, dy, dz), cls)
                    )
                    break
    return FloorPlan(
        bounds=(w, h),
        rooms=rooms,
        objects=objects,
        wall_thickness=params.wall_thickness,
        door_width=params.door_width,
    )


def _rooms_have_free_cells(plan: FloorPlan, grid: OccupancyGrid) -> bool:
    res = grid.resolution
    xs = (np.arange(grid.width) + 0.5) * res
    ys = (np.arange(grid.height) + 0.5) * res
    free = ~grid.occupied
    for room in plan.rooms:
        mx = (xs > room.min_x) & (xs < room.max_x)
        my = (ys > room.min_y) & (ys < room.max_y)
        if not free[np.ix_(my, mx)].any():
            return False
    return True


def spawn_targets(
    plan: FloorPlan,
    seed: int,
    n: int,
    grid: OccupancyGrid | None = None,
) -> np.ndarray:
    """Sample n target points uniformly over free space inside target rooms.

    Targets are points: they occupy no cells and never collide. Returns an
    (n, 2) array; n = 0 yields an empty array. Raises PlanError when the plan
    has no target room.
    """
    if not plan.target_rooms():
        raise PlanError("plan has no target rooms (office/conference)")
    points = np.zeros((n, 2), dtype=float)
    if n == 0:
        return points
    if grid is None:
        grid = rasterize(plan, 0.25)
    res = grid.resolution
    xs = (np.arange(grid.width) + 0.5) * res
    ys = (np.arange(grid.height) + 0.5) * res
    free = ~grid.occupied
    mask = np.zeros_like(free)
    for room in plan.target_rooms():
        mx = (xs > room.min_x) & (xs < room.max_x)
        my = (ys > room.min_y) & (ys < room.max_y)
        mask[np.ix_(my, mx)] = True
    iys, ixs = np.nonzero(free & mask)
    if len(ixs) == 0:
        raise PlanError("target rooms contain no free cells")
    rng = derive_rng(seed, "targets")
    picks = rng.integers(0, len(ixs), size=n)
    offs = rng.uniform(0.0, res, size=(n, 2))
    points[:, 0] = ixs[picks] * res + offs[:, 0]
    points[:, 1] = iys[picks] * res + offs[:, 1]
    return points


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def plan_to_json(plan: FloorPlan) -> str:
    payload = {
        "bounds": [plan.bounds[0], plan.bounds[1]],
        "wall_thickness": plan.wall_thickness,
        "door_width": plan.door_width,
        "rooms": [
            {
                "id": r.id,
                "min": [r.min_x, r.min_y],
                "max": [r.max_x, r.max_y],
                "class": r.semantic_class,
                "is_target": r.is_target,
            }
            for r in plan.rooms
        ],
        "objects": [
            {
                "id": o.id,
                "pos": list(o.position),
                "dims": list(o.dims),
                "class": o.semantic_class,
            }
            for o in plan.objects
        ],
    }
    return json.dumps(payload, sort_keys=True)


def plan_from_json(text: str) -> FloorPlan:
    payload = json.loads(text)
    rooms = []
    for r in payload["rooms"]:
        room = RoomSpec(r["id"], r["min"][0], r["min"][1], r["max"][0], r["max"][1], r["class"])
        if bool(r.get("is_target", room.is_target)) != room.is_target:
            raise PlanError(f"room {room.id}: is_target inconsistent with class")
        rooms.append(room)
    objects = [
        ObjectSpec(o["id"], tuple(o["pos"]), tuple(o["dims"]), o["class"])
        for o in payload["objects"]
    ]
    return FloorPlan(bounds=(payload["bounds"][0], payload["bounds"][1]), rooms=rooms, objects=objects)
