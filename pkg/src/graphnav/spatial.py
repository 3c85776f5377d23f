"""Occupancy grids, distance fields, supercover raycasting, and visibility.

Conventions used throughout:

* World frame: x right, y up, meters. Heading 0 points along +x, positive
  heading turns counterclockwise.
* Cell (ix, iy) covers the half-open square
  [ox + ix*res, ox + (ix+1)*res) x [oy + iy*res, oy + (iy+1)*res).
  A point on a lower/left cell edge belongs to that cell; the far edges of
  the grid are outside. This makes world-to-cell mapping total on the
  half-open grid box and keeps cell enumeration along a segment unambiguous.
* The distance field measures cell-center to cell-center distances and is 0
  on occupied cells. Queries outside the grid are conservatively reported as
  distance 0 and flagged out-of-bounds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class SpatialError(ValueError):
    """Invalid geometric input (empty grid, out-of-bounds endpoint, ...)."""


@dataclass(frozen=True)
class Camera:
    """Fan-of-view sensor model. Defaults are simulator configuration choices,
    not calibrated values; override via run config for other regimes."""

    fov_deg: float = 90.0
    max_range_m: float = 5.0

    def __post_init__(self) -> None:
        if not 0.0 < self.fov_deg <= 360.0:
            raise SpatialError(f"fov_deg out of range: {self.fov_deg}")
        if self.max_range_m <= 0.0:
            raise SpatialError(f"max_range_m must be positive: {self.max_range_m}")


@dataclass
class OccupancyGrid:
    """Binary occupancy raster.

    ``occupied`` has shape (height, width) and is indexed [iy, ix]. The array
    is frozen after construction; derived products (distance fields) assume
    it never changes.
    """

    resolution: float
    occupied: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.resolution <= 0.0:
            raise SpatialError(f"resolution must be positive: {self.resolution}")
        occ = np.asarray(self.occupied, dtype=bool)
        if occ.ndim != 2 or occ.shape[0] < 1 or occ.shape[1] < 1:
            raise SpatialError(f"grid must be 2-D and non-empty, got shape {occ.shape}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupied", occ)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    def cell_coords(self, pts: np.ndarray) -> np.ndarray:
        """Map world points (..., 2) to continuous cell coordinates."""
        pts = np.asarray(pts, dtype=float)
        out = np.empty_like(pts)
        out[..., 0] = (pts[..., 0] - self.origin[0]) / self.resolution
        out[..., 1] = (pts[..., 1] - self.origin[1]) / self.resolution
        return out

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Half-open bounds test for world points (..., 2)."""
        u = self.cell_coords(pts)
        return (
            (u[..., 0] >= 0.0)
            & (u[..., 0] < self.width)
            & (u[..., 1] >= 0.0)
            & (u[..., 1] < self.height)
        )

    def cell_of(self, p: np.ndarray) -> tuple[int, int]:
        """Cell (ix, iy) containing a world point. Raises outside the grid."""
        if not bool(self.contains(np.asarray(p, dtype=float))):
            raise SpatialError(f"point {tuple(np.asarray(p, float))} outside grid bounds")
        u = self.cell_coords(np.asarray(p, dtype=float))
        return int(np.floor(u[0])), int(np.floor(u[1]))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (
            self.origin[0] + (ix + 0.5) * self.resolution,
            self.origin[1] + (iy + 0.5) * self.resolution,
        )


@dataclass
class DistanceField:
    """Euclidean distance (meters) from each cell center to the nearest
    occupied cell center; 0 on occupied cells.

    When the source grid has no occupied cell every entry holds the grid
    diagonal length as an explicit "unbounded" sentinel and
    ``has_obstacles`` is False.
    """

    resolution: float
    values: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    has_obstacles: bool = True

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


def compute_distance_field(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance transform of the occupancy raster.

    Backed by scipy's exact EDT; an independent brute-force scan over all
    occupied cells reproduces it to float rounding (see tests).
    """
    occ = grid.occupied
    if occ.size == 0:
        raise SpatialError("cannot build a distance field for an empty grid")
    if not occ.any():
        diag = float(np.hypot(grid.width * grid.resolution, grid.height * grid.resolution))
        values = np.full(occ.shape, diag, dtype=float)
        return DistanceField(grid.resolution, values, grid.origin, has_obstacles=False)
    values = ndimage.distance_transform_edt(~occ, sampling=grid.resolution)
    return DistanceField(grid.resolution, np.asarray(values, dtype=float), grid.origin)


def esdf_at(dfield: DistanceField, p: np.ndarray) -> tuple[float, bool]:
    """Distance-field lookup at a world point via its containing cell.

    Returns (distance_m, in_bounds). Out-of-bounds points are treated as
    sitting on an obstacle: distance 0, in_bounds False.
    """
    p = np.asarray(p, dtype=float)
    ux = (p[0] - dfield.origin[0]) / dfield.resolution
    uy = (p[1] - dfield.origin[1]) / dfield.resolution
    if not (0.0 <= ux < dfield.width and 0.0 <= uy < dfield.height):
        return 0.0, False
    return float(dfield.values[int(uy), int(ux)]), True


def is_free(dfield: DistanceField, p: np.ndarray, threshold: float) -> bool:
    """True iff the point's cell clears the obstacle field by more than
    ``threshold`` meters. Out-of-bounds points are never free."""
    d, inside = esdf_at(dfield, p)
    return inside and d > threshold


# ---------------------------------------------------------------------------
# Supercover segment traversal.
#
# A segment's cell cover is enumerated from its boundary-crossing parameters:
# every t in (0,1) where x(t) or y(t) crosses a gridline splits the segment
# into intervals, and each interval lies inside exactly one cell (sampled at
# the interval midpoint). Endpoint cells are added explicitly so segments
# that start or end exactly on a gridline keep their containing cell.
# Endpoints are processed in lexicographic order so enumeration, and hence
# any free/blocked verdict, is exactly symmetric in the endpoints.
# ---------------------------------------------------------------------------


def _axis_crossings(u0: np.ndarray, u1: np.ndarray) -> np.ndarray:
    """Crossing parameters for one axis, padded with 2.0 sentinels.

    u0, u1: (K,) endpoint coordinates in continuous cell units.
    Returns (K, M) parameter array with crossings strictly inside (0, 1).
    """
    lo = np.minimum(u0, u1)
    hi = np.maximum(u0, u1)
    kmin = np.floor(lo) + 1.0
    kmax = np.ceil(hi) - 1.0
    count = np.maximum(0, (kmax - kmin + 1.0).astype(int))
    m = int(count.max()) if count.size else 0
    if m == 0:
        return np.full((u0.shape[0], 0), 2.0)
    ks = kmin[:, None] + np.arange(m)[None, :]
    valid = np.arange(m)[None, :] < count[:, None]
    delta = u1 - u0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ks - u0[:, None]) / delta[:, None]
    return np.where(valid, t, 2.0)


def _cover_cells(grid: OccupancyGrid, a: np.ndarray, b: np.ndarray):
    """Cells covered by K segments, interval by interval.

    Returns (cells_x, cells_y, valid, start_cell, end_cell) where cells_* are
    (K, M) int arrays of interval cells (positions clamped into the grid),
    valid masks real intervals, and start/end are the (K, 2) endpoint cells.
    Callers guarantee endpoints are inside the grid.
    """
    u0 = grid.cell_coords(a)
    u1 = grid.cell_coords(b)
    # Canonical endpoint order: swap so traversal arithmetic is identical
    # for (a, b) and (b, a).
    swap = (u1[:, 0] < u0[:, 0]) | ((u1[:, 0] == u0[:, 0]) & (u1[:, 1] < u0[:, 1]))
    lo = np.where(swap[:, None], u1, u0)
    hi = np.where(swap[:, None], u0, u1)

    tx = _axis_crossings(lo[:, 0], hi[:, 0])
    ty = _axis_crossings(lo[:, 1], hi[:, 1])
    k = lo.shape[0]
    ts = np.concatenate(
        [np.zeros((k, 1)), np.ones((k, 1)), tx, ty],
        axis=1,
    )
    ts.sort(axis=1)
    mids = 0.5 * (ts[:, :-1] + ts[:, 1:])
    valid = ts[:, 1:] <= 1.0

    px = lo[:, 0][:, None] + mids * (hi[:, 0] - lo[:, 0])[:, None]
    py = lo[:, 1][:, None] + mids * (hi[:, 1] - lo[:, 1])[:, None]
    cx = np.clip(np.floor(px).astype(int), 0, grid.width - 1)
    cy = np.clip(np.floor(py).astype(int), 0, grid.height - 1)
    start_cell = np.floor(lo).astype(int)
    end_cell = np.floor(hi).astype(int)
    return cx, cy, valid, start_cell, end_cell, swap


def line_cells(grid: OccupancyGrid, p1, p2) -> list[tuple[int, int]]:
    """Ordered supercover enumeration of the cells touched by segment p1->p2.

    The first cell contains p1, the last contains p2, consecutive cells are
    8-connected, and the reverse segment yields exactly the reversed list.
    Endpoints outside the grid raise SpatialError.
    """
    a = np.asarray(p1, dtype=float).reshape(1, 2)
    b = np.asarray(p2, dtype=float).reshape(1, 2)
    if not bool(grid.contains(a[0])) or not bool(grid.contains(b[0])):
        raise SpatialError(f"segment endpoint outside grid: {p1} -> {p2}")
    cx, cy, valid, start, end, swap = _cover_cells(grid, a, b)
    seq: list[tuple[int, int]] = [(int(start[0, 0]), int(start[0, 1]))]
    for j in range(cx.shape[1]):
        if not valid[0, j]:
            break
        cell = (int(cx[0, j]), int(cy[0, j]))
        if cell != seq[-1]:
            seq.append(cell)
    endcell = (int(end[0, 0]), int(end[0, 1]))
    if endcell != seq[-1]:
        seq.append(endcell)
    if bool(swap[0]):
        seq.reverse()
    return seq


def segments_free(grid: OccupancyGrid, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized free-line test for K segments (a, b of shape (K, 2)).

    A segment is free iff both endpoints are inside the grid and no covered
    cell is occupied. Out-of-bounds endpoints yield False rather than an
    error: batch callers use this as a conservative visibility predicate.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    k = a.shape[0]
    if k == 0:
        return np.zeros(0, dtype=bool)
    inside = grid.contains(a) & grid.contains(b)
    free = np.zeros(k, dtype=bool)
    if not inside.any():
        return free
    ai, bi = a[inside], b[inside]
    cx, cy, valid, start, end, _ = _cover_cells(grid, ai, bi)
    occ = grid.occupied
    blocked = np.where(valid, occ[cy, cx], False).any(axis=1)
    blocked |= occ[start[:, 1], start[:, 0]]
    blocked |= occ[end[:, 1], end[:, 0]]
    free[inside] = ~blocked
    return free


def raycast_free(grid: OccupancyGrid, p1, p2) -> bool:
    """True iff no cell touched by the segment is occupied.

    Endpoint-symmetric by construction. Endpoints must lie inside the grid.
    """
    a = np.asarray(p1, dtype=float)
    b = np.asarray(p2, dtype=float)
    if not bool(grid.contains(a)) or not bool(grid.contains(b)):
        raise SpatialError(f"raycast endpoint outside grid: {p1} -> {p2}")
    return bool(segments_free(grid, a.reshape(1, 2), b.reshape(1, 2))[0])


def visible_points(
    grid: OccupancyGrid,
    pose: tuple[float, float, float],
    pts: np.ndarray,
    camera: Camera,
) -> np.ndarray:
    """Batch visibility from a pose (x, y, heading_rad) to world points (K, 2).

    A point is visible iff it lies within the field of view half-angle,
    within sensor range, and the straight segment from the robot to the
    point crosses only free cells.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    x, y, heading = pose
    d = pts - np.array([x, y])
    dist = np.hypot(d[:, 0], d[:, 1])
    ang = np.arctan2(d[:, 1], d[:, 0]) - heading
    ang = np.arctan2(np.sin(ang), np.cos(ang))  # wrap to [-pi, pi]
    half = np.radians(camera.fov_deg) / 2.0
    ok = (np.abs(ang) <= half) & (dist <= camera.max_range_m)
    if not ok.any():
        return ok
    origin = np.tile(np.array([[x, y]]), (int(ok.sum()), 1))
    ok[ok] = segments_free(grid, origin, pts[ok])
    return ok


def point_visible(
    grid: OccupancyGrid,
    pose: tuple[float, float, float],
    p,
    camera: Camera,
) -> bool:
    """Single-point wrapper over :func:`visible_points`."""
    return bool(visible_points(grid, pose, np.asarray(p, dtype=float).reshape(1, 2), camera)[0])


def disc_collides(grid: OccupancyGrid, p, radius: float) -> bool:
    """True iff a disc of the given radius centered at p overlaps any
    occupied cell (or pokes outside the grid, which counts as occupied)."""
    p = np.asarray(p, dtype=float)
    res = grid.resolution
    ox, oy = grid.origin
    if (
        p[0] - radius < ox
        or p[1] - radius < oy
        or p[0] + radius > ox + grid.width * res
        or p[1] + radius > oy + grid.height * res
    ):
        return True
    ix0 = int((p[0] - radius - ox) / res)
    ix1 = int((p[0] + radius - ox) / res)
    iy0 = int((p[1] - radius - oy) / res)
    iy1 = int((p[1] + radius - oy) / res)
    ix0, ix1 = max(ix0, 0), min(ix1, grid.width - 1)
    iy0, iy1 = max(iy0, 0), min(iy1, grid.height - 1)
    window = grid.occupied[iy0 : iy1 + 1, ix0 : ix1 + 1]
    if not window.any():
        return False
    iys, ixs = np.nonzero(window)
    cx0 = ox + (ixs + ix0) * res
    cy0 = oy + (iys + iy0) * res
    dx = np.maximum(0.0, np.maximum(cx0 - p[0], p[0] - (cx0 + res)))
    dy = np.maximum(0.0, np.maximum(cy0 - p[1], p[1] - (cy0 + res)))
    return bool((dx * dx + dy * dy < radius * radius).any())


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _rle_encode(bits: np.ndarray) -> str:
    flat = bits.ravel().astype(np.uint8)
    if flat.size == 0:
        return ""
    changes = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate([[0], changes])
    ends = np.concatenate([changes, [flat.size]])
    return ",".join(f"{e - s}:{int(flat[s])}" for s, e in zip(starts, ends))


def _rle_decode(text: str, size: int) -> np.ndarray:
    out = np.empty(size, dtype=bool)
    pos = 0
    if text:
        for token in text.split(","):
            count_s, bit_s = token.split(":")
            count = int(count_s)
            out[pos : pos + count] = bit_s == "1"
            pos += count
    if pos != size:
        raise SpatialError(f"run-length payload covers {pos} cells, expected {size}")
    return out


def grid_to_json(grid: OccupancyGrid) -> str:
    payload = {
        "resolution": grid.resolution,
        "width": grid.width,
        "height": grid.height,
        "origin": [grid.origin[0], grid.origin[1]],
        "cells": _rle_encode(grid.occupied),
    }
    return json.dumps(payload, sort_keys=True)


def grid_from_json(text: str) -> OccupancyGrid:
    payload = json.loads(text)
    w, h = int(payload["width"]), int(payload["height"])
    cells = _rle_decode(payload["cells"], w * h).reshape(h, w)
    return OccupancyGrid(
        resolution=float(payload["resolution"]),
        occupied=cells,
        origin=(float(payload["origin"][0]), float(payload["origin"][1])),
    )
