"""Scene-graph construction, noise models, and incremental disclosure."""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from graphnav.floorplan import (
    OBJECT_CLASSES,
    OBJECT_DIMS,
    ROOM_CLASSES,
    FloorPlan,
    GenParams,
    ObjectSpec,
    RoomSpec,
    generate_floorplan,
    rasterize,
)
from graphnav.scenegraph import (
    DsgError,
    DsgParams,
    NoiseConfig,
    ObjectNode,
    PlaceNode,
    RoomNode,
    SceneGraph,
    accumulate,
    apply_noise,
    build_offline_dsg,
    dsg_from_json,
    dsg_to_json,
    init_disclosure,
    observe,
)
from graphnav.spatial import Camera, compute_distance_field, raycast_free

CAM = Camera(fov_deg=90.0, max_range_m=5.0)


def square_room_plan(with_desk: bool = False) -> FloorPlan:
    objects = []
    if with_desk:
        objects.append(ObjectSpec("o0", (2.0, 2.0, 0.375), OBJECT_DIMS["desk"], "desk"))
    return FloorPlan(bounds=(4.0, 4.0), rooms=[RoomSpec("r0", 0, 0, 4, 4, "office")], objects=objects)


def build(plan: FloorPlan, params: DsgParams = DsgParams()):
    grid = rasterize(plan, 0.25)
    dfield = compute_distance_field(grid)
    return grid, dfield, build_offline_dsg(plan, grid, dfield, params)


def edges_of(dsg: SceneGraph, kind: str) -> set[tuple[str, str]]:
    return {(a, b) for k, a, b in dsg.edges if k == kind}


# ---------------------------------------------------------------------------
# Offline construction
# ---------------------------------------------------------------------------


class TestBuildOffline:
    def test_empty_square_room_lattice(self):
        _, _, dsg = build(square_room_plan())
        got = {p.position[:2] for p in dsg.places.values()}
        want = {(float(x), float(y)) for x in (1, 2, 3) for y in (1, 2, 3)}
        assert got == want
        assert all(p.position[2] == pytest.approx(0.7) for p in dsg.places.values())
        assert all(p.esdf_value > 0.2 for p in dsg.places.values())

    def test_empty_square_room_is_eight_connected(self):
        _, _, dsg = build(square_room_plan())
        pos = {pid: p.position[:2] for pid, p in dsg.places.items()}
        pp = edges_of(dsg, "place_place")
        assert len(pp) == 20  # 12 orthogonal + 8 diagonal on a 3x3 lattice
        for a, b in pp:
            d = math.dist(pos[a], pos[b])
            assert d <= 1.6 + 1e-12

    def test_place_on_obstacle_is_dropped(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        got = {p.position[:2] for p in dsg.places.values()}
        assert (2.0, 2.0) not in got
        assert len(got) == 8

    def test_object_links_all_sighted_places_in_radius(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        po = edges_of(dsg, "place_object")
        assert {b for _, b in po} == {"o0"}
        # every surviving place is within 2 m and sees the desk across free space
        assert {a for a, _ in po} == set(dsg.places)

    def test_object_fallback_links_single_nearest_place(self):
        params = DsgParams(object_link_radius=0.1)
        _, _, dsg = build(square_room_plan(with_desk=True), params)
        po = edges_of(dsg, "place_object")
        assert len(po) == 1
        (pid, oid), = po
        assert oid == "o0"
        d = math.dist(dsg.places[pid].position[:2], (2.0, 2.0))
        assert d == pytest.approx(1.0)  # nearest lattice ring around the desk

    def test_room_containment_edges(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        rp = edges_of(dsg, "room_place")
        ro = edges_of(dsg, "room_object")
        assert rp == {("r0", pid) for pid in dsg.places}
        assert ro == {("r0", "o0")}
        assert sorted(dsg.rooms["r0"].children) == sorted(dsg.places)

    def test_room_node_geometry(self):
        _, _, dsg = build(square_room_plan())
        room = dsg.rooms["r0"]
        assert room.position == pytest.approx((2.0, 2.0, 1.25))
        assert room.dims == pytest.approx((4.0, 4.0, 2.5))
        assert room.semantic_class == "office"

    def test_generated_plan_invariants(self):
        plan = generate_floorplan(3, GenParams())
        grid = rasterize(plan, 0.25)
        dfield = compute_distance_field(grid)
        dsg = build_offline_dsg(plan, grid, dfield)
        assert len(dsg.places) > 50
        pos = {pid: p.position[:2] for pid, p in dsg.places.items()}
        for a, b in edges_of(dsg, "place_place"):
            assert math.dist(pos[a], pos[b]) <= 1.6 + 1e-12
            assert raycast_free(grid, pos[a], pos[b])
        # every object ends up attached to at least one place
        linked = {b for _, b in edges_of(dsg, "place_object")}
        assert linked == set(dsg.objects)
        # containment is a partition: no node claimed by two rooms
        rp = list(edges_of(dsg, "room_place"))
        assert len({p for _, p in rp}) == len(rp)
        for rid, room in dsg.rooms.items():
            assert set(room.children) == {p for r, p in rp if r == rid}

    def test_build_determinism(self):
        plan = generate_floorplan(5, GenParams())
        grid = rasterize(plan, 0.25)
        dfield = compute_distance_field(grid)
        a = build_offline_dsg(plan, grid, dfield)
        b = build_offline_dsg(plan, grid, dfield)
        assert dsg_to_json(a) == dsg_to_json(b)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def synthetic_graph(n_places: int = 0, n_objects: int = 0, n_rooms: int = 0) -> SceneGraph:
    places = {f"p{i}": PlaceNode(f"p{i}", (1.0 * i, 2.0, 0.7), 0.5) for i in range(n_places)}
    objects = {
        f"o{i}": ObjectNode(f"o{i}", (i, 0.0, 0.375), (1.0, 1.0, 0.75), OBJECT_CLASSES[i % 4])
        for i in range(n_objects)
    }
    rooms = {
        f"r{i}": RoomNode(f"r{i}", (i, 5.0, 1.25), (4.0, 4.0, 2.5), ROOM_CLASSES[i % 6])
        for i in range(n_rooms)
    }
    return SceneGraph(places=places, objects=objects, rooms=rooms, edges=[])


class TestNoise:
    def test_disabled_noise_is_identity(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        noisy = apply_noise(dsg, NoiseConfig(seed=7))
        assert dsg_to_json(noisy) == dsg_to_json(dsg)
        assert noisy is not dsg
        noisy.places[next(iter(noisy.places))].position = (99.0, 99.0, 0.7)
        assert dsg_to_json(dsg) != dsg_to_json(noisy)  # copies are independent

    def test_position_noise_statistics(self):
        g = synthetic_graph(n_places=10_000)
        noisy = apply_noise(g, NoiseConfig(position_sd=1.5, seed=11))
        offs = np.array(
            [
                (np.array(noisy.places[p].position[:2]) - np.array(g.places[p].position[:2]))
                for p in g.places
            ]
        ).ravel()
        assert abs(offs.std() - 1.5) / 1.5 < 0.03
        assert abs(offs.mean()) < 0.06

    def test_position_noise_leaves_z_esdf_edges(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        noisy = apply_noise(dsg, NoiseConfig(position_sd=0.5, seed=3))
        for pid in dsg.places:
            assert noisy.places[pid].position[2] == dsg.places[pid].position[2]
            assert noisy.places[pid].esdf_value == dsg.places[pid].esdf_value
            assert noisy.places[pid].position[:2] != dsg.places[pid].position[:2]
        assert noisy.edges == dsg.edges
        assert noisy.rooms["r0"].children == dsg.rooms["r0"].children

    def test_position_noise_determinism(self):
        g = synthetic_graph(n_places=50)
        a = apply_noise(g, NoiseConfig(position_sd=1.0, seed=5))
        b = apply_noise(g, NoiseConfig(position_sd=1.0, seed=5))
        c = apply_noise(g, NoiseConfig(position_sd=1.0, seed=6))
        assert dsg_to_json(a) == dsg_to_json(b)
        assert dsg_to_json(a) != dsg_to_json(c)

    def test_semantic_noise_corrupts_floor_fraction(self):
        g = synthetic_graph(n_objects=40, n_rooms=10)
        noisy = apply_noise(g, NoiseConfig(semantic_fraction=0.8, seed=2))
        changed = [
            oid for oid in g.objects if noisy.objects[oid].semantic_class != g.objects[oid].semantic_class
        ] + [rid for rid in g.rooms if noisy.rooms[rid].semantic_class != g.rooms[rid].semantic_class]
        assert len(changed) == math.floor(0.8 * 50)
        for oid in g.objects:
            assert noisy.objects[oid].semantic_class in OBJECT_CLASSES
        for rid in g.rooms:
            assert noisy.rooms[rid].semantic_class in ROOM_CLASSES

    def test_semantic_noise_small_fraction_and_full(self):
        g = synthetic_graph(n_objects=8, n_rooms=2)
        few = apply_noise(g, NoiseConfig(semantic_fraction=0.1, seed=2))
        n_changed = sum(
            few.objects[o].semantic_class != g.objects[o].semantic_class for o in g.objects
        ) + sum(few.rooms[r].semantic_class != g.rooms[r].semantic_class for r in g.rooms)
        assert n_changed == 1  # floor(0.1 * 10)
        full = apply_noise(g, NoiseConfig(semantic_fraction=1.0, seed=2))
        for o in g.objects:
            assert full.objects[o].semantic_class != g.objects[o].semantic_class
        for r in g.rooms:
            assert full.rooms[r].semantic_class != g.rooms[r].semantic_class

    def test_semantic_noise_never_touches_places(self):
        g = synthetic_graph(n_places=5, n_objects=3, n_rooms=2)
        noisy = apply_noise(g, NoiseConfig(semantic_fraction=1.0, seed=9))
        for pid in g.places:
            assert noisy.places[pid].position == g.places[pid].position

    def test_noise_config_validation(self):
        with pytest.raises(DsgError):
            NoiseConfig(position_sd=-0.1)
        with pytest.raises(DsgError):
            NoiseConfig(semantic_fraction=1.5)
        with pytest.raises(DsgError):
            NoiseConfig(room_delay_fraction=-0.2)


# ---------------------------------------------------------------------------
# Disclosure
# ---------------------------------------------------------------------------


class TestDisclosure:
    def test_visibility_cone_and_new_ids(self):
        grid, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg)
        res = observe(state, dsg, (2.0, 2.0, 0.0), CAM, grid)
        pos = {pid: dsg.places[pid].position[:2] for pid in dsg.places}
        want = {pid for pid, p in pos.items() if p in {(2.0, 2.0), (3.0, 1.0), (3.0, 2.0), (3.0, 3.0)}}
        assert res.visible_places == want
        assert res.new_ids == sorted(want, key=lambda s: int(s[1:])) + ["r0"]

    def test_accumulate_is_monotone(self):
        # 100 degree cone keeps the +-45 degree diagonals clear of the
        # boundary, where angle wrapping is a one-ulp coin flip
        cam = Camera(fov_deg=100.0, max_range_m=5.0)
        grid, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg)
        accumulate(state, observe(state, dsg, (2.0, 2.0, 0.0), cam, grid))
        first = set(state.observed)
        res2 = observe(state, dsg, (2.0, 2.0, math.pi), cam, grid)
        accumulate(state, res2)
        assert first <= state.observed
        assert set(res2.new_ids).isdisjoint(first)
        new_xy = {dsg.places[p].position[:2] for p in res2.new_ids}
        assert new_xy == {(1.0, 1.0), (1.0, 2.0), (1.0, 3.0)}

    def test_occlusion_blocks_place_behind_desk(self):
        grid, _, dsg = build(square_room_plan(with_desk=True))
        state = init_disclosure(dsg)
        res = observe(state, dsg, (1.0, 2.0, 0.0), CAM, grid)
        xy = {dsg.places[p].position[:2] for p in res.visible_places}
        assert (3.0, 2.0) not in xy  # straight ahead but behind the desk
        assert {(1.0, 2.0), (2.0, 1.0), (2.0, 3.0)} <= xy

    def test_object_surfaces_with_linked_place(self):
        grid, _, dsg = build(square_room_plan(with_desk=True))
        state = init_disclosure(dsg)
        res = observe(state, dsg, (1.0, 2.0, 0.0), CAM, grid)
        assert "o0" in res.new_ids
        assert "o0" in res.visible_nodes

    def test_room_delay_withholds_then_releases(self):
        cam = Camera(fov_deg=100.0, max_range_m=5.0)
        grid, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg, room_delay_fraction=0.5)
        # nine child places; release threshold is ceil(0.5 * 9) = 5
        res1 = observe(state, dsg, (2.0, 2.0, 0.0), cam, grid)
        assert len(res1.visible_places) == 4
        assert "r0" not in res1.new_ids and "r0" not in res1.visible_nodes
        accumulate(state, res1)
        res2 = observe(state, dsg, (2.0, 2.0, math.pi), cam, grid)
        accumulate(state, res2)
        assert len(state.observed_places) == 7
        assert "r0" in res2.new_ids

    def test_objects_are_not_delayed(self):
        grid, _, dsg = build(square_room_plan(with_desk=True))
        state = init_disclosure(dsg, room_delay_fraction=0.75)
        # eight child places; threshold ceil(0.75 * 8) = 6 exceeds one view
        res = observe(state, dsg, (1.0, 2.0, 0.0), CAM, grid)
        assert "o0" in res.new_ids
        assert "r0" not in res.new_ids and "r0" not in res.visible_nodes

    def test_released_room_stays_released(self):
        grid, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg, room_delay_fraction=0.1)  # threshold ceil(0.9) = 1
        res1 = observe(state, dsg, (2.0, 2.0, 0.0), CAM, grid)
        assert "r0" in res1.new_ids
        accumulate(state, res1)
        res2 = observe(state, dsg, (2.0, 2.0, math.pi), CAM, grid)
        assert "r0" in res2.visible_nodes and "r0" not in res2.new_ids

    def test_visibility_uses_true_positions(self):
        grid, _, dsg = build(square_room_plan())
        shifted = apply_noise(dsg, NoiseConfig(seed=0))
        for node in shifted.places.values():
            x, y, z = node.position
            node.position = (x + 50.0, y + 50.0, z)
        state = init_disclosure(shifted)
        res = observe(state, dsg, (2.0, 2.0, 0.0), CAM, grid)
        baseline = observe(init_disclosure(dsg), dsg, (2.0, 2.0, 0.0), CAM, grid)
        assert res.visible_places == baseline.visible_places

    def test_range_limit(self):
        grid, _, dsg = build(square_room_plan())
        near_cam = Camera(fov_deg=90.0, max_range_m=1.0)
        state = init_disclosure(dsg)
        res = observe(state, dsg, (2.0, 2.0, 0.0), near_cam, grid)
        xy = {dsg.places[p].position[:2] for p in res.visible_places}
        assert xy == {(2.0, 2.0), (3.0, 2.0)}

    def test_accumulate_rejects_unknown_id(self):
        _, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg)
        with pytest.raises(DsgError):
            accumulate(state, ["p0", "zz9"])

    def test_subgraph_edges_need_both_ends(self):
        grid, _, dsg = build(square_room_plan())
        state = init_disclosure(dsg)
        accumulate(state, observe(state, dsg, (2.0, 2.0, 0.0), CAM, grid))
        sub = state.subgraph_edges()
        seen = state.observed
        assert sub
        for _, a, b in sub:
            assert a in seen and b in seen
        assert len(sub) < len(dsg.edges)

    def test_subgraph_nodes_sorted_numerically(self):
        g = synthetic_graph(n_places=12)
        state = init_disclosure(g)
        accumulate(state, [f"p{i}" for i in (10, 2, 0, 11)])
        assert state.subgraph_nodes()[0] == ["p0", "p2", "p10", "p11"]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


class TestSerialization:
    def test_roundtrip_equality(self):
        _, _, dsg = build(square_room_plan(with_desk=True))
        again = dsg_from_json(dsg_to_json(dsg))
        assert again == dsg
        assert dsg_to_json(again) == dsg_to_json(dsg)

    def test_generated_plan_roundtrip(self):
        plan = generate_floorplan(8, GenParams())
        grid = rasterize(plan, 0.25)
        dsg = build_offline_dsg(plan, grid, compute_distance_field(grid))
        assert dsg_from_json(dsg_to_json(dsg)) == dsg
