import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roofkit.geo_core import InstanceMask, TileGrid
from roofkit.lod2_builder import (
    DegeneratePlaneError,
    extrude_segment,
    mesh_for_instance,
    normal_to_attributes,
    plane_from_attributes,
    trace_boundaries,
    write_obj,
)

from conftest import rect_mask

GRID = TileGrid((0.0, 0.0), 20.0, 20, 20)  # 1 m/px


def blob_mask(rng, grid=GRID, n_rects=4, hole=True):
    h, w = grid.shape
    bits = np.zeros(grid.shape, dtype=bool)
    for _ in range(n_rects):
        r0, c0 = rng.integers(2, h - 6, 2)
        r1, c1 = r0 + rng.integers(2, 6), c0 + rng.integers(2, 6)
        bits[r0:r1, c0:c1] = True
    if hole and rng.random() < 0.5:
        r, c = rng.integers(3, h - 3, 2)
        bits[r, c] = False
    return InstanceMask(grid, bits)


def read_obj(path):
    verts, faces, objects = [], [], []
    for line in path.read_text().splitlines():
        if line.startswith("v "):
            verts.append(tuple(map(float, line.split()[1:])))
        elif line.startswith("f "):
            faces.append(tuple(int(i) - 1 for i in line.split()[1:]))
        elif line.startswith("o "):
            objects.append(line[2:])
    return np.array(verts), faces, objects


def edge_balance(mesh):
    edges = Counter()
    for a, b, c in mesh.faces:
        for u, v in ((a, b), (b, c), (c, a)):
            edges[(int(u), int(v))] += 1
    return all(edges[(v, u)] == n for (u, v), n in edges.items())


def test_flat_normal_ignores_azimuth():
    for phi in (0.0, 77.0, 359.0):
        assert plane_from_attributes((0, 0), 5, 0.0, phi).normal == (0.0, 0.0, 1.0)


def test_forty_five_north_normal():
    n = plane_from_attributes((0, 0), 5, 45.0, 0.0).normal
    assert n == pytest.approx((0.0, math.sqrt(2) / 2, math.sqrt(2) / 2), abs=1e-15)


def test_ridge_convention_flips_facing():
    n = plane_from_attributes((0, 0), 5, 30.0, 10.0, convention="ridge").normal
    assert normal_to_attributes(np.array(n)) == pytest.approx((30.0, 190.0))
    with pytest.raises(ValueError):
        plane_from_attributes((0, 0), 5, 30.0, 10.0, convention="eaves")


def test_vertical_plane_rejected():
    with pytest.raises(DegeneratePlaneError):
        plane_from_attributes((0, 0), 5, 90.0, 0.0)


@settings(max_examples=300)
@given(st.floats(0.001, 89), st.floats(0, 360, exclude_max=True))
def test_normal_round_trip(angle, azimuth):
    n = plane_from_attributes((0, 0), 5, angle, azimuth).normal
    a, z = normal_to_attributes(np.array(n))
    assert a == pytest.approx(angle, abs=1e-9)
    assert min(abs(z - azimuth), 360 - abs(z - azimuth)) < 1e-9


def test_flat_box():
    mask = rect_mask(GRID, 5, 5, 15, 15)
    mesh = mesh_for_instance(mask, 6.0, 0.0, 123.0, "box")
    assert len(mesh.vertices) == 8
    assert len(mesh.faces) == 12
    roof = mesh.faces_labelled("roof")
    assert np.all(mesh.vertices[mesh.faces[roof]][..., 2] == 6.0)
    assert len(mesh.faces_labelled("wall")) == 8
    assert mesh.face_areas()[roof].sum() == pytest.approx(100.0)
    assert edge_balance(mesh)
    assert not mesh.flags["touches_border"] and mesh.flags["clamped"] == 0


def test_tilted_box_slopes_down_to_the_north():
    mask = rect_mask(GRID, 5, 5, 15, 15)
    mesh = mesh_for_instance(mask, 6.0, 45.0, 0.0, "tilt")
    cx, cy = mask.centroid()
    roof = np.unique(mesh.faces[mesh.faces_labelled("roof")])
    for x, y, z in mesh.vertices[roof]:
        assert z == pytest.approx(6.0 - (y - cy), abs=1e-12)
    assert mesh.face_areas()[mesh.faces_labelled("roof")].sum() == pytest.approx(100.0 * math.sqrt(2))


def test_trace_separates_diagonal_pixels_and_finds_holes():
    bits = np.zeros((4, 4), dtype=bool)
    bits[0, 0] = bits[1, 1] = True
    loops = trace_boundaries(bits)
    assert len(loops) == 2
    ring = np.ones((5, 5), dtype=bool)
    ring[2, 2] = False
    loops = trace_boundaries(ring)
    assert sorted(len(l) for l in loops) == [4, 4]


def test_holed_mask_mesh_is_closed():
    bits = np.zeros((20, 20), dtype=bool)
    bits[4:12, 4:12] = True
    bits[7:9, 7:9] = False
    mesh = mesh_for_instance(InstanceMask(GRID, bits), 8.0, 20.0, 200.0, "holed")
    assert edge_balance(mesh)
    assert mesh.face_areas()[mesh.faces_labelled("roof")].sum() == pytest.approx(60 / math.cos(math.radians(20)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 60), st.floats(0, 360, exclude_max=True))
def test_random_mask_area_normal_and_planarity(seed, angle, azimuth):
    mask = blob_mask(np.random.default_rng(seed))
    mesh = mesh_for_instance(mask, 40.0, angle, azimuth, "m")
    roof = mesh.faces_labelled("roof")
    area = mesh.face_areas()[roof].sum()
    assert area == pytest.approx(mask.area_px * GRID.mpp**2 / math.cos(math.radians(angle)), rel=1e-9)
    assert area >= mask.area_px * GRID.mpp**2 * (1 - 1e-12)
    plane = plane_from_attributes(mask.centroid(), 40.0, angle, azimuth)
    v = mesh.vertices[np.unique(mesh.faces[roof])]
    assert np.max(np.abs(v[:, 2] - plane.z_at(v[:, 0], v[:, 1]))) < 1e-9
    normals = mesh.face_normals()
    walls = mesh.faces_labelled("wall")
    assert np.max(np.abs(normals[walls][:, 2])) < 1e-12
    assert np.all(normals[mesh.faces_labelled("ground")][:, 2] < 0)
    assert edge_balance(mesh)


def test_translation_invariance():
    mask = rect_mask(GRID, 3, 4, 9, 13)
    shifted_grid = TileGrid((1000.0, -500.0), 20.0, 20, 20)
    a = mesh_for_instance(mask, 7.0, 30.0, 45.0, "a")
    b = mesh_for_instance(InstanceMask(shifted_grid, mask.bits), 7.0, 30.0, 45.0, "b")
    assert np.allclose(b.vertices - a.vertices, [1000.0, -500.0, 0.0], atol=1e-9)
    assert np.array_equal(a.faces, b.faces)


def test_border_flag_and_clamping():
    mesh = mesh_for_instance(rect_mask(GRID, 0, 0, 20, 4), 1.0, 50.0, 90.0, "edge")
    assert mesh.flags["touches_border"]
    assert mesh.flags["clamped"] > 0
    assert mesh.vertices[:, 2].min() == 0.0


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        extrude_segment(InstanceMask.empty(GRID), plane_from_attributes((0, 0), 5, 0, 0))


def test_obj_header_only_for_no_meshes(tmp_path):
    path = tmp_path / "empty.obj"
    write_obj([], path)
    assert all(line.startswith("#") for line in path.read_text().splitlines())


def test_obj_round_trip(tmp_path):
    meshes = [
        mesh_for_instance(rect_mask(GRID, 5, 5, 15, 15), 6.0, 0.0, 0.0, "box"),
        mesh_for_instance(blob_mask(np.random.default_rng(1)), 9.0, 35.0, 250.0, "blob"),
    ]
    path = tmp_path / "m.obj"
    write_obj(meshes, path)
    verts, faces, objects = read_obj(path)
    assert objects == ["box", "blob"]
    assert np.allclose(verts, np.vstack([m.vertices for m in meshes]), atol=1e-6)
    offset = len(meshes[0].vertices)
    expect = [tuple(f) for f in meshes[0].faces[np.concatenate([meshes[0].faces_labelled(l) for l in ("roof", "wall", "ground")])]]
    assert faces[: len(expect)] == expect
    assert len(faces) == len(meshes[0].faces) + len(meshes[1].faces)
    assert min(min(f) for f in faces[len(expect):]) >= offset
    box_lines = path.read_text().split("o blob")[0]
    assert box_lines.count("\nv ") == 8 and box_lines.count("\nf ") == 12
