"""Simplified LoD2 reconstruction: one tilted roof plane per segment, extruded to the ground.

Azimuth is the compass direction the roof faces (its downslope
direction), clockwise from north, with east = +x and north = +y. The
``ridge`` convention reads azimuths as the opposite direction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon

from .geo_core import InstanceMask, TileGrid

AZIMUTH_CONVENTIONS = ("facing", "ridge")


class DegeneratePlaneError(ValueError):
    pass


@dataclass(frozen=True)
class RoofPlane:
    normal: tuple[float, float, float]
    anchor: tuple[float, float, float]

    def z_at(self, x, y):
        nx, ny, nz = self.normal
        x0, y0, z0 = self.anchor
        return z0 - (nx * (np.asarray(x) - x0) + ny * (np.asarray(y) - y0)) / nz

    def angle_azimuth(self) -> tuple[float, float]:
        """Recover (angle, facing azimuth) in degrees from the normal."""
        return normal_to_attributes(np.asarray(self.normal))


def normal_to_attributes(n: np.ndarray) -> tuple[float, float]:
    n = np.asarray(n, dtype=float) / np.linalg.norm(n)
    angle = math.degrees(math.acos(min(1.0, max(-1.0, n[2]))))
    azimuth = math.degrees(math.atan2(n[0], n[1])) % 360.0
    return angle, 0.0 if azimuth >= 360.0 else azimuth


def plane_from_attributes(
    centroid: tuple[float, float],
    height: float,
    angle: float,
    azimuth: float,
    convention: str = "facing",
) -> RoofPlane:
    if convention not in AZIMUTH_CONVENTIONS:
        raise ValueError(f"unknown azimuth convention {convention!r}")
    if not 0.0 <= angle < 90.0:
        raise DegeneratePlaneError(f"roof angle must lie in [0, 90), got {angle}")
    phi = azimuth + (180.0 if convention == "ridge" else 0.0)
    a, p = math.radians(angle), math.radians(phi % 360.0)
    n = (math.sin(a) * math.sin(p), math.sin(a) * math.cos(p), math.cos(a))
    return RoofPlane(n, (float(centroid[0]), float(centroid[1]), float(height)))


@dataclass
class BuildingMesh:
    name: str
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) vertex indices, counter-clockwise seen from outside
    labels: list[str]  # per face: roof | wall | ground
    flags: dict[str, Any] = field(default_factory=dict)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        cross = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]], v[self.faces[:, 2]] - v[self.faces[:, 0]])
        return cross / np.linalg.norm(cross, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        cross = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]], v[self.faces[:, 2]] - v[self.faces[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def faces_labelled(self, label: str) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.labels) if lab == label], dtype=int)


_LEFT = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}


def trace_boundaries(bits: np.ndarray) -> list[list[tuple[int, int]]]:
    """Closed pixel-edge loops of a boolean raster, collinear vertices removed.

    Coordinates are lattice corners ``(X, Y)`` with ``X = col`` and
    ``Y = n_rows - row`` (Y grows northward). The set region is on the
    left of every loop, so outer loops are counter-clockwise and holes
    clockwise. Diagonally touching pixels stay in separate loops.
    """
    h, w = bits.shape
    pad = np.zeros((h + 2, w + 2), dtype=bool)
    pad[1:-1, 1:-1] = bits
    core = pad[1:-1, 1:-1]
    out: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(mask: np.ndarray, start_dx: int, start_dy: int, d: tuple[int, int]) -> None:
        rows, cols = np.nonzero(mask)
        for r, c in zip(rows.tolist(), cols.tolist()):
            # lower-left corner of pixel (r, c) is (c, h - r - 1)
            start = (c + start_dx, h - r - 1 + start_dy)
            out.setdefault(start, []).append(d)

    add(core & ~pad[2:, 1:-1], 0, 0, (1, 0))  # south side, heading east
    add(core & ~pad[1:-1, 2:], 1, 0, (0, 1))  # east side, heading north
    add(core & ~pad[:-2, 1:-1], 1, 1, (-1, 0))  # north side, heading west
    add(core & ~pad[1:-1, :-2], 0, 1, (0, -1))  # west side, heading south

    # each edge's successor is the leftmost turn available at its end point
    loops = []
    visited: set[tuple[tuple[int, int], tuple[int, int]]] = set()
    for start in sorted(out):
        for d0 in sorted(out[start]):
            if (start, d0) in visited:
                continue
            loop = []
            pos, d = start, d0
            while (pos, d) not in visited:
                visited.add((pos, d))
                loop.append(pos)
                pos = (pos[0] + d[0], pos[1] + d[1])
                left = _LEFT[d]
                choices = out[pos]
                d = next(o for o in (left, d, (-left[0], -left[1])) if o in choices)
            loops.append(_drop_collinear(loop))
    return loops


def _drop_collinear(loop: list[tuple[int, int]]) -> list[tuple[int, int]]:
    n = len(loop)
    keep = []
    for k in range(n):
        a, b, c = loop[k - 1], loop[k], loop[(k + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
            keep.append(b)
    return keep


def _signed_area(loop: Sequence[tuple[float, float]]) -> float:
    pts = np.asarray(loop, dtype=float)
    return 0.5 * float(np.dot(pts[:, 0], np.roll(pts[:, 1], -1)) - np.dot(np.roll(pts[:, 0], -1), pts[:, 1]))


def _inside(pt: tuple[float, float], loop: Sequence[tuple[int, int]]) -> bool:
    x, y = pt
    inside = False
    n = len(loop)
    for k in range(n):
        x1, y1 = loop[k]
        x2, y2 = loop[(k + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


def _group_loops(loops):
    outers = [lp for lp in loops if _signed_area(lp) > 0]
    holes = [lp for lp in loops if _signed_area(lp) < 0]
    groups = [(o, []) for o in outers]
    for hole in holes:
        a, b = hole[0], hole[1]
        d = (np.sign(b[0] - a[0]), np.sign(b[1] - a[1]))
        # the unset pixel on the right of the first edge lies inside the hole
        probe = (a[0] + 0.5 * d[0] + 0.5 * d[1], a[1] + 0.5 * d[1] - 0.5 * d[0])
        owners = [g for g in groups if _inside(probe, g[0])]
        if owners:
            min(owners, key=lambda g: _signed_area(g[0]))[1].append(hole)
    return groups


def _triangulate(outer, holes) -> list[tuple[tuple[float, float], ...]]:
    tris = shapely.constrained_delaunay_triangles(Polygon(outer, holes))
    out = []
    for t in tris.geoms:
        pts = list(t.exterior.coords)[:3]
        if _signed_area(pts) < 0:
            pts = pts[::-1]
        if _signed_area(pts) > 0:
            out.append(tuple((float(x), float(y)) for x, y in pts))
    return out


def extrude_segment(
    mask: InstanceMask,
    plane: RoofPlane,
    grid: TileGrid | None = None,
    ground_z: float = 0.0,
    name: str = "segment",
) -> BuildingMesh:
    """Prism under the roof plane over the mask's traced outline.

    Roof vertices below ``ground_z`` are clamped to it and counted in
    ``flags["clamped"]``; ``flags["touches_border"]`` marks masks whose
    outline is closed along the tile edge.
    """
    grid = grid or mask.grid
    if mask.area_px == 0:
        raise ValueError("cannot extrude an empty mask")
    bits = mask.bits
    h, w = bits.shape
    touches = bool(bits[0].any() or bits[-1].any() or bits[:, 0].any() or bits[:, -1].any())
    groups = _group_loops(trace_boundaries(bits))

    x0, y0 = grid.origin
    m = grid.mpp
    verts: list[tuple[float, float, float]] = []
    index: dict[tuple[float, float, str], int] = {}
    clamped: set[tuple[float, float]] = set()

    def vid(pt: tuple[float, float], level: str) -> int:
        key = (pt[0], pt[1], level)
        if key not in index:
            x = x0 + pt[0] * m
            y = y0 + (pt[1] - h) * m + grid.extent
            if level == "roof":
                z = float(plane.z_at(x, y))
                if z < ground_z:
                    clamped.add(pt)
                    z = ground_z
            else:
                z = ground_z
            index[key] = len(verts)
            verts.append((x, y, z))
        return index[key]

    faces: list[tuple[int, int, int]] = []
    labels: list[str] = []
    for outer, holes in groups:
        for tri in _triangulate(outer, holes):
            faces.append(tuple(vid(p, "roof") for p in tri))
            labels.append("roof")
            faces.append(tuple(vid(p, "ground") for p in tri[::-1]))
            labels.append("ground")
        for loop in (outer, *holes):
            for k in range(len(loop)):
                a, b = loop[k], loop[(k + 1) % len(loop)]
                at, bt, ab, bb = vid(a, "roof"), vid(b, "roof"), vid(a, "ground"), vid(b, "ground")
                for tri, top in (((ab, bb, bt), bt), ((ab, bt, at), at)):
                    if verts[top][2] > ground_z:
                        faces.append(tri)
                        labels.append("wall")
    return BuildingMesh(
        name,
        np.array(verts, dtype=float).reshape(-1, 3),
        np.array(faces, dtype=int).reshape(-1, 3),
        labels,
        {"touches_border": touches, "clamped": len(clamped)},
    )


def mesh_for_instance(
    mask: InstanceMask,
    height: float,
    angle: float,
    azimuth: float,
    name: str,
    convention: str = "facing",
    ground_z: float = 0.0,
) -> BuildingMesh:
    plane = plane_from_attributes(mask.centroid(), height, angle, azimuth, convention)
    return extrude_segment(mask, plane, mask.grid, ground_z, name)


def write_obj(meshes: Iterable[BuildingMesh], path: str | Path) -> None:
    """Wavefront OBJ, one object per mesh with roof/wall/ground groups."""
    lines = ["# roofkit LoD2 export", "# units: meters, x east, y north, z up"]
    offset = 1
    for mesh in meshes:
        lines.append(f"o {mesh.name}")
        lines.extend(f"v {x:.9f} {y:.9f} {z:.9f}" for x, y, z in mesh.vertices)
        for label in ("roof", "wall", "ground"):
            idx = mesh.faces_labelled(label)
            if idx.size == 0:
                continue
            lines.append(f"g {mesh.name}_{label}")
            lines.extend("f " + " ".join(str(int(i) + offset) for i in mesh.faces[k]) for k in idx)
        offset += len(mesh.vertices)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
