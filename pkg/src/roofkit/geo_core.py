"""Planar geometry and raster primitives shared by the rest of the package.

Coordinates are planar meters (x east, y north). Rasters follow image
convention: row 0 is the northern edge of the tile, column 0 the western
edge. A pixel belongs to a polygon when its center lies inside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

Point = tuple[float, float]
Ring = tuple[Point, ...]


class GeometryError(ValueError):
    """Raised for degenerate or malformed polygons."""


class RleError(ValueError):
    """Raised when a run-length payload is corrupt."""


class GridMismatchError(ValueError):
    pass


def ring_signed_area(ring: Sequence[Point]) -> float:
    """Shoelace area; positive for counter-clockwise rings."""
    if len(ring) < 3:
        return 0.0
    pts = np.asarray(ring, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clean_ring(ring: Iterable[Sequence[float]]) -> Ring:
    pts: list[Point] = []
    for p in ring:
        q = (float(p[0]), float(p[1]))
        if not (math.isfinite(q[0]) and math.isfinite(q[1])):
            raise GeometryError(f"non-finite vertex {q}")
        if pts and pts[-1] == q:
            continue
        pts.append(q)
    if len(pts) > 1 and pts[0] == pts[-1]:
        pts.pop()
    return tuple(pts)


def _segments_cross(ring: Ring) -> bool:
    """True if any two non-adjacent edges of the ring intersect."""
    n = len(ring)
    if n < 4:
        return False
    a = np.asarray(ring, dtype=float)
    b = np.roll(a, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    if i.size == 0:
        return False
    p1, p2, q1, q2 = a[i], b[i], a[j], b[j]

    def orient(u, v, w):
        return np.sign((v[:, 0] - u[:, 0]) * (w[:, 1] - u[:, 1]) - (v[:, 1] - u[:, 1]) * (w[:, 0] - u[:, 0]))

    def on_seg(u, v, w):
        return (
            (np.minimum(u[:, 0], v[:, 0]) <= w[:, 0]) & (w[:, 0] <= np.maximum(u[:, 0], v[:, 0]))
            & (np.minimum(u[:, 1], v[:, 1]) <= w[:, 1]) & (w[:, 1] <= np.maximum(u[:, 1], v[:, 1]))
        )

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    touch = (
        ((d1 == 0) & on_seg(q1, q2, p1)) | ((d2 == 0) & on_seg(q1, q2, p2))
        | ((d3 == 0) & on_seg(p1, p2, q1)) | ((d4 == 0) & on_seg(p1, p2, q2))
    )
    return bool(np.any(proper | touch))


@dataclass(frozen=True)
class WorldPolygon:
    """Simple polygon with optional holes in planar meters.

    Rings are stored open (no repeated closing vertex); the exterior is
    re-oriented counter-clockwise and holes clockwise on construction.
    """

    exterior: Ring
    holes: tuple[Ring, ...] = ()

    def __post_init__(self) -> None:
        ext = _clean_ring(self.exterior)
        if len(set(ext)) < 3:
            raise GeometryError("exterior ring needs at least 3 distinct vertices")
        area = ring_signed_area(ext)
        if area == 0.0:
            raise GeometryError("exterior ring has zero area")
        if area < 0:
            ext = ext[::-1]
        if _segments_cross(ext):
            raise GeometryError("exterior ring self-intersects")
        holes = []
        for hole in self.holes:
            h = _clean_ring(hole)
            if len(set(h)) < 3 or ring_signed_area(h) == 0.0:
                raise GeometryError("degenerate hole ring")
            if ring_signed_area(h) > 0:
                h = h[::-1]
            if _segments_cross(h):
                raise GeometryError("hole ring self-intersects")
            holes.append(h)
        object.__setattr__(self, "exterior", ext)
        object.__setattr__(self, "holes", tuple(holes))
        if self.area <= 0:
            raise GeometryError("holes cover the whole exterior")

    @property
    def area(self) -> float:
        return ring_signed_area(self.exterior) + sum(ring_signed_area(h) for h in self.holes)

    @property
    def perimeter(self) -> float:
        total = 0.0
        for ring in (self.exterior, *self.holes):
            pts = np.asarray(ring, dtype=float)
            total += float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())
        return total

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        pts = np.asarray(self.exterior, dtype=float)
        return (float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()))

    def centroid(self) -> Point:
        """Area-weighted centroid (holes subtract)."""
        cx = cy = a_tot = 0.0
        for ring in (self.exterior, *self.holes):
            pts = np.asarray(ring, dtype=float)
            x, y = pts[:, 0], pts[:, 1]
            xn, yn = np.roll(x, -1), np.roll(y, -1)
            cross = x * yn - xn * y
            a_tot += cross.sum() / 2
            cx += float(((x + xn) * cross).sum()) / 6
            cy += float(((y + yn) * cross).sum()) / 6
        return (cx / a_tot, cy / a_tot)

    def translated(self, dx: float, dy: float) -> "WorldPolygon":
        move = lambda ring: tuple((x + dx, y + dy) for x, y in ring)  # noqa: E731
        return WorldPolygon(move(self.exterior), tuple(move(h) for h in self.holes))

    def to_geojson(self) -> dict[str, Any]:
        close = lambda ring: [list(p) for p in ring] + [list(ring[0])]  # noqa: E731
        return {"type": "Polygon", "coordinates": [close(self.exterior)] + [close(h) for h in self.holes]}

    @classmethod
    def from_geojson(cls, geom: dict[str, Any]) -> "WorldPolygon":
        if geom.get("type") != "Polygon":
            raise GeometryError(f"only Polygon geometries are supported, got {geom.get('type')!r}")
        rings = geom.get("coordinates") or []
        if not rings:
            raise GeometryError("polygon without rings")
        return cls(tuple(map(tuple, rings[0])), tuple(tuple(map(tuple, r)) for r in rings[1:]))


@dataclass(frozen=True)
class TileGrid:
    """Square pixel grid; ``origin`` is the south-west corner in meters."""

    origin: Point
    extent: float
    width: int
    height: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "extent", float(self.extent))
        if not self.extent > 0:
            raise GeometryError("grid extent must be positive")
        if self.width != self.height or self.width <= 0:
            raise GeometryError("grid must be square with a positive pixel count")

    @classmethod
    def centered(cls, center: Point, extent: float = 100.0, px: int = 1024) -> "TileGrid":
        return cls((center[0] - extent / 2, center[1] - extent / 2), extent, px, px)

    @property
    def mpp(self) -> float:
        """Meters per pixel."""
        return self.extent / self.width

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0, x0 + self.extent, y0 + self.extent)

    def pixel_centers(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.origin
        return x0 + (cols + 0.5) * self.mpp, y0 + self.extent - (rows + 0.5) * self.mpp

    def corner_to_world(self, rows, cols):
        """World coordinates of pixel corners (row/col may be fractional)."""
        x0, y0 = self.origin
        return x0 + np.asarray(cols) * self.mpp, y0 + self.extent - np.asarray(rows) * self.mpp

    def to_json(self) -> dict[str, Any]:
        return {"origin": list(self.origin), "extent": self.extent, "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TileGrid":
        return cls(tuple(d["origin"]), d["extent"], int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Boolean raster on a :class:`TileGrid`, indexed ``bits[row, col]``."""

    grid: TileGrid
    bits: np.ndarray
    area_px: int = field(init=False)

    def __post_init__(self) -> None:
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.shape != self.grid.shape:
            raise GridMismatchError(f"mask shape {bits.shape} does not match grid {self.grid.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "area_px", int(bits.sum()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.grid, self.bits.tobytes()))

    @classmethod
    def empty(cls, grid: TileGrid) -> "InstanceMask":
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Tight pixel box ``(row0, col0, row1, col1)``, end-exclusive."""
        if self.area_px == 0:
            return None
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1

    def centroid(self) -> Point:
        """Mean of the set pixels' centers in world meters."""
        if self.area_px == 0:
            raise GeometryError("centroid of an empty mask")
        r, c = np.nonzero(self.bits)
        x, y = self.grid.pixel_centers(r.astype(float), c.astype(float))
        return float(x.mean()), float(y.mean())

    def area_m2(self) -> float:
        return self.area_px * self.grid.mpp**2


def _ring_covers(ring: Ring, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Closed point-in-ring test: interior by even-odd crossing, plus the boundary."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(ring)
    for k in range(n):
        x1, y1 = ring[k]
        x2, y2 = ring[(k + 1) % n]
        straddle = (y1 > py) != (y2 > py)
        if y1 != y2:
            xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddle & (px < xcross)
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        on_edge |= (
            (cross == 0)
            & (px >= min(x1, x2)) & (px <= max(x1, x2))
            & (py >= min(y1, y2)) & (py <= max(y1, y2))
        )
    return inside | on_edge


def rasterize(polygon: WorldPolygon, grid: TileGrid) -> InstanceMask:
    """Center-point rasterization.

    A pixel center on the exterior boundary counts as inside; one on a
    hole boundary counts as outside.
    """
    bits = np.zeros(grid.shape, dtype=bool)
    minx, miny, maxx, maxy = polygon.bounds
    x0, y0 = grid.origin
    m = grid.mpp
    c_lo = max(0, math.floor((minx - x0) / m - 0.5) - 1)
    c_hi = min(grid.width - 1, math.ceil((maxx - x0) / m - 0.5) + 1)
    r_lo = max(0, math.floor((y0 + grid.extent - maxy) / m - 0.5) - 1)
    r_hi = min(grid.height - 1, math.ceil((y0 + grid.extent - miny) / m - 0.5) + 1)
    if c_lo > c_hi or r_lo > r_hi:
        return InstanceMask(grid, bits)
    rows, cols = np.mgrid[r_lo : r_hi + 1, c_lo : c_hi + 1]
    px, py = grid.pixel_centers(rows.astype(float), cols.astype(float))
    sub = _ring_covers(polygon.exterior, px, py)
    for hole in polygon.holes:
        sub &= ~_ring_covers(hole, px, py)
    bits[r_lo : r_hi + 1, c_lo : c_hi + 1] = sub
    return InstanceMask(grid, bits)


def _check_same_shape(a: InstanceMask, b: InstanceMask) -> None:
    if a.bits.shape != b.bits.shape:
        raise GridMismatchError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    _check_same_shape(a, b)
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = a.area_px + b.area_px - inter
    return inter / union if union else 0.0


def iou_matrix(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask]) -> np.ndarray:
    """Pairwise mask IoU, rows = predictions, columns = ground truth.

    Only pairs with overlapping bounding boxes are intersected.
    """
    out = np.zeros((len(preds), len(gts)), dtype=float)
    gt_boxes = [g.bbox() for g in gts]
    for i, p in enumerate(preds):
        pb = p.bbox()
        if pb is None:
            continue
        for j, g in enumerate(gts):
            _check_same_shape(p, g)
            gb = gt_boxes[j]
            if gb is None:
                continue
            r0, c0 = max(pb[0], gb[0]), max(pb[1], gb[1])
            r1, c1 = min(pb[2], gb[2]), min(pb[3], gb[3])
            if r0 >= r1 or c0 >= c1:
                continue
            inter = int(np.logical_and(p.bits[r0:r1, c0:c1], g.bits[r0:r1, c0:c1]).sum())
            if inter:
                out[i, j] = inter / (p.area_px + g.area_px - inter)
    return out


@dataclass(frozen=True)
class RlePayload:
    """Column-major run lengths, starting with a (possibly empty) zero-run."""

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise RleError("negative run length")
        if sum(counts) != self.width * self.height:
            raise RleError(f"run lengths sum to {sum(counts)}, expected {self.width * self.height}")
        object.__setattr__(self, "counts", counts)

    def to_json(self) -> dict[str, Any]:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "RlePayload":
        try:
            h, w = d["size"]
            counts = d["counts"]
        except (KeyError, TypeError, ValueError) as exc:
            raise RleError(f"malformed RLE object: {exc}") from None
        if isinstance(counts, str):
            raise RleError("compressed string RLE is not supported; use integer counts")
        return cls(int(w), int(h), tuple(counts))


def rle_encode(mask: InstanceMask) -> RlePayload:
    flat = mask.bits.ravel(order="F")
    if flat.size == 0:
        return RlePayload(mask.grid.width, mask.grid.height, ())
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return RlePayload(mask.grid.width, mask.grid.height, tuple(runs))


def rle_decode(payload: RlePayload, grid: TileGrid | None = None) -> InstanceMask:
    """Inverse of :func:`rle_encode`.

    Without a grid the mask is placed on a unit (1 m/px) grid at the origin.
    """
    if grid is None:
        grid = TileGrid((0.0, 0.0), float(payload.width), payload.width, payload.height)
    if grid.shape != (payload.height, payload.width):
        raise GridMismatchError(f"payload {payload.height}x{payload.width} does not fit grid {grid.shape}")
    values = np.arange(len(payload.counts)) % 2 == 1
    flat = np.repeat(values, payload.counts)
    return InstanceMask(grid, flat.reshape((payload.height, payload.width), order="F"))


def clip_ring(ring: Ring, bounds: tuple[float, float, float, float]) -> Ring:
    """Sutherland-Hodgman clip of a ring against an axis-aligned rectangle."""
    xmin, ymin, xmax, ymax = bounds
    planes = (
        (lambda p: p[0] >= xmin, lambda a, b: _x_cut(a, b, xmin)),
        (lambda p: p[0] <= xmax, lambda a, b: _x_cut(a, b, xmax)),
        (lambda p: p[1] >= ymin, lambda a, b: _y_cut(a, b, ymin)),
        (lambda p: p[1] <= ymax, lambda a, b: _y_cut(a, b, ymax)),
    )
    pts = list(ring)
    for inside, cut in planes:
        if not pts:
            break
        out = []
        prev = pts[-1]
        for cur in pts:
            if inside(cur):
                if not inside(prev):
                    out.append(cut(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cut(prev, cur))
            prev = cur
        pts = out
    return _clean_ring(pts) if pts else ()


def _x_cut(a: Point, b: Point, x: float) -> Point:
    t = (x - a[0]) / (b[0] - a[0])
    return (x, a[1] + t * (b[1] - a[1]))


def _y_cut(a: Point, b: Point, y: float) -> Point:
    t = (y - a[1]) / (b[1] - a[1])
    return (a[0] + t * (b[0] - a[0]), y)


def clipped_area(polygon: WorldPolygon, bounds: tuple[float, float, float, float]) -> float:
    """Area of the part of ``polygon`` inside the rectangle ``bounds``.

    Clipping a concave ring can leave zero-width bridges along the
    rectangle edge; they contribute no area, so the shoelace sum stays exact.
    """
    total = ring_signed_area(clip_ring(polygon.exterior, bounds))
    for h in polygon.holes:
        total += ring_signed_area(clip_ring(h, bounds))
    return max(total, 0.0)
