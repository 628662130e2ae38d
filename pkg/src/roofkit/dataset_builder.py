"""Ground-truth tiles, geographic splits and dataset statistics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geo_core import (
    GeometryError,
    InstanceMask,
    RlePayload,
    TileGrid,
    WorldPolygon,
    clipped_area,
    rasterize,
    rle_decode,
    rle_encode,
)
from .reports import BIN_EDGES, bin_counts

logger = logging.getLogger(__name__)

NODATA = -1.0
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RoofSegmentRecord:
    segment_id: str
    building_id: str
    polygon: WorldPolygon
    height: float
    angle: float
    azimuth: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.height) and self.height > 0):
            raise ValueError(f"segment {self.segment_id}: height must be positive, got {self.height}")
        if not 0.0 <= self.angle <= 90.0:
            raise ValueError(f"segment {self.segment_id}: angle {self.angle} outside [0, 90]")
        if not 0.0 <= self.azimuth < 360.0:
            raise ValueError(f"segment {self.segment_id}: azimuth {self.azimuth} outside [0, 360)")

    def to_json(self) -> dict[str, Any]:
        return {
            "segment_id": self.segment_id,
            "building_id": self.building_id,
            "height_m": self.height,
            "angle_deg": self.angle,
            "azimuth_deg": self.azimuth,
            "polygon": self.polygon.to_geojson(),
        }


@dataclass
class TileAnnotation:
    tile_id: str
    grid: TileGrid
    center: tuple[float, float]
    segments: list[tuple[RoofSegmentRecord, InstanceMask]]
    dropped: list[dict[str, Any]] = field(default_factory=list)

    def attribute_maps(self) -> dict[str, np.ndarray]:
        """Per-pixel height/angle/azimuth rasters; later segments overwrite earlier ones."""
        maps = {k: np.full(self.grid.shape, NODATA) for k in ("height", "angle", "azimuth")}
        for rec, mask in self.segments:
            maps["height"][mask.bits] = rec.height
            maps["angle"][mask.bits] = rec.angle
            maps["azimuth"][mask.bits] = rec.azimuth
        return maps

    def to_json(self) -> dict[str, Any]:
        segs = []
        for rec, mask in self.segments:
            d = rec.to_json()
            d["mask"] = rle_encode(mask).to_json()
            segs.append(d)
        return {
            "version": MANIFEST_VERSION,
            "tile_id": self.tile_id,
            "center": list(self.center),
            "grid": self.grid.to_json(),
            "segments": segs,
            "dropped": self.dropped,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "TileAnnotation":
        if d.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')!r}")
        grid =TileGrid.from_json(d["grid"])
        segs = []
        for s in d["segments"]:
            rec = RoofSegmentRecord(
                str(s["segment_id"]),
                str(s["building_id"]),
                WorldPolygon.from_geojson(s["polygon"]),
                float(s["height_m"]),
                float(s["angle_deg"]),
                float(s["azimuth_deg"]),
            )
            segs.append((rec, rle_decode(RlePayload.from_json(s["mask"]), grid)))
        return cls(str(d["tile_id"]), grid, tuple(d["center"]), segs, list(d.get("dropped", [])))


def record_from_feature(feature: Mapping[str, Any], index: int) -> RoofSegmentRecord:
    props = feature.get("properties") or {}
    seg_id = props.get("segment_id", feature.get("id", index))
    try:
        return RoofSegmentRecord(
            segment_id=str(seg_id),
            building_id=str(props["building_id"]),
            polygon=WorldPolygon.from_geojson(feature.get("geometry") or {}),
            height=float(props["height_m"]),
            angle=float(props["angle_deg"]),
            azimuth=float(props["azimuth_deg"]),
        )
    except KeyError as exc:
        raise ValueError(f"feature {seg_id}: missing property {exc}") from None


def load_features(path: str | Path) -> tuple[list[RoofSegmentRecord], list[dict[str, Any]]]:
    """Read a GeoJSON FeatureCollection of roof segments.

    Returns the valid records and one warning record per skipped feature.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a FeatureCollection")
    records, skipped = [], []
    for i, feat in enumerate(doc.get("features", [])):
        try:
            records.append(record_from_feature(feat, i))
        except (GeometryError, ValueError, TypeError) as exc:
            skipped.append({"index": i, "reason": str(exc)})
            logger.warning("skipping feature %d: %s", i, exc)
    return records, skipped


def building_centroids(records: Iterable[RoofSegmentRecord]) -> dict[str, tuple[float, float]]:
    """Area-weighted centroid of all segments of each building."""
    acc: dict[str, list[float]] = {}
    for rec in records:
        a = rec.polygon.area
        cx, cy = rec.polygon.centroid()
        s = acc.setdefault(rec.building_id, [0.0, 0.0, 0.0])
        s[0] += a * cx
        s[1] += a * cy
        s[2] += a
    return {b: (s[0] / s[2], s[1] / s[2]) for b, s in sorted(acc.items())}


def build_tile(
    center: tuple[float, float],
    segments: Sequence[RoofSegmentRecord],
    extent: float = 100.0,
    px: int = 1024,
    tile_id: str = "tile",
) -> TileAnnotation:
    grid = TileGrid.centered(center, extent, px)
    bounds = grid.bounds
    kept: list[tuple[RoofSegmentRecord, InstanceMask]] = []
    dropped: list[dict[str, Any]] = []
    for rec in segments:
        minx, miny, maxx, maxy = rec.polygon.bounds
        if maxx <= bounds[0] or minx >= bounds[2] or maxy <= bounds[1] or miny >= bounds[3]:
            continue
        if clipped_area(rec.polygon, bounds) <= 0.0:
            continue
        # pixel centers never sit on the tile edge, so the unclipped polygon rasterizes identically
        mask = rasterize(rec.polygon, grid)
        if mask.area_px == 0:
            dropped.append({"segment_id": rec.segment_id, "reason": "below one pixel after clipping"})
            continue
        kept.append((rec, mask))
    return TileAnnotation(tile_id, grid, (float(center[0]), float(center[1])), kept, dropped)


def candidate_segments(
    records: Sequence[RoofSegmentRecord], center: tuple[float, float], extent: float
) -> list[RoofSegmentRecord]:
    half = extent / 2
    return [
        r
        for r in records
        if not (
            r.polygon.bounds[2] <= center[0] - half
            or r.polygon.bounds[0] >= center[0] + half
            or r.polygon.bounds[3] <= center[1] - half
            or r.polygon.bounds[1] >= center[1] + half
        )
    ]


def write_manifest(tile: TileAnnotation, out_dir: str | Path) -> Path:
    out = Path(out_dir) / f"{tile.tile_id}.json"
    out.write_text(json.dumps(tile.to_json(), sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    return out


def read_manifest(path: str | Path) -> TileAnnotation:
    with open(path, encoding="utf-8") as fh:
        return TileAnnotation.from_json(json.load(fh))


def load_tiles(gt_dir: str | Path) -> list[TileAnnotation]:
    """All tile manifests under ``gt_dir`` (or ``gt_dir/tiles``), sorted by tile id."""
    tiles = [read_manifest(p) for p in manifest_paths(gt_dir)]
    return sorted(tiles, key=lambda t: t.tile_id)


def manifest_paths(gt_dir: str | Path) -> list[Path]:
    root = Path(gt_dir)
    if (root / "tiles").is_dir():
        return sorted((root / "tiles").glob("*.json"))
    return sorted(p for p in root.glob("*.json") if p.name not in ("splits.json", "index.json"))


class UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> None:
        a, b = self.find(i), self.find(j)
        if a == b:
            return
        if self.rank[a] < self.rank[b]:
            a, b = b, a
        self.parent[b] = a
        if self.rank[a] == self.rank[b]:
            self.rank[a] += 1


@dataclass
class SplitAssignment:
    splits: dict[str, str]
    clusters: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for s in self.splits.values():
            out[s] += 1
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "splits": dict(sorted(self.splits.items())),
            "clusters": dict(sorted(self.clusters.items())),
            "counts": self.counts(),
            "warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "SplitAssignment":
        return cls(dict(d["splits"]), {k: int(v) for k, v in d.get("clusters", {}).items()}, list(d.get("warnings", [])))


def cluster_centroids(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage cluster labels: points within ``radius`` (inclusive) are joined transitively.

    Labels are numbered by the smallest point index in each cluster.
    """
    n = len(points)
    uf = UnionFind(n)
    if n > 1:
        pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
        for i, j in pairs:
            uf.union(int(i), int(j))
    roots = [uf.find(i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def geographic_split(
    centroids: Mapping[str, tuple[float, float]],
    radius: float = 1000.0,
    ratios: Sequence[float] = (0.6, 0.15, 0.15),
    seed: int = 0,
) -> SplitAssignment:
    """Assign whole spatial clusters to train/val/test.

    Clusters are taken largest first (ties in a seeded random order) and
    each goes to the split that is least filled relative to its target.
    Ratios that do not sum to one are rescaled.
    """
    if not centroids:
        raise ValueError("no tiles to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    warnings: list[str] = []
    total = float(sum(ratios))
    if abs(total - 1.0) > 1e-9:
        warnings.append(f"ratios {tuple(ratios)} sum to {total:g}; rescaled to sum to 1")
        logger.warning(warnings[-1])
    frac = np.array(ratios, dtype=float) / total

    ids = sorted(centroids)
    pts = np.array([centroids[t] for t in ids], dtype=float)
    labels = cluster_centroids(pts, radius)
    n_clusters = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=n_clusters)
    if n_clusters == 1 and len(ids) > 1:
        warnings.append("all tiles form one cluster; everything is assigned to train")
        logger.warning(warnings[-1])

    rng = np.random.default_rng(seed)
    order = rng.permutation(n_clusters)
    order = order[np.argsort(-sizes[order], kind="stable")]
    target = frac * len(ids)
    filled = np.zeros(3)
    cluster_split = np.empty(n_clusters, dtype=int)
    for c in order:
        fill = np.where(target > 0, filled / np.where(target > 0, target, 1.0), np.inf)
        s = int(np.argmin(fill))
        cluster_split[c] = s
        filled[s] += sizes[c]
    return SplitAssignment(
        {t: SPLITS[cluster_split[labels[i]]] for i, t in enumerate(ids)},
        {t: int(labels[i]) for i, t in enumerate(ids)},
        warnings,
    )


@dataclass
class DatasetStats:
    split: str | None
    image_count: int
    instance_count: int
    per_image_mean: float
    log_height_mean: float
    log_height_std: float
    histograms: dict[str, list[int]]

    def to_json(self) -> dict[str, Any]:
        return {
            "split": self.split,
            "image_count": self.image_count,
            "instance_count": self.instance_count,
            "per_image_mean": self.per_image_mean,
            "log_height_mean": self.log_height_mean,
            "log_height_std": self.log_height_std,
            "bin_edges": {k: BIN_EDGES[k].tolist() for k in self.histograms},
            "histograms": self.histograms,
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "DatasetStats":
        return cls(
            d["split"], d["image_count"], d["instance_count"], d["per_image_mean"],
            d["log_height_mean"], d["log_height_std"], {k: list(v) for k, v in d["histograms"].items()},
        )


def stats_from_values(
    heights: Sequence[float], angles: Sequence[float], azimuths: Sequence[float], image_count: int, split: str | None = None
) -> DatasetStats:
    h = np.asarray(heights, dtype=float)
    if h.size == 0:
        raise ValueError("cannot compute statistics of an empty split")
    logs = np.log(h)
    return DatasetStats(
        split=split,
        image_count=image_count,
        instance_count=int(h.size),
        per_image_mean=h.size / image_count if image_count else float("nan"),
        log_height_mean=float(logs.mean()),
        log_height_std=float(logs.std()),
        histograms={
            "height": bin_counts(h, BIN_EDGES["height"]).tolist(),
            "angle": bin_counts(angles, BIN_EDGES["angle"]).tolist(),
            "azimuth": bin_counts(azimuths, BIN_EDGES["azimuth"]).tolist(),
        },
    )


def compute_stats(
    tiles: Sequence[TileAnnotation], splits: SplitAssignment | None = None, split: str = "train"
) -> DatasetStats:
    """Instance statistics of one split (all tiles when ``splits`` is None).

    The log-height mean/std are the normalization constants for the
    log-normalized height scheme, so they come from training tiles only.
    """
    if splits is not None:
        tiles = [t for t in tiles if splits.splits.get(t.tile_id) == split]
    if not tiles:
        raise ValueError(f"split {split!r} has no tiles")
    recs = [rec for t in tiles for rec, _ in t.segments]
    return stats_from_values(
        [r.height for r in recs], [r.angle for r in recs], [r.azimuth for r in recs],
        len(tiles), split if splits is not None else None,
    )
