"""Instance matching and evaluation metrics.

Two matchers are used on purpose. Attribute errors and per-cluster match
rates come from a one-to-one Hungarian assignment that maximizes total
mask IoU. Average precision follows the COCO protocol: detections are
visited in descending score order and greedily take the best free ground
truth above the IoU threshold.
"""
from __future__ import annotations

import csv
import io
import json
import math
import operator
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .geo_core import InstanceMask, RlePayload, TileGrid, iou_matrix, rle_decode, rle_encode

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.array([i / 100 for i in range(101)])
HEIGHT_BANDS = ("low", "medium", "high", "very_high")
ANGLE_BANDS = ("flat", "steep")

ERROR_EDGES: dict[str, np.ndarray] = {
    "angle": np.arange(-30.0, 31.0, 1.0),
    "azimuth": np.arange(-180.0, 181.0, 5.0),
    "height": np.arange(-10.0, 10.5, 0.5),
}


def comparator(strict: bool = False) -> Callable[[float, float], bool]:
    """IoU acceptance test: ``iou >= t`` by default, ``iou > t`` when strict."""
    return operator.gt if strict else operator.ge


@dataclass(frozen=True, eq=False)
class Detection:
    mask: InstanceMask
    score: float
    height: float
    angle: float
    azimuth: float
    image_id: str = ""
    det_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.mask.area_px == 0:
            raise ValueError("detection mask is empty")

    def bbox(self) -> tuple[int, int, int, int]:
        return self.mask.bbox()  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class GtInstance:
    mask: InstanceMask
    height: float
    angle: float
    azimuth: float
    segment_id: str = ""


@dataclass
class MatchReport:
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    errors: dict[str, list[float]] = field(default_factory=dict)

    @property
    def total_iou(self) -> float:
        return math.fsum(p[2] for p in self.pairs)


def _min_cost_rows_le_cols(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for ``n <= m``; returns column per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: 1-based row assigned to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # first minimum -> lowest column index on ties
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def max_iou_assignment(iou: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one (pred, gt) pairs maximizing the summed IoU, sorted by pred index."""
    iou = np.asarray(iou, dtype=float)
    if iou.ndim != 2:
        raise ValueError("IoU matrix must be 2-D")
    if iou.size == 0:
        return []
    if not np.all(np.isfinite(iou)) or iou.min() < 0 or iou.max() > 1:
        raise ValueError("IoU entries must be finite and within [0, 1]")
    if iou.shape[0] <= iou.shape[1]:
        cols = _min_cost_rows_le_cols(-iou)
        return [(i, int(c)) for i, c in enumerate(cols)]
    rows = _min_cost_rows_le_cols(-iou.T)
    return sorted((int(r), j) for j, r in enumerate(rows))


def hungarian_match(iou: np.ndarray, threshold: float = 0.5, strict: bool = False) -> MatchReport:
    """Optimal assignment, then pairs failing the IoU threshold are dropped."""
    iou = np.asarray(iou, dtype=float)
    if iou.ndim != 2:
        iou = iou.reshape(0, 0)
    accept = comparator(strict)
    pairs = [(i, j, float(iou[i, j])) for i, j in max_iou_assignment(iou) if accept(iou[i, j], threshold)]
    used_p = {p[0] for p in pairs}
    used_g = {p[1] for p in pairs}
    return MatchReport(
        pairs,
        [j for j in range(iou.shape[1]) if j not in used_g],
        [i for i in range(iou.shape[0]) if i not in used_p],
    )


def cyclic_distance(a: float, b: float) -> float:
    """Shortest angular distance in degrees, in [0, 180]."""
    # abs first: a - b == -(b - a) exactly, so the result is symmetric
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def signed_azimuth_error(pred: float, gt: float) -> float:
    """Wrapped ``pred - gt`` in (-180, 180]."""
    d = (pred - gt) % 360.0
    return d - 360.0 if d > 180.0 else d


def _mean(xs: Sequence[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def attribute_mae(
    report: MatchReport,
    preds: Sequence[Any],
    gts: Sequence[Any],
    azimuth_min_angle: float = 15.0,
) -> dict[str, float | None]:
    """Height/angle/azimuth MAE over matched pairs.

    Azimuth only counts pairs whose ground-truth angle exceeds
    ``azimuth_min_angle``; ``None`` marks a metric with no eligible pairs.
    """
    h = [abs(preds[i].height - gts[j].height) for i, j, _ in report.pairs]
    a = [abs(preds[i].angle - gts[j].angle) for i, j, _ in report.pairs]
    z = [
        cyclic_distance(preds[i].azimuth, gts[j].azimuth)
        for i, j, _ in report.pairs
        if gts[j].angle > azimuth_min_angle
    ]
    return {"height": _mean(h), "angle": _mean(a), "azimuth": _mean(z)}


@dataclass
class APResult:
    ap50: float
    ap75: float
    map: float
    per_threshold: dict[float, float]
    undefined: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "ap50": _num(self.ap50),
            "ap75": _num(self.ap75),
            "map": _num(self.map),
            "per_threshold": {f"{t:.2f}": _num(v) for t, v in sorted(self.per_threshold.items())},
            "undefined": self.undefined,
        }


def _num(x: float | None) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def greedy_tp(iou: np.ndarray, scores: Sequence[float], threshold: float, strict: bool = False) -> np.ndarray:
    """COCO-style matching of one image; returns a TP flag per detection (input order)."""
    accept = comparator(strict)
    n_det, n_gt = iou.shape
    tp = np.zeros(n_det, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    for d in sorted(range(n_det), key=lambda k: (-scores[k], k)):
        best, best_iou = -1, -1.0
        for g in range(n_gt):
            if taken[g] or not accept(iou[d, g], threshold):
                continue
            if iou[d, g] > best_iou:
                best, best_iou = g, iou[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


def interpolated_ap_exact(tp_sorted: Sequence[bool], n_gt: int) -> Fraction | None:
    """101-point interpolated AP of a score-sorted TP/FP sequence, as an exact rational.

    Recall is compared in integers and precision kept as fractions, so the
    only rounding is the final conversion to float. ``None`` when ``n_gt`` is 0.
    """
    tp = np.asarray(tp_sorted, dtype=bool)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return Fraction(0)
    tps = np.cumsum(tp, dtype=np.int64)
    ranks = np.arange(1, tp.size + 1)
    # distinct precisions k/n with n below 2**26 never collide as doubles,
    # so float argmax finds the exact envelope position
    prec = tps / ranks
    # recall point i/100 is reached at the first rank with 100*tp >= i*n_gt
    idx = np.searchsorted(100 * tps, np.arange(len(RECALL_POINTS)) * n_gt, side="left")
    total = Fraction(0)
    cache: dict[int, Fraction] = {}
    for k in idx.tolist():
        if k >= tp.size:
            continue
        if k not in cache:
            j = k + int(np.argmax(prec[k:]))
            cache[k] = Fraction(int(tps[j]), j + 1)
        total += cache[k]
    return total / len(RECALL_POINTS)


def interpolated_ap(tp_sorted: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP; NaN without ground truth, 0 without detections."""
    exact = interpolated_ap_exact(tp_sorted, n_gt)
    return float("nan") if exact is None else float(exact)


def average_precision(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[InstanceMask]],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    strict: bool = False,
    ious: Mapping[str, np.ndarray] | None = None,
) -> APResult:
    """Mask AP pooled over images.

    Detections of all images are ranked together by score, then image id,
    then detection index. Returns NaN values with ``undefined=True`` when
    there is no ground truth at all.
    """
    image_ids = sorted(set(dets) | set(gts))
    n_gt = sum(len(gts.get(i, ())) for i in image_ids)
    per_image_iou = {}
    for img in image_ids:
        d = dets.get(img, ())
        g = gts.get(img, ())
        if ious is not None and img in ious:
            per_image_iou[img] = ious[img]
        else:
            per_image_iou[img] = iou_matrix([x.mask for x in d], list(g))
    per_t: dict[float, float] = {}
    exact: list[Fraction] = []
    for t in iou_thresholds:
        pooled = []
        for img in image_ids:
            d = dets.get(img, ())
            scores = [x.score for x in d]
            tp = greedy_tp(per_image_iou[img], scores, t, strict)
            pooled.extend((-scores[k], img, k, bool(tp[k])) for k in range(len(d)))
        pooled.sort(key=lambda r: r[:3])
        ap = interpolated_ap_exact([r[3] for r in pooled], n_gt)
        per_t[float(t)] = float("nan") if ap is None else float(ap)
        if ap is not None:
            exact.append(ap)
    undefined = n_gt == 0
    return APResult(
        ap50=per_t.get(0.5, float("nan")),
        ap75=per_t.get(0.75, float("nan")),
        map=float("nan") if undefined or not exact else float(sum(exact) / len(exact)),
        per_threshold=per_t,
        undefined=undefined,
    )


@dataclass(frozen=True, order=True)
class ClusterKey:
    height_band: str
    angle_band: str


def cluster_key(
    height: float,
    angle: float,
    height_thresholds: Sequence[float] = (4.5, 7.0, 12.0),
    angle_threshold: float = 15.0,
) -> ClusterKey:
    band = HEIGHT_BANDS[sum(height > t for t in height_thresholds)]
    return ClusterKey(band, "steep" if angle > angle_threshold else "flat")


def all_cluster_keys() -> list[ClusterKey]:
    """Table order: flat rows low..very high, then steep rows."""
    return [ClusterKey(h, a) for a in ANGLE_BANDS for h in HEIGHT_BANDS]


@dataclass
class ClusterRow:
    key: ClusterKey
    n_gt: int
    n_matched: int
    angle_mae: float | None
    azimuth_mae: float | None
    height_mae: float | None

    @property
    def match_rate(self) -> float | None:
        return 100.0 * self.n_matched / self.n_gt if self.n_gt else None


@dataclass
class ClusterReport:
    rows: list[ClusterRow]
    # signed errors per cluster and attribute, for the error histograms
    errors: dict[ClusterKey, dict[str, list[float]]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["height", "angle", "n_gt", "n_matched", "match_rate_pct", "angle_mae_deg", "azimuth_mae_deg", "height_mae_m"])
        fmt = lambda x: "" if x is None else f"{x:.6f}"  # noqa: E731
        for r in self.rows:
            w.writerow([
                r.key.height_band, r.key.angle_band, r.n_gt, r.n_matched,
                fmt(r.match_rate), fmt(r.angle_mae), fmt(r.azimuth_mae), fmt(r.height_mae),
            ])
        return buf.getvalue()

    def errors_hist_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["height", "angle", "attribute", "bin_lo", "bin_hi", "count"])
        from .reports import bin_counts

        for key in all_cluster_keys():
            errs = self.errors.get(key, {})
            for attr, edges in ERROR_EDGES.items():
                if attr == "azimuth" and key.angle_band == "flat":
                    continue
                counts = bin_counts(errs.get(attr, []), edges)
                for k, c in enumerate(counts):
                    w.writerow([key.height_band, key.angle_band, attr, f"{edges[k]:g}", f"{edges[k + 1]:g}", int(c)])
        return buf.getvalue()


def cluster_report(
    matches: Iterable[tuple[MatchReport, Sequence[Any], Sequence[Any]]],
    height_thresholds: Sequence[float] = (4.5, 7.0, 12.0),
    angle_threshold: float = 15.0,
) -> ClusterReport:
    """Per-cluster match rate and MAEs from per-image ``(report, preds, gts)`` triples.

    Clusters are keyed by ground-truth attributes. Azimuth MAE exists only
    for steep clusters.
    """
    n_gt: dict[ClusterKey, int] = {}
    n_matched: dict[ClusterKey, int] = {}
    errs: dict[ClusterKey, dict[str, list[float]]] = {}
    for report, preds, gts in matches:
        matched = {j: i for i, j, _ in report.pairs}
        for j, g in enumerate(gts):
            key = cluster_key(g.height, g.angle, height_thresholds, angle_threshold)
            n_gt[key] = n_gt.get(key, 0) + 1
            if j not in matched:
                continue
            p = preds[matched[j]]
            n_matched[key] = n_matched.get(key, 0) + 1
            e = errs.setdefault(key, {"height": [], "angle": [], "azimuth": []})
            e["height"].append(p.height - g.height)
            e["angle"].append(p.angle - g.angle)
            if key.angle_band == "steep":
                e["azimuth"].append(signed_azimuth_error(p.azimuth, g.azimuth))
    rows = []
    for key in all_cluster_keys():
        e = errs.get(key, {"height": [], "angle": [], "azimuth": []})
        rows.append(ClusterRow(
            key,
            n_gt.get(key, 0),
            n_matched.get(key, 0),
            _mean([abs(x) for x in e["angle"]]),
            _mean([abs(x) for x in e["azimuth"]]) if key.angle_band == "steep" else None,
            _mean([abs(x) for x in e["height"]]),
        ))
    return ClusterReport(rows, errs)


@dataclass
class EvalResult:
    ap: APResult
    mae: dict[str, float | None]
    clusters: ClusterReport
    counts: dict[str, int]
    per_image: dict[str, MatchReport]
    settings: dict[str, Any]

    def metrics_json(self) -> dict[str, Any]:
        return {
            "ap": self.ap.to_json(),
            "mae": {
                "height_m": self.mae["height"],
                "angle_deg": self.mae["angle"],
                "azimuth_deg": self.mae["azimuth"],
            },
            "counts": self.counts,
            "settings": self.settings,
        }


def evaluate(
    gts: Mapping[str, Sequence[GtInstance]],
    dets: Mapping[str, Sequence[Detection]],
    iou_threshold: float = 0.5,
    strict: bool = False,
    height_thresholds: Sequence[float] = (4.5, 7.0, 12.0),
    angle_threshold: float = 15.0,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    jobs: int = 1,
) -> EvalResult:
    """Full protocol over all images: AP, attribute MAE and the cluster table.

    Per-image IoU matrices are computed on up to ``jobs`` threads; results
    are merged in image-id order.
    """
    image_ids = sorted(set(gts) | set(dets))

    def image_iou(img: str) -> np.ndarray:
        return iou_matrix([x.mask for x in dets.get(img, ())], [x.mask for x in gts.get(img, ())])

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            ious = dict(zip(image_ids, pool.map(image_iou, image_ids)))
    else:
        ious = {img: image_iou(img) for img in image_ids}
    triples = []
    per_image = {}
    for img in image_ids:
        g = list(gts.get(img, ()))
        d = list(dets.get(img, ()))
        rep = hungarian_match(ious[img], iou_threshold, strict)
        per_image[img] = rep
        triples.append((rep, d, g))
    ap = average_precision(
        dets, {k: [x.mask for x in v] for k, v in gts.items()}, iou_thresholds, strict, ious=ious
    )
    pooled = MatchReport([], [], [])
    pooled_preds: list[Any] = []
    pooled_gts: list[Any] = []
    for rep, d, g in triples:
        off_p, off_g = len(pooled_preds), len(pooled_gts)
        pooled.pairs.extend((i + off_p, j + off_g, v) for i, j, v in rep.pairs)
        pooled_preds.extend(d)
        pooled_gts.extend(g)
    mae = attribute_mae(pooled, pooled_preds, pooled_gts, angle_threshold)
    clusters = cluster_report(triples, height_thresholds, angle_threshold)
    counts = {
        "images": len(image_ids),
        "gt": len(pooled_gts),
        "pred": len(pooled_preds),
        "matched": len(pooled.pairs),
        "azimuth_eligible": sum(1 for _, j, _ in pooled.pairs if pooled_gts[j].angle > angle_threshold),
    }
    settings = {
        "iou_threshold": iou_threshold,
        "comparator": ">" if strict else ">=",
        "height_thresholds": list(height_thresholds),
        "angle_threshold": angle_threshold,
    }
    return EvalResult(ap, mae, clusters, counts, per_image, settings)


def gt_instances(tile) -> list[GtInstance]:
    return [GtInstance(mask, rec.height, rec.angle, rec.azimuth, rec.segment_id) for rec, mask in tile.segments]


def detection_to_json(det: Detection) -> dict[str, Any]:
    return {
        "image_id": det.image_id,
        "score": det.score,
        "segmentation": rle_encode(det.mask).to_json(),
        "height_m": det.height,
        "angle_deg": det.angle,
        "azimuth_deg": det.azimuth,
    }


def read_detections(
    path: str | Path,
    grids: Mapping[str, TileGrid] | None = None,
    default_grid: TileGrid | None = None,
) -> dict[str, list[Detection]]:
    """Load a COCO-results-style JSON array of detections, grouped by image id.

    The mask may be stored under ``segmentation`` or ``mask``. Masks are
    placed on the grid of their image when ``grids`` provides one, else on
    ``default_grid``, else on a unit grid.
    """
    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    if not isinstance(items, list):
        raise ValueError(f"{path}: expected a JSON array of detections")
    out: dict[str, list[Detection]] = {}
    for k, item in enumerate(items):
        try:
            img = str(item["image_id"])
            rle = RlePayload.from_json(item.get("segmentation", item.get("mask")) or {})
            grid = (grids or {}).get(img, default_grid)
            dets = out.setdefault(img, [])
            dets.append(Detection(
                rle_decode(rle, grid),
                float(item["score"]),
                float(item["height_m"]),
                float(item["angle_deg"]),
                float(item["azimuth_deg"]) % 360.0,
                img,
                len(dets),
            ))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: detection #{k} is malformed ({exc})") from None
    return out


def write_detections(dets: Iterable[Detection], path: str | Path) -> None:
    payload = [detection_to_json(d) for d in dets]
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
