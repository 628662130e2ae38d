"""Hand-built AP scenes and a from-the-definition evaluator used as an oracle.

Rectangles are ``(r0, c0, r1, c1)`` (end-exclusive) on a 10x10 grid.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from roofkit.geo_core import InstanceMask, TileGrid
from roofkit.match_eval import Detection

GRID = TileGrid((0.0, 0.0), 10.0, 10, 10)
THRESHOLDS = [Fraction(50 + 5 * k, 100) for k in range(10)]

A = (0, 0, 4, 5)       # 20 px
A50 = (0, 0, 2, 5)     # IoU 0.5 with A
A60 = (0, 0, 4, 3)     # 0.6
A80 = (0, 0, 4, 4)     # 0.8
A83 = (0, 0, 4, 6)     # 20/24
B = (5, 0, 9, 5)       # 20 px
B80 = (5, 0, 9, 4)
C = (0, 6, 10, 10)     # 40 px
C70 = (0, 6, 7, 10)
C75 = (0, 6, 10, 9)
C90 = (0, 6, 9, 10)
MISS = (6, 6, 9, 9)    # inside C only partially; used where C is not a gt
G2 = (0, 5, 4, 8)
D = (4, 0, 5, 5)
E = (9, 0, 10, 6)
STRADDLE = (2, 0, 7, 5)

# scene: {image_id: (gt rects, [(det rect, score), ...])}; expected: hand values (ap50, ap75, map)
SCENES: list[tuple[str, dict, tuple | None]] = [
    ("perfect single", {"a": ([A], [(A, 0.9)])}, (1, 1, 1)),
    ("iou 0.6", {"a": ([A], [(A60, 0.9)])}, (1, 0, Fraction(3, 10))),
    ("fp above tp", {"a": ([C], [(A, 0.95), (C90, 0.8)])}, (Fraction(1, 2), Fraction(1, 2), Fraction(45, 100))),
    ("half recall", {"a": ([A, B], [(A, 0.9)])}, (Fraction(51, 101),) * 3),
    ("no detections", {"a": ([A], [])}, (0, 0, 0)),
    ("duplicate after tp", {"a": ([A], [(A, 0.9), (A, 0.8)])}, (1, 1, 1)),
    ("better duplicate ranked lower", {"a": ([A], [(A60, 0.9), (A, 0.8)])}, (1, Fraction(1, 2), Fraction(65, 100))),
    ("three perfect", {"a": ([A, B, C], [(A, 0.9), (B, 0.8), (C, 0.7)])}, (1, 1, 1)),
    ("fp in the middle", {"a": ([A, B, C], [(A, 0.9), (MISS, 0.8), (B, 0.7), (C, 0.6)])},
     (Fraction(8425, 10100),) * 3),
    ("two images one fp", {"a": ([A], [(A, 0.9)]), "b": ([A], [(C, 0.95)])}, (Fraction(51, 202),) * 3),
    ("iou exactly 0.5", {"a": ([A], [(A50, 0.9)])}, (1, 0, Fraction(1, 10))),
    ("iou exactly 0.75", {"a": ([C], [(C75, 0.7)])}, (1, 1, Fraction(6, 10))),
    ("nested gts", {"a": ([A, A80], [(A, 0.9), (A80, 0.8)])}, (1, 1, 1)),
    ("greedy takes best gt", {"a": ([A, G2], [(A83, 0.9), (A80, 0.8)])},
     (Fraction(51, 101), Fraction(51, 101), Fraction(7 * 51, 1010))),
    ("score tie across images", {"a": ([A], [(A, 0.5)]), "b": ([A], [(C, 0.5)])}, (Fraction(51, 101),) * 3),
    ("only false positives", {"a": ([A], [(C, 0.9), (B, 0.8)])}, (0, 0, 0)),
    ("gt-free image", {"a": ([A, B], [(B, 0.6), (A, 0.4)]), "b": ([], [(A, 0.5)])},
     (Fraction(253, 303),) * 3),
    ("five gts mixed", {"a": ([A, B, C, D, E], [(A80, 0.95), (B, 0.9), (C70, 0.85), (D, 0.3), ((9, 0, 10, 3), 0.2)])}, None),
    ("straddling fp", {"a": ([A, B], [(STRADDLE, 0.9), (B80, 0.7)])},
     (Fraction(51, 202), Fraction(51, 202), Fraction(7 * 51, 2020))),
    ("staircase of duplicates", {"a": ([C], [(C70, 0.9), (C90, 0.8), (C, 0.7)])},
     (1, Fraction(1, 2), Fraction(22, 30))),
]


def _pixels(rect):
    r0, c0, r1, c1 = rect
    return {(r, c) for r in range(r0, r1) for c in range(c0, c1)}


def _iou(a, b) -> Fraction:
    pa, pb = _pixels(a), _pixels(b)
    return Fraction(len(pa & pb), len(pa | pb))


def oracle_ap(scene: dict, threshold: Fraction) -> Fraction | None:
    n_gt = sum(len(g) for g, _ in scene.values())
    if n_gt == 0:
        return None
    ranked = []
    for img in sorted(scene):
        gts, dets = scene[img]
        taken: set[int] = set()
        order = sorted(range(len(dets)), key=lambda k: (-dets[k][1], k))
        for k in order:
            rect, score = dets[k]
            cands = [(g, _iou(rect, gts[g])) for g in range(len(gts)) if g not in taken]
            cands = [(g, v) for g, v in cands if v >= threshold]
            hit = max(cands, key=lambda x: x[1])[0] if cands else None
            if hit is not None:
                taken.add(hit)
            ranked.append((-score, img, k, hit is not None))
    ranked.sort(key=lambda r: r[:3])
    curve = []  # (recall, precision)
    tp = 0
    for n, (*_, hit) in enumerate(ranked, start=1):
        tp += hit
        curve.append((Fraction(tp, n_gt), Fraction(tp, n)))
    total = Fraction(0)
    for i in range(101):
        r = Fraction(i, 100)
        total += max((p for rc, p in curve if rc >= r), default=Fraction(0))
    return total / 101


def oracle_metrics(scene: dict) -> tuple[float, float, float]:
    per = [oracle_ap(scene, t) for t in THRESHOLDS]
    return float(per[0]), float(per[5]), float(sum(per) / len(per))


def build_inputs(scene: dict):
    dets, gts = {}, {}
    for img, (g, d) in scene.items():
        gts[img] = [_mask(r) for r in g]
        dets[img] = [Detection(_mask(r), s, 1.0, 0.0, 0.0, img, k) for k, (r, s) in enumerate(d)]
    return dets, gts


def _mask(rect) -> InstanceMask:
    bits = np.zeros(GRID.shape, dtype=bool)
    r0, c0, r1, c1 = rect
    bits[r0:r1, c0:c1] = True
    return InstanceMask(GRID, bits)
