from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from roofkit.geo_core import InstanceMask, TileGrid


def rect_mask(grid: TileGrid, r0: int, c0: int, r1: int, c1: int) -> InstanceMask:
    bits = np.zeros(grid.shape, dtype=bool)
    bits[r0:r1, c0:c1] = True
    return InstanceMask(grid, bits)


def convex_ring(rng: np.random.Generator, cx: float, cy: float, rx: float, ry: float, n: int | None = None):
    """Counter-clockwise vertices on an ellipse at sorted random angles (always convex)."""
    n = n or int(rng.integers(3, 12))
    ang = np.sort(rng.uniform(0, 2 * math.pi, n))
    rot = rng.uniform(0, math.pi)
    pts = []
    for a in ang:
        x, y = rx * math.cos(a), ry * math.sin(a)
        pts.append((cx + x * math.cos(rot) - y * math.sin(rot), cy + x * math.sin(rot) + y * math.cos(rot)))
    return pts


def square_feature(seg_id, building, x, y, size, height, angle, azimuth):
    ring = [[x, y], [x + size, y], [x + size, y + size], [x, y + size], [x, y]]
    return {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [ring]},
        "properties": {
            "segment_id": seg_id,
            "building_id": building,
            "height_m": height,
            "angle_deg": angle,
            "azimuth_deg": azimuth,
        },
    }


def synthetic_features() -> dict:
    """Three buildings far apart; each has a gable pair and one flat annex."""
    feats = []
    origins = {"A": (1000.0, 1000.0), "B": (4000.0, 1000.0), "C": (1000.0, 6000.0)}
    heights = {"A": 3.5, "B": 8.0, "C": 14.0}
    for b, (x, y) in origins.items():
        h = heights[b]
        feats.append(square_feature(f"{b}1", b, x, y, 6.0, h, 35.0, 0.0))
        feats.append(square_feature(f"{b}2", b, x, y - 6.0, 6.0, h, 35.0, 180.0))
        feats.append(square_feature(f"{b}3", b, x + 7.0, y - 3.0, 4.0, h * 0.6, 2.0, 123.0))
    return {"type": "FeatureCollection", "features": feats}


@pytest.fixture
def features_file(tmp_path: Path) -> Path:
    path = tmp_path / "features.geojson"
    path.write_text(json.dumps(synthetic_features()), encoding="utf-8")
    return path


_ACCEPTANCE: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        _ACCEPTANCE.append((props["criterion"], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_ACCEPTANCE, key=lambda x: int(x[0].split(".")[0])):
        terminalreporter.write_line(f"{outcome}  {name}")
