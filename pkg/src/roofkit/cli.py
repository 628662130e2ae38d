"""Command-line entry point.

Settings come from built-in defaults, then an optional TOML file
(``--config``), then command-line flags; later sources win.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import tomli_w

from . import __version__
from .attr_math import HeightScheme, LossWeights, random_gradient_check
from .dataset_builder import (
    SplitAssignment,
    build_tile,
    building_centroids,
    candidate_segments,
    compute_stats,
    geographic_split,
    load_features,
    load_tiles,
    manifest_paths,
    write_manifest,
)
from .geo_core import TileGrid
from .lod2_builder import AZIMUTH_CONVENTIONS, mesh_for_instance, write_obj
from .match_eval import evaluate, gt_instances, read_detections
from .reports import render_histograms

logger = logging.getLogger("roofkit")

COMMANDS = ("build-dataset", "split", "stats", "eval", "loss-check", "reconstruct", "report")
LOSS_CHECK_TOLERANCE = 1e-5
# settings that only say where to write; excluded from the config hash
_OUTPUT_KEYS = ("out", "config", "jobs", "verbose")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    input: str | None = None
    centroids: str | None = None
    gt: str | None = None
    pred: str | None = None
    splits: str | None = None
    split: str | None = None
    out: str | None = None
    config: str | None = None
    height_scheme: str = "log_normalized"
    divisor: float = 110.0
    mu: float = 2.06
    sigma: float = 0.45
    lambda_h: float = 0.5
    lambda_a: float = 0.001
    lambda_phi: float = 1.0
    alpha_th: float = 15.0
    iou_thresh: float = 0.5
    strict_gt: bool = False
    height_thresholds: list[float] = field(default_factory=lambda: [4.5, 7.0, 12.0])
    angle_threshold: float = 15.0
    seed: int = 0
    radius: float = 1000.0
    ratios: list[float] = field(default_factory=lambda: [0.6, 0.15, 0.15])
    extent: float = 100.0
    px: int = 1024
    azimuth_convention: str = "facing"
    image_id: str | None = None
    points: int = 100
    eps: float = 1e-5
    jobs: int = 1
    verbose: int = 0

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        th = list(self.height_thresholds)
        if len(th) != 3 or any(b <= a for a, b in zip(th, th[1:])):
            raise UsageError(f"height thresholds must be three strictly increasing values, got {th}")
        if not 0.0 <= self.iou_thresh <= 1.0:
            raise UsageError("iou threshold must lie in [0, 1]")
        if len(self.ratios) != 3:
            raise UsageError("ratios needs three values (train, val, test)")
        if self.azimuth_convention not in AZIMUTH_CONVENTIONS:
            raise UsageError(f"azimuth convention must be one of {AZIMUTH_CONVENTIONS}")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")
        if self.split is not None and self.splits is None:
            raise UsageError("--split requires --splits")
        self.scheme()
        self.weights()

    def scheme(self) -> HeightScheme:
        try:
            return HeightScheme(self.height_scheme, self.divisor, self.mu, self.sigma)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def weights(self) -> LossWeights:
        try:
            return LossWeights(self.lambda_h, self.lambda_a, self.lambda_phi, self.alpha_th)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _OUTPUT_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2; usage errors are validation errors here
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = _Parser(add_help=False, argument_default=S)
    common.add_argument("--config", help="TOML file with default settings")
    common.add_argument("--jobs", type=int, help="worker processes/threads")
    common.add_argument("-v", "--verbose", action="count")
    common.add_argument("--seed", type=int)

    p = _Parser(prog="roofkit", description="Roof segment dataset, evaluation and LoD2 tooling.")
    p.add_argument("--version", action="version", version=f"roofkit {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    b = sub.add_parser("build-dataset", parents=[common], argument_default=S, help="tiles + masks from roof segments")
    b.add_argument("--input", help="GeoJSON FeatureCollection of roof segments")
    b.add_argument("--centroids", help="JSON {tile_id: [x, y]}; default one tile per building")
    b.add_argument("--extent", type=float)
    b.add_argument("--px", type=int)
    b.add_argument("--out")

    s = sub.add_parser("split", parents=[common], argument_default=S, help="geographic train/val/test split")
    s.add_argument("--gt", help="dataset directory")
    s.add_argument("--radius", type=float)
    s.add_argument("--ratios", type=_floats)
    s.add_argument("--out", help="output file (default <gt>/splits.json)")

    st = sub.add_parser("stats", parents=[common], argument_default=S, help="dataset statistics")
    st.add_argument("--gt")
    st.add_argument("--splits")
    st.add_argument("--split")
    st.add_argument("--out")

    e = sub.add_parser("eval", parents=[common], argument_default=S, help="evaluate detections against ground truth")
    e.add_argument("--gt")
    e.add_argument("--pred")
    e.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    e.add_argument("--strict-gt", dest="strict_gt", action="store_true", help="accept matches only for IoU > threshold")
    e.add_argument("--height-thresholds", dest="height_thresholds", type=_floats)
    e.add_argument("--angle-threshold", dest="angle_threshold", type=float)
    e.add_argument("--splits")
    e.add_argument("--split")
    e.add_argument("--out")

    lc = sub.add_parser("loss-check", parents=[common], argument_default=S, help="finite-difference gradient check")
    lc.add_argument("--points", type=int)
    lc.add_argument("--eps", type=float)
    lc.add_argument("--height-scheme", dest="height_scheme",
                    choices=["raw", "linear", "log", "log100", "lognorm", "log_normalized"])
    lc.add_argument("--divisor", type=float)
    lc.add_argument("--mu", type=float)
    lc.add_argument("--sigma", type=float)
    lc.add_argument("--alpha-th", dest="alpha_th", type=float)
    lc.add_argument("--lambda-h", dest="lambda_h", type=float)
    lc.add_argument("--lambda-a", dest="lambda_a", type=float)
    lc.add_argument("--lambda-phi", dest="lambda_phi", type=float)

    r = sub.add_parser("reconstruct", parents=[common], argument_default=S, help="LoD2 OBJ from masks + attributes")
    r.add_argument("--pred")
    r.add_argument("--gt")
    r.add_argument("--grid-extent", dest="extent", type=float)
    r.add_argument("--px", type=int)
    r.add_argument("--image-id", dest="image_id")
    r.add_argument("--azimuth-convention", dest="azimuth_convention", choices=list(AZIMUTH_CONVENTIONS))
    r.add_argument("--out")

    rp = sub.add_parser("report", parents=[common], argument_default=S, help="attribute histograms")
    rp.add_argument("--gt")
    rp.add_argument("--pred")
    rp.add_argument("--splits")
    rp.add_argument("--out")
    return p


def resolve_config(argv: Sequence[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    if not ns.get("command"):
        raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
    merged: dict[str, Any] = {}
    if "config" in ns:
        path = Path(ns["config"])
        with path.open("rb") as fh:
            merged.update(tomllib.load(fh))
    merged.update(ns)
    cfg = RunConfig.from_dict(merged)
    cfg.validate()
    return cfg


def _sha256_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in manifest_paths(path):
            h.update(f.name.encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def provenance(cfg: RunConfig, inputs: dict[str, str | None]) -> dict[str, Any]:
    return {
        "version": __version__,
        "config_hash": cfg.config_hash(),
        "inputs": {k: _sha256_path(Path(v)) for k, v in sorted(inputs.items()) if v},
    }


def _dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _need(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError(f"{cfg.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _require_exists(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"no such file or directory: {p}")


def _build_one(args):
    tile_id, center, records, extent, px = args
    return build_tile(center, records, extent, px, tile_id)


def cmd_build_dataset(cfg: RunConfig) -> int:
    _need(cfg, "input", "out")
    _require_exists(cfg.input, cfg.centroids)
    records, skipped = load_features(cfg.input)
    if cfg.centroids:
        raw = json.loads(Path(cfg.centroids).read_text(encoding="utf-8"))
        centers = {str(k): (float(v[0]), float(v[1])) for k, v in raw.items()}
    else:
        centers = {f"b{b}": c for b, c in building_centroids(records).items()}
    jobs = [(tid, c, candidate_segments(records, c, cfg.extent), cfg.extent, cfg.px) for tid, c in sorted(centers.items())]
    out = Path(cfg.out)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            tiles = list(pool.map(_build_one, jobs))
    else:
        tiles = [_build_one(j) for j in jobs]
    for tile in tiles:
        write_manifest(tile, out / "tiles")
    index = {
        "tiles": {t.tile_id: {"center": list(t.center), "segments": len(t.segments), "dropped": len(t.dropped)} for t in tiles},
        "skipped_features": skipped,
        "provenance": provenance(cfg, {"input": cfg.input, "centroids": cfg.centroids}),
    }
    _dump_json(index, out / "index.json")
    print(f"wrote {len(tiles)} tiles ({sum(len(t.segments) for t in tiles)} instances) to {out / 'tiles'}")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    _need(cfg, "gt")
    _require_exists(cfg.gt)
    tiles = load_tiles(cfg.gt)
    if not tiles:
        raise UsageError(f"no tile manifests under {cfg.gt}")
    assignment = geographic_split({t.tile_id: t.center for t in tiles}, cfg.radius, cfg.ratios, cfg.seed)
    payload = assignment.to_json()
    payload["radius"] = cfg.radius
    payload["ratios"] = list(cfg.ratios)
    payload["seed"] = cfg.seed
    payload["provenance"] = provenance(cfg, {"gt": cfg.gt})
    out = Path(cfg.out) if cfg.out else Path(cfg.gt) / "splits.json"
    _dump_json(payload, out)
    print("split counts: " + ", ".join(f"{k}={v}" for k, v in assignment.counts().items()))
    for w in assignment.warnings:
        print(f"warning: {w}")
    return 0


def _load_splits(path: str | None) -> SplitAssignment | None:
    if path is None:
        return None
    return SplitAssignment.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_stats(cfg: RunConfig) -> int:
    _need(cfg, "gt", "out")
    _require_exists(cfg.gt, cfg.splits)
    tiles = load_tiles(cfg.gt)
    splits = _load_splits(cfg.splits)
    out = Path(cfg.out)
    stats = compute_stats(tiles, splits, cfg.split or "train")
    payload = stats.to_json()
    payload["provenance"] = provenance(cfg, {"gt": cfg.gt, "splits": cfg.splits})
    _dump_json(payload, out / "stats.json")
    chosen = tiles if splits is None else [t for t in tiles if splits.splits.get(t.tile_id) == (cfg.split or "train")]
    recs = [r for t in chosen for r, _ in t.segments]
    for attr in ("height", "angle", "azimuth"):
        render_histograms({"gt": [getattr(r, attr) for r in recs]}, attr, out)
    print(f"instances={stats.instance_count} per_image={stats.per_image_mean:.3f} "
          f"log_mu={stats.log_height_mean:.4f} log_sigma={stats.log_height_std:.4f}")
    return 0


def _select_tiles(cfg: RunConfig):
    tiles = load_tiles(cfg.gt)
    splits = _load_splits(cfg.splits)
    if splits is not None and cfg.split:
        tiles = [t for t in tiles if splits.splits.get(t.tile_id) == cfg.split]
    return tiles


def cmd_eval(cfg: RunConfig) -> int:
    _need(cfg, "gt", "pred", "out")
    _require_exists(cfg.gt, cfg.pred, cfg.splits)
    tiles = _select_tiles(cfg)
    grids = {t.tile_id: t.grid for t in tiles}
    dets = read_detections(cfg.pred, grids)
    unknown = sorted(set(dets) - set(grids))
    if unknown:
        logger.warning("ignoring detections for %d images without ground truth", len(unknown))
        dets = {k: v for k, v in dets.items() if k in grids}
    gts = {t.tile_id: gt_instances(t) for t in tiles}
    res = evaluate(gts, dets, cfg.iou_thresh, cfg.strict_gt, cfg.height_thresholds, cfg.angle_threshold, jobs=cfg.jobs)
    out = Path(cfg.out)
    metrics = res.metrics_json()
    metrics["counts"]["ignored_images"] = len(unknown)
    metrics["provenance"] = provenance(cfg, {"gt": cfg.gt, "pred": cfg.pred, "splits": cfg.splits})
    _dump_json(metrics, out / "metrics.json")
    (out / "clusters.csv").write_text(res.clusters.to_csv(), encoding="utf-8")
    (out / "errors_hist.csv").write_text(res.clusters.errors_hist_csv(), encoding="utf-8")
    fmt = lambda x: "--" if x is None or x != x else f"{x:.4f}"  # noqa: E731
    print(f"AP50={fmt(res.ap.ap50)} AP75={fmt(res.ap.ap75)} mAP={fmt(res.ap.map)}")
    print(f"MAE height={fmt(res.mae['height'])} m angle={fmt(res.mae['angle'])} deg azimuth={fmt(res.mae['azimuth'])} deg")
    return 0


def cmd_loss_check(cfg: RunConfig) -> int:
    rep = random_gradient_check(cfg.seed, cfg.points, cfg.eps, cfg.weights(), cfg.scheme())
    ok = rep.max_rel_error < LOSS_CHECK_TOLERANCE
    print(f"max relative gradient discrepancy: {rep.max_rel_error:.3e} over {rep.n_points} points")
    for name, val in rep.per_loss.items():
        print(f"  {name}: {val:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_reconstruct(cfg: RunConfig) -> int:
    _need(cfg, "out")
    if cfg.pred is None and cfg.gt is None:
        raise UsageError("reconstruct needs --pred and/or --gt")
    _require_exists(cfg.pred, cfg.gt)
    meshes = []
    all_tiles = load_tiles(cfg.gt) if cfg.gt else []
    tiles = [t for t in all_tiles if not cfg.image_id or t.tile_id == cfg.image_id]
    if cfg.pred:
        grids = {t.tile_id: t.grid for t in all_tiles}
        dets = read_detections(cfg.pred, grids, default_grid=TileGrid((0.0, 0.0), cfg.extent, cfg.px, cfg.px))
        for img in sorted(dets):
            if cfg.image_id and img != cfg.image_id:
                continue
            for d in dets[img]:
                meshes.append(mesh_for_instance(d.mask, d.height, d.angle, d.azimuth, f"{img}_det{d.det_id}", cfg.azimuth_convention))
    else:
        seen = set()
        for t in tiles:
            for rec, mask in t.segments:
                if rec.segment_id in seen:
                    continue
                seen.add(rec.segment_id)
                meshes.append(mesh_for_instance(mask, rec.height, rec.angle, rec.azimuth, f"{t.tile_id}_{rec.segment_id}", cfg.azimuth_convention))
    out = Path(cfg.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_obj(meshes, out)
    clamped = sum(m.flags["clamped"] for m in meshes)
    print(f"wrote {len(meshes)} segment meshes to {out} (clamped roof vertices: {clamped})")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    _need(cfg, "gt", "out")
    _require_exists(cfg.gt, cfg.pred, cfg.splits)
    tiles = load_tiles(cfg.gt)
    splits = _load_splits(cfg.splits)
    out = Path(cfg.out)
    files = {}
    for attr in ("height", "angle", "azimuth"):
        series: dict[str, list[float]] = {}
        if splits is not None:
            for name in ("train", "val", "test"):
                series[name] = [getattr(r, attr) for t in tiles if splits.splits.get(t.tile_id) == name for r, _ in t.segments]
        else:
            series["gt"] = [getattr(r, attr) for t in tiles for r, _ in t.segments]
        if cfg.pred:
            dets = read_detections(cfg.pred, {t.tile_id: t.grid for t in tiles})
            series["pred"] = [getattr(d, attr) for img in sorted(dets) for d in dets[img]]
        csv_path, svg_path = render_histograms(series, attr, out)
        files[attr] = {"csv": csv_path.name, "svg": svg_path.name, "counts": {k: len(v) for k, v in series.items()}}
    _dump_json({"histograms": files, "provenance": provenance(cfg, {"gt": cfg.gt, "pred": cfg.pred, "splits": cfg.splits})},
               out / "report.json")
    print(f"wrote histograms for {len(tiles)} tiles to {out}")
    return 0


HANDLERS = {
    "build-dataset": cmd_build_dataset,
    "split": cmd_split,
    "stats": cmd_stats,
    "eval": cmd_eval,
    "loss-check": cmd_loss_check,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg = resolve_config(argv)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"roofkit: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"roofkit: error: {exc}", file=sys.stderr)
        return 2
    except (tomllib.TOMLDecodeError, TypeError) as exc:
        print(f"roofkit: error: bad config: {exc}", file=sys.stderr)
        return 1
    level = logging.DEBUG if cfg.verbose >= 2 else logging.INFO if cfg.verbose == 1 else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[cfg.command](cfg)
    except UsageError as exc:
        print(f"roofkit: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"roofkit: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"roofkit: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
