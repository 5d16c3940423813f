"""Dataset ingestion: image records, point annotations, train/test splits.

A corpus is described by one YAML manifest listing the images, plus one CSV
annotation file per image with an ``x,y`` row per person (header optional).
Coordinates are real-valued pixels with the origin at the top-left corner of
the top-left pixel; valid points lie in the half-open box
``[0, width) x [0, height)``, so a point exactly on the right or bottom
border is rejected.

Manifest schema (paths are relative to the manifest's directory)::

    records:
      - id: I01
        width: 640
        height: 480
        gsd: 0.06            # meters/pixel; may be omitted for CCTV corpora
        event_type: sport    # sport | fair | festival | city_center | other
        split: train         # train | test
        image_path: images/I01.png
        annotation_path: annotations/I01.csv
    declared_totals:         # optional cross-check of annotation counts
      train: 138151
      test: 88140
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import AnnotationError, ManifestError

EVENT_TYPES = ("sport", "fair", "festival", "city_center", "other")
SPLITS = ("train", "test")

GSD_MIN = 0.01
GSD_MAX = 1.0


@dataclass(frozen=True)
class ImageRecord:
    id: str
    width: int
    height: int
    gsd: float | None
    event_type: str
    split: str
    image_path: Path
    annotation_path: Path


@dataclass
class PointAnnotationSet:
    """Ordered (x, y) pixel coordinates, one per person."""

    points: np.ndarray
    image_id: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    declared_totals: dict[str, int] | None = None

    def ids(self) -> list[str]:
        return [r.id for r in self.records]


def load_manifest(path: str | Path, check_annotations: bool = True) -> DatasetManifest:
    """Load and fully validate a manifest.

    Every referenced annotation file is parsed so schema problems surface at
    load time; when ``declared_totals`` is present the per-split annotation
    counts must match it exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ManifestError(f"{path}: not valid YAML: {e}") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a mapping, got {type(doc).__name__}")

    root = path.parent
    records = []
    seen_ids = set()
    for i, raw in enumerate(doc.get("records") or []):
        rec = _parse_record(raw, i, root)
        if rec.id in seen_ids:
            raise ManifestError(f"record {i}: field 'id': duplicate image id {rec.id!r}")
        seen_ids.add(rec.id)
        records.append(rec)

    declared = doc.get("declared_totals")
    if declared is not None:
        if not isinstance(declared, dict) or not set(declared) <= set(SPLITS):
            raise ManifestError(f"field 'declared_totals': expected mapping with keys from {SPLITS}")
        declared = {k: int(v) for k, v in declared.items()}

    manifest = DatasetManifest(records=records, declared_totals=declared)

    if check_annotations:
        totals = {s: 0 for s in SPLITS}
        for rec in records:
            totals[rec.split] += load_annotations(rec).count
        if declared:
            for split_name, expected in declared.items():
                if totals[split_name] != expected:
                    raise ManifestError(
                        f"field 'declared_totals': {split_name} count mismatch: "
                        f"declared {expected}, annotation files sum to {totals[split_name]}")
    return manifest


def _parse_record(raw, index: int, root: Path) -> ImageRecord:
    def fail(name, why):
        rid = raw.get("id", "?") if isinstance(raw, dict) else "?"
        raise ManifestError(f"record {index} ({rid}): field {name!r}: {why}")

    if not isinstance(raw, dict):
        raise ManifestError(f"record {index}: expected mapping, got {type(raw).__name__}")
    for name in ("id", "width", "height", "event_type", "split", "image_path", "annotation_path"):
        if name not in raw:
            fail(name, "missing")

    rid = str(raw["id"])
    try:
        width, height = int(raw["width"]), int(raw["height"])
    except (TypeError, ValueError):
        fail("width/height", f"not integers: {raw.get('width')!r}, {raw.get('height')!r}")
    if width < 1:
        fail("width", f"must be >= 1, got {width}")
    if height < 1:
        fail("height", f"must be >= 1, got {height}")

    gsd = raw.get("gsd")
    if gsd is not None:
        try:
            gsd = float(gsd)
        except (TypeError, ValueError):
            fail("gsd", f"not a number: {raw['gsd']!r}")
        if not (GSD_MIN <= gsd <= GSD_MAX):
            fail("gsd", f"must lie in [{GSD_MIN}, {GSD_MAX}] m/pixel, got {gsd}")

    event = str(raw["event_type"])
    if event not in EVENT_TYPES:
        fail("event_type", f"must be one of {EVENT_TYPES}, got {event!r}")
    split_name = str(raw["split"])
    if split_name not in SPLITS:
        fail("split", f"must be one of {SPLITS}, got {split_name!r}")

    return ImageRecord(
        id=rid, width=width, height=height, gsd=gsd, event_type=event, split=split_name,
        image_path=(root / str(raw["image_path"])).resolve(),
        annotation_path=(root / str(raw["annotation_path"])).resolve(),
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest back to YAML; paths are stored relative to it."""
    path = Path(path)
    root = path.parent.resolve()

    def relpath(p: Path) -> str:
        return os.path.relpath(p, root)

    doc = {"records": [
        {
            "id": r.id, "width": r.width, "height": r.height,
            **({"gsd": r.gsd} if r.gsd is not None else {}),
            "event_type": r.event_type, "split": r.split,
            "image_path": relpath(r.image_path),
            "annotation_path": relpath(r.annotation_path),
        }
        for r in manifest.records
    ]}
    if manifest.declared_totals is not None:
        doc["declared_totals"] = dict(manifest.declared_totals)
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def load_annotations(record: ImageRecord) -> PointAnnotationSet:
    """Parse one annotation CSV, preserving row order.

    Rows are ``x,y``; a single non-numeric header row is tolerated. Points
    must be finite and inside ``[0, width) x [0, height)``.
    """
    apath = record.annotation_path
    if not Path(apath).is_file():
        raise AnnotationError(f"{record.id}: annotation file not found: {apath}")
    points = []
    with open(apath, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh)):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if row_no == 0 and not points:
                    continue  # header
                raise AnnotationError(f"{apath}: malformed row {row_no}: {row!r}")
            points.append((x, y))

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    bad = ~np.isfinite(pts).all(axis=1)
    bad |= (pts[:, 0] < 0) | (pts[:, 0] >= record.width)
    bad |= (pts[:, 1] < 0) | (pts[:, 1] >= record.height)
    if bad.any():
        i = int(np.argmax(bad))
        raise AnnotationError(
            f"{apath}: point {i} out of bounds for {record.width}x{record.height} image: "
            f"({pts[i, 0]}, {pts[i, 1]})")
    return PointAnnotationSet(points=pts, image_id=record.id)


def save_annotations(points: np.ndarray, path: str | Path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for x, y in pts:
            # shortest representation that round-trips the exact float, so
            # boundary-hugging coordinates survive save -> load unchanged
            writer.writerow([repr(float(x)), repr(float(y))])


def split(manifest: DatasetManifest, which: str) -> list[ImageRecord]:
    """Records of one split, in manifest order. Splits are fixed, never shuffled."""
    if which not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {which!r}")
    return [r for r in manifest.records if r.split == which]


def load_image(record: ImageRecord) -> np.ndarray:
    """Decode the record's image to float32 HxWx3 in [0, 1]."""
    try:
        with Image.open(record.image_path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise ManifestError(f"{record.id}: image file not found: {record.image_path}")
    except OSError as e:
        raise ManifestError(f"{record.id}: cannot decode image {record.image_path}: {e}")
    if arr.shape[:2] != (record.height, record.width):
        raise ManifestError(
            f"{record.id}: field 'width/height': manifest says {record.width}x{record.height}, "
            f"file is {arr.shape[1]}x{arr.shape[0]}")
    return arr
