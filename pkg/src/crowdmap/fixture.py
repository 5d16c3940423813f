"""Synthetic corpus generator for tests, demos, and smoke training runs.

Produces a miniature overhead-imagery dataset in the standard layout:
``images/*.png``, ``annotations/*.csv``, and ``manifest.yaml``. Each person
is drawn as a small bright blob on a textured dark background, so a density
regressor trained on the corpus has real signal to fit. Output is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import (
    DatasetManifest,
    ImageRecord,
    load_manifest,
    save_annotations,
    save_manifest,
)

DEFAULT_GSD = 0.06
_EVENT_CYCLE = ("sport", "fair", "festival", "city_center", "other")


@dataclass(frozen=True)
class FixtureSpec:
    n_images: int = 10
    image_size: int = 256
    min_points: int = 20
    max_points: int = 300
    gsd: float | None = DEFAULT_GSD
    train_fraction: float = 0.7
    seed: int = 0


def generate_fixture(out_dir: str | Path, spec: FixtureSpec = FixtureSpec()) -> DatasetManifest:
    """Write a synthetic corpus under ``out_dir`` and return its manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    n_train = int(round(spec.n_images * spec.train_fraction))
    if 0.0 < spec.train_fraction < 1.0 and spec.n_images > 1:
        # fractional splits always keep at least one image on each side
        n_train = min(max(n_train, 1), spec.n_images - 1)

    records = []
    totals = {"train": 0, "test": 0}
    for i in range(spec.n_images):
        image_id = f"S{i:02d}"
        size = spec.image_size
        n_points = int(rng.integers(spec.min_points, spec.max_points + 1))
        points = _scatter_points(rng, size, n_points)
        pixels = _render_scene(rng, size, points)

        image_rel = f"images/{image_id}.png"
        ann_rel = f"annotations/{image_id}.csv"
        Image.fromarray(pixels).save(out_dir / image_rel)
        save_annotations(points, out_dir / ann_rel)
        split_name = "train" if i < n_train else "test"
        totals[split_name] += n_points
        records.append(ImageRecord(
            id=image_id, width=size, height=size, gsd=spec.gsd,
            event_type=_EVENT_CYCLE[i % len(_EVENT_CYCLE)],
            split=split_name,
            image_path=(out_dir / image_rel).resolve(),
            annotation_path=(out_dir / ann_rel).resolve(),
        ))

    manifest = DatasetManifest(records=records, declared_totals=totals)
    save_manifest(manifest, out_dir / "manifest.yaml")
    # Re-load so the returned manifest is exactly what consumers will see,
    # and so the declared totals are verified against the files on disk.
    return load_manifest(out_dir / "manifest.yaml")


def _scatter_points(rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    """Mix a few dense clusters with uniform stragglers, like a real crowd."""
    n_clustered = int(0.7 * n)
    n_clusters = max(1, int(rng.integers(2, 6)))
    centers = rng.uniform(0.15 * size, 0.85 * size, size=(n_clusters, 2))
    spread = rng.uniform(0.03 * size, 0.10 * size, size=n_clusters)
    which = rng.integers(0, n_clusters, size=n_clustered)
    clustered = centers[which] + rng.normal(0.0, 1.0, size=(n_clustered, 2)) * spread[which, None]
    uniform = rng.uniform(0, size, size=(n - n_clustered, 2))
    points = np.vstack([clustered, uniform])
    return np.clip(points, 0.0, np.nextafter(float(size), 0.0))


def _render_scene(rng: np.random.Generator, size: int, points: np.ndarray) -> np.ndarray:
    """Draw people as bright blobs over noisy dark ground."""
    base = rng.uniform(0.12, 0.30)
    noise = rng.normal(0.0, 0.03, size=(size, size))
    tint = rng.uniform(0.85, 1.15, size=3)

    yy, xx = np.mgrid[0:size, 0:size]
    ground = base + 0.05 * np.sin(xx / 17.0) * np.cos(yy / 23.0) + noise
    layer = np.zeros((size, size))
    for x, y in points:
        cx, cy = int(x), int(y)
        x0, x1 = max(cx - 2, 0), min(cx + 3, size)
        y0, y1 = max(cy - 2, 0), min(cy + 3, size)
        gy = np.exp(-0.5 * ((np.arange(y0, y1) + 0.5 - y) / 1.1) ** 2)
        gx = np.exp(-0.5 * ((np.arange(x0, x1) + 0.5 - x) / 1.1) ** 2)
        layer[y0:y1, x0:x1] += 0.9 * np.outer(gy, gx)

    gray = np.clip(ground + layer, 0.0, 1.0)
    rgb = np.clip(gray[:, :, None] * tint[None, None, :], 0.0, 1.0)
    return (rgb * 255).round().astype(np.uint8)
