"""Command-line entry point.

Thin single-threaded orchestration over the library: each subcommand wires
files into one module and writes its artifacts to disk. Heavy settings live
in a run configuration document (see ``runconfig``); flags only pick the
command and point at paths, so any run can be reproduced from the recorded
configuration alone.

Exit codes: 0 on success, 1 on any validation or runtime failure (the
message goes to stderr), 2 for malformed command lines (argparse). When a
command dies midway through writing a directory, an ``INCOMPLETE`` marker
file is left next to the partial outputs.
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import ImageRecord, load_annotations, load_image, load_manifest, split
from .density import (
    GSD_ADAPTIVE,
    KNN_ADAPTIVE,
    DensityMap,
    GaussianSpec,
    load_density,
    render_density,
    save_density,
    sigma_from_gsd,
)
from .errors import CrowdmapError
from .evaluation import (
    counting_metrics,
    detect_persons,
    detections_to_csv,
    format_metrics_table,
    match_detections,
    metrics_to_csv,
)
from .fixture import FixtureSpec, generate_fixture
from .inference import DEFAULT_OVERLAP, DEFAULT_TILE, count_from_map, predict_tiled
from .model import build, initialize, load_checkpoint
from .patches import generate_patches, tile_origins
from .runconfig import create_run_dir, load_run_config
from .training import train


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CrowdmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def cmd_gt(args) -> int:
    """Render ground-truth density maps for every record in a manifest."""
    manifest = load_manifest(args.manifest)
    records = split(manifest, args.split) if args.split != "all" else manifest.records
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with _marked_incomplete(out_dir):
        summary = []
        for record in records:
            points = load_annotations(record).points
            if args.mode == GSD_ADAPTIVE:
                if record.gsd is None:
                    raise CrowdmapError(
                        f"record {record.id}: field 'gsd' is required for "
                        f"{GSD_ADAPTIVE} ground truth")
                spec = GaussianSpec.from_gsd(record.gsd)
                sigma_note = f"{spec.sigma_px:g}"
            else:
                spec = GaussianSpec.from_points(points)
                sigma_note = f"mean {np.mean(spec.sigma_px):.2f}" if len(points) else "n/a"
            dmap = render_density(points, (record.height, record.width), spec, record.id)
            save_density(dmap, out_dir / f"{record.id}.dmap")
            summary.append((record.id, args.mode, sigma_note, dmap.count(), len(points)))

        with open(out_dir / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "mode", "sigma_px", "rendered_mass", "annotation_count"])
            for image_id, mode, sigma, mass, count in summary:
                writer.writerow([image_id, mode, sigma, f"{mass:.6f}", count])

    print(f"wrote {len(summary)} density map(s) to {out_dir}")
    return 0


def cmd_tile(args) -> int:
    """Report (and optionally save) the tiling grid for each record."""
    manifest = load_manifest(args.manifest, check_annotations=False)
    records = split(manifest, args.split) if args.split != "all" else manifest.records

    rows = []
    for record in records:
        origins = tile_origins((record.height, record.width), args.tile, args.overlap)
        rows.extend((record.id, i, r, c) for i, (r, c) in enumerate(origins))
        print(f"{record.id}: {len(origins)} tiles")
    print(f"total: {len(rows)} tiles across {len(records)} image(s)")

    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "tile_index", "row", "col"])
            writer.writerows(rows)
        print(f"grid written to {args.out}")
    return 0


def cmd_train(args) -> int:
    """Run training as described by one configuration document."""
    config = load_run_config(args.config)
    run_dir = create_run_dir(config)
    print(f"run directory: {run_dir}")

    with _marked_incomplete(run_dir):
        manifest = load_manifest(config.manifest_path)
        records = split(manifest, "train")
        samples = list(generate_patches(records, config.profile))
        print(f"{len(samples)} patches from {len(records)} training image(s)")

        model = initialize(build(config.model), seed=config.seed)
        result = train(model, samples, config.train, config.loss, out_dir=run_dir)

    last = result.log[-1]
    print(f"finished {len(result.log)} steps; "
          f"final total {last.total:.6g} (low {last.loss_low:.6g}, high {last.loss_high:.6g})")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    """Counting metrics (and optional detection) for a checkpoint."""
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = split(manifest, args.split) if args.split != "all" else manifest.records
    if not records:
        raise CrowdmapError(f"no records in split {args.split!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with _marked_incomplete(out_dir):
        pairs = []
        det_rows = []
        total_tp = total_det = total_gt = 0
        for record in records:
            image = load_image(record)
            output = predict_tiled(model, image, tile=args.tile, overlap=args.overlap)
            predicted = count_from_map(output.density_low)
            true_count = float(load_annotations(record).count)
            pairs.append((record.id, true_count, predicted))

            if args.detect:
                result = _detect_for_record(record, output)
                detections_to_csv(result, out_dir / f"detections_{record.id}.csv")
                tp = len(result.matches)
                det_rows.append((record.id, len(result.detections), tp,
                                 result.precision, result.recall, result.f1))
                total_tp += tp
                total_det += len(result.detections)
                total_gt += int(true_count)
            if args.overlays:
                _write_overlay(out_dir / f"overlay_{record.id}.png", image, output,
                               load_annotations(record).points)

        report = counting_metrics(pairs)
        metrics_to_csv(report, out_dir / "metrics.csv")
        print(format_metrics_table(report, title=f"counting over {len(records)} image(s)"))

        if args.detect:
            _write_detection_summary(out_dir / "detection_summary.csv", det_rows,
                                     total_tp, total_det, total_gt)
            precision = total_tp / total_det if total_det else 0.0
            recall = total_tp / total_gt if total_gt else 0.0
            print(f"detection: precision {precision:.4f} recall {recall:.4f} "
                  f"over {total_det} detection(s)")

    print(f"reports written to {out_dir}")
    return 0


def cmd_predict(args) -> int:
    """Predict density maps and counts for one image file."""
    model, _ = load_checkpoint(args.checkpoint)
    image_path = Path(args.image)
    image = _load_image_file(image_path)
    output = predict_tiled(model, image, tile=args.tile, overlap=args.overlap)

    out_dir = Path(args.out) if args.out else image_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = image_path.stem
    low = DensityMap(values=output.density_low, image_id=stem, resolution_divisor=4)
    high = DensityMap(values=output.density_high, image_id=stem, resolution_divisor=1)
    save_density(low, out_dir / f"{stem}_low.dmap")
    save_density(high, out_dir / f"{stem}_high.dmap")

    count_low, count_high = low.count(), high.count()
    with open(out_dir / f"{stem}_counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["head", "count"])
        writer.writerow(["low", f"{count_low:.4f}"])
        writer.writerow(["high", f"{count_high:.4f}"])
    print(f"{stem}: count {count_low:.2f} (low head), {count_high:.2f} (high head)")
    print(f"density maps written to {out_dir}")
    return 0


def cmd_detect(args) -> int:
    """Locate individual people in previously predicted density maps."""
    low = load_density(args.low)
    high = load_density(args.high)
    target = args.target if args.target is not None else round(low.count())
    if args.min_sep is not None:
        min_sep = args.min_sep
    elif args.gsd is not None:
        min_sep = sigma_from_gsd(args.gsd)
    else:
        raise CrowdmapError("provide --min-sep, or --gsd to derive it")

    detections = detect_persons(high, target_count=int(target), min_sep_px=min_sep)
    if detections.shortfall:
        print(f"warning: only {len(detections)} local maxima for target {target}",
              file=sys.stderr)

    if args.annotations:
        if args.gsd is None:
            raise CrowdmapError("field 'gsd' is required to match detections in meters")
        h, w = high.values.shape
        record = ImageRecord(id=high.image_id, width=w, height=h, gsd=args.gsd,
                             event_type="other", split="test",
                             image_path=Path(args.annotations),
                             annotation_path=Path(args.annotations))
        result = match_detections(detections, load_annotations(record), args.gsd)
        detections_to_csv(result, args.out)
        print(f"{len(detections)} detection(s), {len(result.matches)} matched: "
              f"precision {result.precision:.4f} recall {result.recall:.4f} "
              f"f1 {result.f1:.4f}")
    else:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "score"])
            for x, y, score in detections:
                writer.writerow([f"{x:.2f}", f"{y:.2f}", f"{score:.6g}"])
        print(f"{len(detections)} detection(s) written to {args.out}")
    return 0


def cmd_fixture(args) -> int:
    """Generate a synthetic corpus for tests and smoke runs."""
    spec = FixtureSpec(n_images=args.images, image_size=args.size,
                       min_points=args.min_points, max_points=args.max_points,
                       gsd=args.gsd, train_fraction=args.train_fraction,
                       seed=args.seed)
    manifest = generate_fixture(args.out, spec)
    totals = manifest.declared_totals
    print(f"{len(manifest.records)} image(s) under {args.out} "
          f"(train {totals['train']} people, test {totals['test']})")
    print(f"manifest: {Path(args.out) / 'manifest.yaml'}")
    return 0


def _detect_for_record(record, output):
    if record.gsd is None:
        raise CrowdmapError(
            f"record {record.id}: field 'gsd' is required for detection "
            "(converts the half-meter match radius to pixels)")
    high = DensityMap(values=output.density_high, image_id=record.id,
                      resolution_divisor=1)
    target = round(count_from_map(output.density_low))
    detections = detect_persons(high, target_count=target,
                                min_sep_px=sigma_from_gsd(record.gsd))
    return match_detections(detections, load_annotations(record), record.gsd)


def _write_detection_summary(path, det_rows, total_tp, total_det, total_gt):
    precision = total_tp / total_det if total_det else 0.0
    recall = total_tp / total_gt if total_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "detections", "matched", "precision", "recall", "f1"])
        for image_id, n_det, tp, p, r, f in det_rows:
            writer.writerow([image_id, n_det, tp, f"{p:.4f}", f"{r:.4f}", f"{f:.4f}"])
        writer.writerow([])
        writer.writerow(["all", total_det, total_tp,
                         f"{precision:.4f}", f"{recall:.4f}", f"{f1:.4f}"])


def _write_overlay(path, image, output, gt_points) -> None:
    """Input image with the predicted density and GT points drawn over it."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 7))
    ax.imshow(image)
    ax.imshow(output.density_high, cmap="inferno", alpha=0.45)
    if len(gt_points):
        ax.scatter(gt_points[:, 0], gt_points[:, 1], s=14, facecolors="none",
                   edgecolors="lime", linewidths=0.8, label="ground truth")
        ax.legend(loc="lower right")
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", dpi=110)
    plt.close(fig)


def _load_image_file(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise CrowdmapError(f"cannot read image {path}: {exc}") from exc


@contextmanager
def _marked_incomplete(out_dir: Path):
    """Leave a marker file when a command dies after partial writes."""
    try:
        yield
    except BaseException as exc:
        try:
            (out_dir / "INCOMPLETE").write_text(f"command failed: {exc}\n")
        except OSError:
            pass
        raise


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdmap",
        description="Crowd counting and density estimation for overhead imagery.")
    parser.add_argument("--version", action="version", version=f"crowdmap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gt", help="render ground-truth density maps from annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=[GSD_ADAPTIVE, KNN_ADAPTIVE], default=GSD_ADAPTIVE)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("tile", help="show the tiling grid a manifest produces")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tile", type=int, default=320)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--split", choices=["train", "test", "all"], default="all")
    p.add_argument("--out", help="optional CSV of (image_id, tile_index, row, col)")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train a model from a run configuration")
    p.add_argument("--config", required=True, help="YAML run configuration document")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP)
    p.add_argument("--detect", action="store_true",
                   help="also locate people and score against the half-meter rule")
    p.add_argument("--overlays", action="store_true",
                   help="save density/GT overlay images per record")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict density maps for one image file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="output directory (default: next to the image)")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("detect", help="locate people in predicted density maps")
    p.add_argument("--low", required=True, help="low-resolution density file (count source)")
    p.add_argument("--high", required=True, help="full-resolution density file")
    p.add_argument("--out", required=True, help="detections CSV")
    p.add_argument("--gsd", type=float, help="meters per pixel of the source image")
    p.add_argument("--target", type=int, help="override the number of people to extract")
    p.add_argument("--min-sep", type=int, help="override the suppression radius in pixels")
    p.add_argument("--annotations", help="ground-truth CSV to match against (needs --gsd)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("fixture", help="generate a synthetic test corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--min-points", type=int, default=20)
    p.add_argument("--max-points", type=int, default=300)
    p.add_argument("--gsd", type=float, default=0.06)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)

    return parser


if __name__ == "__main__":
    sys.exit(main())
