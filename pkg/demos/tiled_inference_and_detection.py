"""
Tiled inference and person detection on a large scene
======================================================

Big aerial frames do not fit through the network in one piece. This script
predicts a 512 px scene tile by tile, checks the stitched result against a
single whole-image pass, then pulls individual people out of the
full-resolution density map and scores them with the half-meter rule.

Reuses the checkpoint from train_small_model.py when present; otherwise
trains a quick stand-in first.
"""

import tempfile
from pathlib import Path

from crowdmap import (
    DensityMap,
    FixtureSpec,
    ModelConfig,
    TrainConfig,
    build,
    count_from_map,
    generate_fixture,
    initialize,
    load_annotations,
    load_checkpoint,
    load_image,
    predict_padded,
    predict_tiled,
    split,
    train,
)
from crowdmap.density import sigma_from_gsd
from crowdmap.evaluation import detect_persons, match_detections
from crowdmap.patches import aerial_profile, generate_patches

checkpoint = Path(__file__).parent / "output" / "small_run" / "final.ckpt"
if checkpoint.exists():
    model, _ = load_checkpoint(checkpoint)
    print(f"loaded {checkpoint}")
else:
    print("no checkpoint from train_small_model.py, training a quick stand-in")
    workdir = Path(tempfile.mkdtemp(prefix="standin_"))
    manifest = generate_fixture(workdir, FixtureSpec(
        n_images=10, image_size=128, min_points=20, max_points=150,
        train_fraction=1.0, seed=11))
    profile = aerial_profile(tile_size=128, crop_size=128, crops_per_unit=1,
                             augmentations=(), rng_seed=0)
    samples = list(generate_patches(split(manifest, "train"), profile))
    config = ModelConfig(encoder_channels=(16, 32, 64, 64, 64),
                         decoder_channels=(64, 64, 64, 32, 32),
                         use_pretrained_encoder=False)
    model = initialize(build(config), seed=0)
    train(model, samples,
          TrainConfig(learning_rate=2e-3, batch_size=10, max_steps=300, seed=0))

# one large scene the training fixture never saw
scene_dir = Path(tempfile.mkdtemp(prefix="scene_"))
manifest = generate_fixture(scene_dir, FixtureSpec(
    n_images=1, image_size=512, min_points=150, max_points=250,
    train_fraction=1.0, seed=23))
record = manifest.records[0]
image = load_image(record)
true_count = load_annotations(record).count
print(f"\nscene {record.id}: {image.shape[1]}x{image.shape[0]} px, "
      f"{true_count} people")

whole = predict_padded(model, image)
tiled = predict_tiled(model, image, tile=256, overlap=0.25, audit_coverage=True)
count_whole = count_from_map(whole.density_low)
count_tiled = count_from_map(tiled.density_low)
print(f"whole-image count {count_whole:8.2f}")
print(f"tiled count       {count_tiled:8.2f}  "
      f"(difference {abs(count_whole - count_tiled) / count_whole:.3%}, "
      "every output pixel audited as written exactly once)")

# detection: the low head says how many, the high head says where
high = DensityMap(values=tiled.density_high, image_id=record.id,
                  resolution_divisor=1)
target = round(count_tiled)
detections = detect_persons(high, target_count=target,
                            min_sep_px=sigma_from_gsd(record.gsd))
result = match_detections(detections, load_annotations(record), record.gsd)
print(f"\n{len(detections)} detections for target {target}")
print(f"matched within 0.5 m: {len(result.matches)}")
print(f"precision {result.precision:.3f}  recall {result.recall:.3f}  "
      f"f1 {result.f1:.3f}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out = Path(__file__).parent / "output"
    out.mkdir(exist_ok=True)
    gt_points = load_annotations(record).points
    det = np.array([(x, y) for x, y, _ in detections]) if len(detections) else np.empty((0, 2))
    fig, axes = plt.subplots(1, 2, figsize=(13, 6.6))
    axes[0].imshow(image)
    axes[0].imshow(tiled.density_high, cmap="inferno", alpha=0.5)
    axes[0].set_title("stitched density over the scene")
    axes[1].imshow(image)
    axes[1].scatter(gt_points[:, 0], gt_points[:, 1], s=26, facecolors="none",
                    edgecolors="lime", linewidths=0.9, label="ground truth")
    if len(det):
        axes[1].scatter(det[:, 0], det[:, 1], s=14, marker="x", c="red",
                        linewidths=0.9, label="detections")
    axes[1].legend(loc="lower right")
    axes[1].set_title("people found in the density map")
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(out / "tiled_inference_and_detection.png", dpi=110)
    print(f"figure saved to {out / 'tiled_inference_and_detection.png'}")
except ImportError:
    print("matplotlib not installed, skipping the figure")
