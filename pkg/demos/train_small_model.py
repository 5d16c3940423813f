"""
Training a reduced model on a synthetic corpus
===============================================

A complete training loop at desk scale: generate a fixture, cut patches,
optimize the two-head loss, and watch the counting error on the training
images collapse. Takes a few minutes on a laptop CPU.
"""

import tempfile
from pathlib import Path

from crowdmap import (
    FixtureSpec,
    LossConfig,
    ModelConfig,
    TrainConfig,
    build,
    generate_fixture,
    initialize,
    predict_padded,
    split,
    train,
    validate,
)
from crowdmap.patches import aerial_profile, generate_patches

workdir = Path(tempfile.mkdtemp(prefix="train_demo_"))
manifest = generate_fixture(workdir, FixtureSpec(
    n_images=10, image_size=128, min_points=20, max_points=150,
    train_fraction=1.0, seed=11))
records = split(manifest, "train")

profile = aerial_profile(tile_size=128, crop_size=128, crops_per_unit=1,
                         augmentations=(), rng_seed=0)
samples = list(generate_patches(records, profile))
print(f"{len(samples)} full-image patches, "
      f"counts {min(s.gt_full.count() for s in samples):.0f}.."
      f"{max(s.gt_full.count() for s in samples):.0f}")

# narrower than the published widths so the CPU run stays short; the
# architecture is otherwise identical
config = ModelConfig(encoder_channels=(16, 32, 64, 64, 64),
                     decoder_channels=(64, 64, 64, 32, 32),
                     use_pretrained_encoder=False)
model = initialize(build(config), seed=0)

out_dir = Path(__file__).parent / "output" / "small_run"
result = train(model, samples,
               TrainConfig(learning_rate=2e-3, batch_size=10, max_steps=300, seed=0),
               LossConfig(), out_dir=out_dir)

for row in result.log[:: max(1, len(result.log) // 10)]:
    print(f"  step {row.step:4d}  total {row.total:.5f}  "
          f"low {row.loss_low:.5f}  high {row.loss_high:.6f}")

report = validate(model, records, predict_fn=lambda m, img: predict_padded(m, img))
print("\ncounting on the training images after training:")
for image_id, true_count, predicted in report.per_image:
    print(f"  {image_id}: true {true_count:5.0f}  predicted {predicted:8.2f}")
print(f"MAE {report.mae:.2f}   MNAE {report.mnae:.4f}   RMSE {report.rmse:.2f}")
print(f"checkpoint and loss log under {out_dir}")
