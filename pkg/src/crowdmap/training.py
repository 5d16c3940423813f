"""Optimization loop, validation, and training diagnostics.

The trainer consumes a fixed list of patches, shuffles it with a seeded
generator each epoch, and steps Adam on the composite two-head loss. Every
step appends (step, total, loss_low, loss_high) to an in-memory log and,
when a run directory is given, to an append-only CSV; checkpoints are
written atomically at a configurable cadence. A non-finite loss aborts the
run immediately with the indices of the offending samples.

Gradient accumulation reproduces a large effective batch on small memory:
the effective batch is split into equal micro-batches whose scaled losses
are backpropagated before a single optimizer step, which matches the
direct large-batch gradient exactly (up to float addition order).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import ImageRecord, load_annotations, load_image
from .errors import TrainingDivergedError
from .evaluation import MetricsReport, counting_metrics
from .inference import count_from_map, predict_tiled
from .losses import LossConfig, total_loss
from .model import MultiResolutionDensityNet, save_checkpoint
from .patches import PatchSample


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-6
    batch_size: int = 60          # aerial recipe; cctv runs use 40
    max_steps: int = 1000
    seed: int = 0
    accumulation_steps: int = 1
    checkpoint_every: int = 0     # 0 disables periodic checkpoints
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    device: str = "cpu"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.accumulation_steps < 1:
            raise ValueError(f"accumulation_steps must be >= 1, got {self.accumulation_steps}")
        if self.batch_size % self.accumulation_steps:
            raise ValueError(
                f"batch_size {self.batch_size} must divide evenly into "
                f"{self.accumulation_steps} accumulation slices")


@dataclass
class LogRow:
    step: int
    total: float
    loss_low: float
    loss_high: float


@dataclass
class TrainResult:
    log: list[LogRow]
    final_checkpoint: Path | None
    log_path: Path | None


def collate(samples: list[PatchSample], device: str | torch.device = "cpu"):
    """Stack patches into (images, gt_low, gt_high) training tensors."""
    shapes = {s.image_crop.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"cannot batch mixed patch sizes: {sorted(shapes)}")
    x = torch.from_numpy(np.stack([np.moveaxis(s.image_crop, -1, 0) for s in samples]))
    low = torch.from_numpy(np.stack([s.gt_low.values[None] for s in samples]))
    high = torch.from_numpy(np.stack([s.gt_full.values[None] for s in samples]))
    return x.to(device), low.to(device), high.to(device)


def train(model: MultiResolutionDensityNet, samples: list[PatchSample],
          train_config: TrainConfig, loss_config: LossConfig = LossConfig(),
          out_dir: str | Path | None = None) -> TrainResult:
    """Optimize ``model`` in place over a cached sample list."""
    if not samples:
        raise ValueError("training needs a non-empty sample list")
    cfg = train_config
    device = torch.device(cfg.device)
    model.to(device).train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                                 betas=cfg.adam_betas, eps=cfg.adam_eps)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_file = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.csv"
        new_file = not log_path.exists() or log_path.stat().st_size == 0
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new_file:
            writer.writerow(["step", "total", "loss_low", "loss_high"])

    order_rng = np.random.default_rng(cfg.seed)
    micro = cfg.batch_size // cfg.accumulation_steps
    log: list[LogRow] = []
    final_checkpoint = None

    try:
        batches = _batch_indices(len(samples), cfg, order_rng)
        for step in range(cfg.max_steps):
            batch_idx = next(batches)
            optimizer.zero_grad(set_to_none=True)
            tot_v = low_v = high_v = 0.0
            for k in range(cfg.accumulation_steps):
                part = batch_idx[k * micro:(k + 1) * micro]
                x, gt_low, gt_high = collate([samples[i] for i in part], device)
                pred_low, pred_high = model(x)
                tot, l_low, l_high = total_loss(pred_low, pred_high, gt_low, gt_high,
                                                loss_config)
                (tot / cfg.accumulation_steps).backward()
                tot_v += tot.item() / cfg.accumulation_steps
                low_v += l_low.item() / cfg.accumulation_steps
                high_v += l_high.item() / cfg.accumulation_steps

            if not np.isfinite(tot_v):
                raise TrainingDivergedError(
                    step=step, sample_indices=list(batch_idx),
                    message=f"non-finite loss {tot_v} at step {step}")
            optimizer.step()

            log.append(LogRow(step=step, total=tot_v, loss_low=low_v, loss_high=high_v))
            if writer is not None:
                writer.writerow([step, f"{tot_v:.8g}", f"{low_v:.8g}", f"{high_v:.8g}"])
                log_file.flush()
            if out_dir is not None and cfg.checkpoint_every and \
                    (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"step_{step + 1:06d}.ckpt",
                                extra={"step": step + 1})
        if out_dir is not None:
            final_checkpoint = out_dir / "final.ckpt"
            save_checkpoint(model, final_checkpoint,
                            extra={"step": cfg.max_steps, "finished": True})
    finally:
        if log_file is not None:
            log_file.close()

    return TrainResult(log=log, final_checkpoint=final_checkpoint, log_path=log_path)


def _batch_indices(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Yield index arrays of size batch_size, reshuffling every epoch.

    Small sample sets are tiled up to the batch size so one batch can span
    several passes over the data.
    """
    pool = np.empty(0, dtype=np.int64)
    while True:
        while len(pool) < cfg.batch_size:
            pool = np.concatenate([pool, rng.permutation(n)])
        yield pool[:cfg.batch_size]
        pool = pool[cfg.batch_size:]


def validate(model: MultiResolutionDensityNet, records: list[ImageRecord],
             tile: int = 1024, overlap: float = 0.25,
             device: str = "cpu", predict_fn=None) -> MetricsReport:
    """Counting metrics over full images via tiled inference.

    ``predict_fn(model, image) -> ModelOutput`` can replace the tiled
    predictor (tests use oracle stubs).
    """
    if not records:
        raise ValueError("validate needs at least one record")
    if predict_fn is None:
        def predict_fn(m, image):
            return predict_tiled(m, image, tile=tile, overlap=overlap, device=device)

    pairs = []
    for record in records:
        image = load_image(record)
        true_count = load_annotations(record).count
        output = predict_fn(model, image)
        pairs.append((record.id, float(true_count), count_from_map(output.density_low)))
    return counting_metrics(pairs)
