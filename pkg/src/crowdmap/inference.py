"""Full-image prediction, including images far larger than one forward pass.

Small images go through ``predict_padded``: reflect-pad to the next multiple
of 32, forward once, crop back. Large aerial images go through
``predict_tiled``: overlapping tiles are predicted independently and
stitched by an ownership partition, where adjacent tiles split their overlap
at its midpoint so every output pixel is written by exactly one tile. That
keeps the total count additive (no density mass is ever blended or counted
twice) and makes the result independent of tile processing order.

The two heads live on different grids (full resolution and 1/4), so the
ownership partition is computed independently in each grid's own coordinate
space; tile origins are snapped to multiples of 4 to keep the low-resolution
grid aligned.
"""

from __future__ import annotations

import numpy as np
import torch

from .density import DensityMap
from .model import INPUT_MULTIPLE, LOW_RES_FACTOR, ModelOutput, MultiResolutionDensityNet
from .patches import axis_origins

DEFAULT_TILE = 1024
DEFAULT_OVERLAP = 0.25


def predict_padded(model: MultiResolutionDensityNet, image: np.ndarray,
                   device: str | torch.device = "cpu") -> ModelOutput:
    """Predict one image of any size >= 32 per side in a single pass."""
    h, w = image.shape[:2]
    if min(h, w) < INPUT_MULTIPLE:
        raise ValueError(f"image must be at least {INPUT_MULTIPLE}px per side, got {w}x{h}")
    pad_h = -h % INPUT_MULTIPLE
    pad_w = -w % INPUT_MULTIPLE
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") \
        if (pad_h or pad_w) else image

    low, high = _forward(model, padded, device)
    low_h = -(-h // LOW_RES_FACTOR)
    low_w = -(-w // LOW_RES_FACTOR)
    return ModelOutput(density_low=low[:low_h, :low_w], density_high=high[:h, :w])


def predict_tiled(model: MultiResolutionDensityNet, image: np.ndarray,
                  tile: int = DEFAULT_TILE, overlap: float = DEFAULT_OVERLAP,
                  device: str | torch.device = "cpu",
                  audit_coverage: bool = False) -> ModelOutput:
    """Predict an arbitrarily large image tile by tile.

    Falls back to a single padded pass when the tile does not fit inside the
    image. ``audit_coverage`` verifies the exactly-once write property and
    raises if it is ever violated.
    """
    if tile % INPUT_MULTIPLE:
        raise ValueError(f"tile must be divisible by {INPUT_MULTIPLE}, got {tile}")
    if not 0.0 < overlap <= 0.5:
        raise ValueError(f"overlap must lie in (0, 0.5], got {overlap}")
    h, w = image.shape[:2]
    if tile > min(h, w):
        return predict_padded(model, image, device)

    # pad so the low-res grid covers the image exactly, then snap the tile
    # stride to the low-res grid
    pad_h = -h % LOW_RES_FACTOR
    pad_w = -w % LOW_RES_FACTOR
    padded = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect") \
        if (pad_h or pad_w) else image
    ph, pw = padded.shape[:2]

    stride = max(LOW_RES_FACTOR,
                 int(tile * (1.0 - overlap)) // LOW_RES_FACTOR * LOW_RES_FACTOR)
    origins = axis_origins(ph, tile, stride), axis_origins(pw, tile, stride)

    high_out = np.zeros((ph, pw), dtype=np.float32)
    low_out = np.zeros((ph // LOW_RES_FACTOR, pw // LOW_RES_FACTOR), dtype=np.float32)
    high_hits = np.zeros_like(high_out, dtype=np.uint8) if audit_coverage else None
    low_hits = np.zeros_like(low_out, dtype=np.uint8) if audit_coverage else None

    own_rows = _ownership(origins[0], tile, ph)
    own_cols = _ownership(origins[1], tile, pw)
    own_rows_low = _ownership([o // LOW_RES_FACTOR for o in origins[0]],
                              tile // LOW_RES_FACTOR, ph // LOW_RES_FACTOR)
    own_cols_low = _ownership([o // LOW_RES_FACTOR for o in origins[1]],
                              tile // LOW_RES_FACTOR, pw // LOW_RES_FACTOR)

    for i, r in enumerate(origins[0]):
        for j, c in enumerate(origins[1]):
            low, high = _forward(model, padded[r:r + tile, c:c + tile], device)
            r0, r1 = own_rows[i]
            c0, c1 = own_cols[j]
            high_out[r0:r1, c0:c1] = high[r0 - r:r1 - r, c0 - c:c1 - c]
            lr, lc = r // LOW_RES_FACTOR, c // LOW_RES_FACTOR
            lr0, lr1 = own_rows_low[i]
            lc0, lc1 = own_cols_low[j]
            low_out[lr0:lr1, lc0:lc1] = low[lr0 - lr:lr1 - lr, lc0 - lc:lc1 - lc]
            if audit_coverage:
                high_hits[r0:r1, c0:c1] += 1
                low_hits[lr0:lr1, lc0:lc1] += 1

    if audit_coverage:
        for name, hits in (("high", high_hits), ("low", low_hits)):
            if not (hits == 1).all():
                raise RuntimeError(
                    f"{name}-resolution stitching wrote some pixels "
                    f"{hits.min()}..{hits.max()} times instead of exactly once")

    low_h = -(-h // LOW_RES_FACTOR)
    low_w = -(-w // LOW_RES_FACTOR)
    return ModelOutput(density_low=low_out[:low_h, :low_w],
                       density_high=high_out[:h, :w])


def count_from_map(density) -> float:
    """Total person count: the sum of the map, accumulated in float64."""
    if isinstance(density, DensityMap):
        return density.count()
    return float(np.asarray(density, dtype=np.float64).sum())


def _forward(model: MultiResolutionDensityNet, image: np.ndarray,
             device: str | torch.device) -> tuple[np.ndarray, np.ndarray]:
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(image, -1, 0), dtype=np.float32))
    model.eval()
    with torch.no_grad():
        low, high = model(x.unsqueeze(0).to(device))
    return low[0, 0].cpu().numpy(), high[0, 0].cpu().numpy()


def _ownership(origins: list[int], tile: int, dim: int) -> list[tuple[int, int]]:
    """Partition [0, dim) into per-tile spans, splitting overlaps midway."""
    bounds = [0]
    for prev, nxt in zip(origins, origins[1:]):
        bounds.append((nxt + prev + tile) // 2)
    bounds.append(dim)
    return list(zip(bounds[:-1], bounds[1:]))
