"""Training patch production.

Two recipes are supported, mirroring how aerial and CCTV corpora differ:

* aerial: tile each large image on a fixed grid with overlap, then cut two
  random crops per tile, keeping one as-is and applying one randomly chosen
  geometric augmentation (rotation, flip, or mild rescale) to the other.
* cctv: cut a fixed number of random crops per image, flip each one
  left-right with a fixed probability, and convert to replicated-channel
  grayscale.

Ground truth follows every geometric transform applied to the pixels, so a
patch's density map always describes exactly the pixels it ships with. Each
sample also carries a low-resolution ground truth produced by 4x sum
pooling, matching the resolution of the model's counting head.

Randomness is owned per tile: the stream for tile ``t`` of image ``i`` is
derived from ``(base seed, crc32(i), t)``, so any tile's samples can be
reproduced in isolation and workers never share state.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import cv2
import numpy as np

from .dataset import ImageRecord, load_annotations, load_image
from .density import DensityMap, GaussianSpec, downsample_density, render_density, rescale_density

AERIAL_AUGMENTATIONS = ("rot90", "rot180", "rot270", "flip_lr", "flip_ud",
                        "upscale", "downscale")
SCALE_FACTORS = {"upscale": 1.25, "downscale": 0.75}
LOW_RES_FACTOR = 4
# five 2x poolings in the encoder
PATCH_SIZE_MULTIPLE = 32

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class Provenance:
    source_id: str
    tile_origin: tuple[int, int]
    crop_origin: tuple[int, int]
    augmentations: tuple[str, ...] = ()


@dataclass
class PatchSample:
    image_crop: np.ndarray       # (h, w, 3) float32 in [0, 1]
    gt_full: DensityMap          # (h, w)
    gt_low: DensityMap           # (h/4, w/4)
    provenance: Provenance


@dataclass(frozen=True)
class PipelineProfile:
    """One corpus's patch recipe; part of the run configuration."""

    mode: str
    tile_size: int = 320
    tile_overlap: float = 0.5
    crop_size: int = 256
    crops_per_unit: int = 2
    augmentations: tuple[str, ...] = AERIAL_AUGMENTATIONS
    flip_probability: float = 0.3
    grayscale: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("aerial", "cctv"):
            raise ValueError(f"mode must be 'aerial' or 'cctv', got {self.mode!r}")
        if self.crop_size % PATCH_SIZE_MULTIPLE:
            raise ValueError(
                f"crop_size must be a multiple of {PATCH_SIZE_MULTIPLE} "
                f"(encoder downsamples five times), got {self.crop_size}")
        if self.mode == "aerial" and self.crop_size > self.tile_size:
            raise ValueError(
                f"crop_size {self.crop_size} exceeds tile_size {self.tile_size}")
        if not 0.0 <= self.tile_overlap < 1.0:
            raise ValueError(f"tile_overlap must lie in [0, 1), got {self.tile_overlap}")
        if self.crops_per_unit < 1:
            raise ValueError(f"crops_per_unit must be >= 1, got {self.crops_per_unit}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        unknown = set(self.augmentations) - set(AERIAL_AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")


def aerial_profile(**overrides) -> PipelineProfile:
    return PipelineProfile(mode="aerial", **overrides)


def cctv_profile(**overrides) -> PipelineProfile:
    defaults = dict(crop_size=224, crops_per_unit=20, grayscale=True,
                    augmentations=(), flip_probability=0.3)
    defaults.update(overrides)
    return PipelineProfile(mode="cctv", **defaults)


def tile_origins(shape: tuple[int, int], tile: int, overlap: float) -> list[tuple[int, int]]:
    """Grid origins (row, col) covering ``shape`` with a tile of side ``tile``.

    The stride is ``tile * (1 - overlap)``. When the regular grid stops short
    of a border, the final origin is clamped to ``dim - tile`` so the last
    tile ends exactly at the edge; if clamping the existing origin would open
    a gap, an extra clamped origin is appended instead.
    """
    h, w = shape
    if tile > min(h, w):
        raise ValueError(f"tile {tile} larger than image {w}x{h}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    stride = max(1, int(round(tile * (1.0 - overlap))))
    return [(r, c) for r in axis_origins(h, tile, stride)
            for c in axis_origins(w, tile, stride)]


def axis_origins(dim: int, tile: int, stride: int) -> list[int]:
    """Strictly increasing origins along one axis; see tile_origins."""
    origins = list(range(0, dim - tile + 1, stride))
    last = dim - tile
    if origins[-1] == last:
        return origins
    # grid stops short of the border: clamp the final origin outward, unless
    # the previous tile no longer reaches it (then keep both)
    if len(origins) > 1 and origins[-2] + tile >= last:
        origins[-1] = last
    else:
        origins.append(last)
    return origins


def tile_image(record: ImageRecord, tile: int, overlap: float) -> list[tuple[int, int]]:
    return tile_origins((record.height, record.width), tile, overlap)


@dataclass
class Tile:
    image: np.ndarray
    gt: DensityMap
    source_id: str
    origin: tuple[int, int]


def rng_for_tile(seed: int, image_id: str, tile_index: int) -> np.random.Generator:
    """Independent stream for one tile, reproducible in isolation."""
    key = np.random.SeedSequence([int(seed), zlib.crc32(image_id.encode()), int(tile_index)])
    return np.random.default_rng(key)


def sample_aerial(tile: Tile, profile: PipelineProfile,
                  rng: np.random.Generator) -> list[PatchSample]:
    """Two crops per tile: the first untouched, the second augmented."""
    if profile.mode != "aerial":
        raise ValueError(f"aerial sampler given profile mode {profile.mode!r}")
    samples = []
    for k in range(profile.crops_per_unit):
        crop_img, crop_gt, origin = _random_crop(tile.image, tile.gt, profile.crop_size, rng)
        tags = ()
        if k % 2 == 1 and profile.augmentations:
            tag = str(rng.choice(profile.augmentations))
            crop_img, crop_gt = apply_augmentation(crop_img, crop_gt, tag)
            tags = (tag,)
        samples.append(_finish(crop_img, crop_gt, Provenance(
            source_id=tile.source_id, tile_origin=tile.origin,
            crop_origin=origin, augmentations=tags)))
    return samples


def sample_cctv(image: np.ndarray, gt: DensityMap, profile: PipelineProfile,
                rng: np.random.Generator, source_id: str) -> list[PatchSample]:
    """Random crops with probabilistic left-right flips and grayscale pixels."""
    if profile.mode != "cctv":
        raise ValueError(f"cctv sampler given profile mode {profile.mode!r}")
    image, gt = pad_to_minimum(image, gt, profile.crop_size)
    samples = []
    for _ in range(profile.crops_per_unit):
        crop_img, crop_gt, origin = _random_crop(image, gt, profile.crop_size, rng)
        tags = ()
        if rng.random() < profile.flip_probability:
            crop_img, crop_gt = apply_augmentation(crop_img, crop_gt, "flip_lr")
            tags = ("flip_lr",)
        if profile.grayscale:
            crop_img = to_grayscale(crop_img)
        samples.append(_finish(crop_img, crop_gt, Provenance(
            source_id=source_id, tile_origin=(0, 0), crop_origin=origin,
            augmentations=tags)))
    return samples


def generate_patches(records: Iterable[ImageRecord], profile: PipelineProfile,
                     seed: int | None = None) -> Iterator[PatchSample]:
    """Full pipeline over whole records: load, render GT once, tile, sample."""
    base_seed = profile.rng_seed if seed is None else seed
    for record in records:
        image = load_image(record)
        ann = load_annotations(record)
        spec = (GaussianSpec.from_gsd(record.gsd) if record.gsd is not None
                else GaussianSpec.from_points(ann.points))
        gt = render_density(ann.points, (record.height, record.width), spec,
                            image_id=record.id)
        if profile.mode == "aerial":
            image, gt = pad_to_minimum(image, gt, profile.tile_size)
            origins = tile_origins(image.shape[:2], profile.tile_size, profile.tile_overlap)
            for tile_index, (r, c) in enumerate(origins):
                t = profile.tile_size
                tile = Tile(image=image[r:r + t, c:c + t],
                            gt=DensityMap(values=gt.values[r:r + t, c:c + t].copy(),
                                          image_id=record.id,
                                          resolution_divisor=gt.resolution_divisor),
                            source_id=record.id, origin=(r, c))
                yield from sample_aerial(tile, profile,
                                         rng_for_tile(base_seed, record.id, tile_index))
        else:
            yield from sample_cctv(image, gt, profile,
                                   rng_for_tile(base_seed, record.id, 0), record.id)


def pad_to_minimum(image: np.ndarray, gt: DensityMap,
                   minimum: int) -> tuple[np.ndarray, DensityMap]:
    """Reflect-pad image and ground truth together up to ``minimum`` per side.

    Both are padded with the same reflection so mirrored pixels carry the
    mirrored density; anything else would teach the model to ignore people.
    """
    h, w = image.shape[:2]
    pad_h, pad_w = max(0, minimum - h), max(0, minimum - w)
    if not pad_h and not pad_w:
        return image, gt
    spec = ((0, pad_h), (0, pad_w))
    padded_img = np.pad(image, spec + ((0, 0),), mode="reflect")
    padded_gt = np.pad(gt.values, spec, mode="reflect")
    return padded_img, DensityMap(values=padded_gt, image_id=gt.image_id,
                                  resolution_divisor=gt.resolution_divisor)


def _random_crop(image: np.ndarray, gt: DensityMap, size: int,
                 rng: np.random.Generator):
    h, w = image.shape[:2]
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    crop_img = np.ascontiguousarray(image[r:r + size, c:c + size])
    crop_gt = gt.values[r:r + size, c:c + size].copy()
    return crop_img, crop_gt, (r, c)


def apply_augmentation(image: np.ndarray, gt_values: np.ndarray,
                       tag: str) -> tuple[np.ndarray, np.ndarray]:
    """Apply one named geometric transform to a patch and its density."""
    if tag == "rot90":
        return np.rot90(image, 1).copy(), np.rot90(gt_values, 1).copy()
    if tag == "rot180":
        return np.rot90(image, 2).copy(), np.rot90(gt_values, 2).copy()
    if tag == "rot270":
        return np.rot90(image, 3).copy(), np.rot90(gt_values, 3).copy()
    if tag == "flip_lr":
        return np.fliplr(image).copy(), np.fliplr(gt_values).copy()
    if tag == "flip_ud":
        return np.flipud(image).copy(), np.flipud(gt_values).copy()
    if tag in SCALE_FACTORS:
        return _rescale_patch(image, gt_values, SCALE_FACTORS[tag])
    raise ValueError(f"unknown augmentation {tag!r}")


def _rescale_patch(image: np.ndarray, gt_values: np.ndarray,
                   scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Rescale then center-crop or reflect-pad back to the original size."""
    size = image.shape[0]
    new = int(round(size * scale))
    img = cv2.resize(image, (new, new), interpolation=cv2.INTER_LINEAR)
    gt = rescale_density(gt_values, scale)
    if gt.shape != (new, new):  # rounding of the two paths must agree
        gt = gt[:new, :new]
    if new >= size:
        off = (new - size) // 2
        img = img[off:off + size, off:off + size]
        gt = gt[off:off + size, off:off + size]
    else:
        before = (size - new) // 2
        after = size - new - before
        img = np.pad(img, ((before, after), (before, after), (0, 0)), mode="reflect")
        gt = np.pad(gt, ((before, after), (before, after)), mode="reflect")
    return np.ascontiguousarray(img), np.ascontiguousarray(gt)


def transform_points(points: np.ndarray, tag: str, size: int) -> np.ndarray:
    """Transform (x, y) coordinates the same way ``apply_augmentation`` moves
    pixels of a ``size`` x ``size`` patch. Used to cross-check alignment."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    if tag == "rot90":       # counter-clockwise, like np.rot90
        pts[:, 0], pts[:, 1] = y, size - x
    elif tag == "rot180":
        pts[:, 0], pts[:, 1] = size - x, size - y
    elif tag == "rot270":
        pts[:, 0], pts[:, 1] = size - y, x
    elif tag == "flip_lr":
        pts[:, 0] = size - x
    elif tag == "flip_ud":
        pts[:, 1] = size - y
    elif tag in SCALE_FACTORS:
        s = SCALE_FACTORS[tag]
        new = int(round(size * s))
        pts *= s
        if new >= size:
            pts -= (new - size) // 2
        else:
            pts += (size - new) // 2
    else:
        raise ValueError(f"unknown augmentation {tag!r}")
    return pts


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminance-weighted grayscale, replicated back to three channels."""
    gray = image @ GRAY_WEIGHTS
    return np.repeat(gray[:, :, None], 3, axis=2).astype(np.float32)


def _finish(image: np.ndarray, gt_values: np.ndarray, prov: Provenance) -> PatchSample:
    gt_full = DensityMap(values=np.ascontiguousarray(gt_values, dtype=np.float32),
                         image_id=prov.source_id, resolution_divisor=1)
    return PatchSample(
        image_crop=np.ascontiguousarray(image, dtype=np.float32),
        gt_full=gt_full,
        gt_low=downsample_density(gt_full, LOW_RES_FACTOR),
        provenance=prov,
    )
