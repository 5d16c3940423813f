import numpy as np
import pytest

from crowdmap.dataset import split
from crowdmap.density import DensityMap, GaussianSpec, render_density
from crowdmap.patches import (
    SCALE_FACTORS,
    PipelineProfile,
    Tile,
    aerial_profile,
    apply_augmentation,
    cctv_profile,
    generate_patches,
    pad_to_minimum,
    rng_for_tile,
    sample_aerial,
    sample_cctv,
    tile_origins,
    transform_points,
)


class TestTileOrigins:
    def test_even_grid_with_half_overlap(self):
        origins = tile_origins((640, 640), 320, 0.5)
        assert len(origins) == 9
        rows = sorted({r for r, _ in origins})
        assert rows == [0, 160, 320]

    def test_exact_fit_single_tile(self):
        assert tile_origins((320, 320), 320, 0.5) == [(0, 0)]
        assert tile_origins((320, 320), 320, 0.0) == [(0, 0)]

    def test_final_origin_clamped_to_border(self):
        origins = tile_origins((500, 320), 320, 0.5)
        assert origins == [(0, 0), (180, 0)]

    def test_extra_origin_added_when_clamping_would_gap(self):
        # stride 240: clamping 480 to 680 would leave [560, 680) uncovered
        origins = tile_origins((1000, 320), 320, 0.25)
        assert sorted({r for r, c in origins}) == [0, 240, 480, 680]

    @pytest.mark.parametrize("dim,tile,overlap", [
        (640, 320, 0.5), (500, 320, 0.5), (1000, 320, 0.25),
        (331, 64, 0.0), (97, 32, 0.9), (129, 128, 0.5),
    ])
    def test_full_coverage_no_overrun(self, dim, tile, overlap):
        origins = tile_origins((dim, dim), tile, overlap)
        covered = np.zeros(dim, dtype=bool)
        for r, c in origins:
            assert 0 <= r <= dim - tile and 0 <= c <= dim - tile
            covered[r:r + tile] = True
        assert covered.all()

    def test_tile_larger_than_image_rejected(self):
        with pytest.raises(ValueError, match="larger"):
            tile_origins((300, 640), 320, 0.5)

    def test_bad_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            tile_origins((640, 640), 320, 1.0)


class TestPipelineProfile:
    def test_aerial_defaults(self):
        p = aerial_profile()
        assert (p.tile_size, p.tile_overlap, p.crop_size, p.crops_per_unit) == (320, 0.5, 256, 2)
        assert len(p.augmentations) == 7

    def test_cctv_defaults(self):
        p = cctv_profile()
        assert (p.crop_size, p.crops_per_unit, p.grayscale) == (224, 20, True)
        assert p.flip_probability == 0.3

    def test_crop_must_fit_tile(self):
        with pytest.raises(ValueError, match="crop_size"):
            aerial_profile(tile_size=128, crop_size=256)

    def test_crop_must_be_multiple_of_32(self):
        with pytest.raises(ValueError, match="multiple of 32"):
            cctv_profile(crop_size=100)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            PipelineProfile(mode="drone")

    def test_unknown_augmentation(self):
        with pytest.raises(ValueError, match="unknown aug"):
            aerial_profile(augmentations=("rot45",))


def make_tile(size=320, n_points=30, seed=3, source="img"):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(0, size, n_points),
                           rng.uniform(0, size, n_points)])
    gt = render_density(pts, (size, size),
                        GaussianSpec(mode="gsd_adaptive", sigma_px=2.0), image_id=source)
    image = rng.random((size, size, 3)).astype(np.float32)
    return Tile(image=image, gt=gt, source_id=source, origin=(0, 0)), pts


class TestSampleAerial:
    def test_two_crops_one_augmented(self):
        tile, _ = make_tile()
        samples = sample_aerial(tile, aerial_profile(), rng_for_tile(0, "img", 0))
        assert len(samples) == 2
        plain, augmented = samples
        assert plain.image_crop.shape == (256, 256, 3)
        assert plain.gt_full.shape == (256, 256)
        assert plain.gt_low.shape == (64, 64)
        assert plain.provenance.augmentations == ()
        assert len(augmented.provenance.augmentations) == 1
        assert augmented.provenance.augmentations[0] in aerial_profile().augmentations

    def test_low_res_gt_mass_matches_full(self):
        tile, _ = make_tile()
        for s in sample_aerial(tile, aerial_profile(), rng_for_tile(1, "img", 0)):
            assert s.gt_low.count() == pytest.approx(s.gt_full.count(), abs=1e-4)
            assert s.gt_low.resolution_divisor == 4

    def test_plain_crop_is_window_of_tile_gt(self):
        tile, _ = make_tile()
        s = sample_aerial(tile, aerial_profile(), rng_for_tile(2, "img", 0))[0]
        r, c = s.provenance.crop_origin
        np.testing.assert_array_equal(s.gt_full.values,
                                      tile.gt.values[r:r + 256, c:c + 256])
        np.testing.assert_array_equal(s.image_crop, tile.image[r:r + 256, c:c + 256])

    def test_deterministic_under_fixed_seed(self):
        tile, _ = make_tile()
        a = sample_aerial(tile, aerial_profile(), rng_for_tile(5, "img", 3))
        b = sample_aerial(tile, aerial_profile(), rng_for_tile(5, "img", 3))
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image_crop, sb.image_crop)
            np.testing.assert_array_equal(sa.gt_full.values, sb.gt_full.values)
            assert sa.provenance == sb.provenance

    def test_streams_differ_across_tiles(self):
        tile, _ = make_tile()
        a = sample_aerial(tile, aerial_profile(), rng_for_tile(5, "img", 0))
        b = sample_aerial(tile, aerial_profile(), rng_for_tile(5, "img", 1))
        assert a[0].provenance.crop_origin != b[0].provenance.crop_origin


class TestAugmentationAlignment:
    """Transforming the rendered GT must equal rendering transformed points."""

    def setup_method(self):
        rng = np.random.default_rng(42)
        self.size, self.sigma = 256, 2.0
        self.pts = np.column_stack([rng.uniform(60, 196, 12), rng.uniform(60, 196, 12)])
        self.spec = GaussianSpec(mode="gsd_adaptive", sigma_px=self.sigma)
        self.gt = render_density(self.pts, (self.size, self.size), self.spec,
                                 image_id="t").values
        self.img = rng.random((self.size, self.size, 3)).astype(np.float32)

    @pytest.mark.parametrize("tag", ["rot90", "rot180", "rot270", "flip_lr", "flip_ud"])
    def test_rotation_and_flip_exact(self, tag):
        _, gt_t = apply_augmentation(self.img, self.gt, tag)
        pts_t = transform_points(self.pts, tag, self.size)
        gt_re = render_density(pts_t, (self.size, self.size), self.spec,
                               image_id="t").values
        np.testing.assert_allclose(gt_t, gt_re, atol=1e-4)
        assert gt_t.sum() == pytest.approx(self.gt.sum(), abs=1e-4)

    @pytest.mark.parametrize("tag", ["upscale", "downscale"])
    def test_scaling_matches_wider_kernel_render(self, tag):
        # away from the crop/pad border, scaled density approximates a render
        # with sigma scaled by the same factor
        s = SCALE_FACTORS[tag]
        _, gt_t = apply_augmentation(self.img, self.gt, tag)
        pts_t = transform_points(self.pts, tag, self.size)
        wider = GaussianSpec(mode="gsd_adaptive", sigma_px=self.sigma * s)
        gt_re = render_density(pts_t, (self.size, self.size), wider, image_id="t").values
        m = 48
        np.testing.assert_allclose(gt_t[m:-m, m:-m], gt_re[m:-m, m:-m], atol=1e-2)

    def test_scaling_preserves_interior_mass(self):
        # all kernels are interior, so crop-back loses nothing material
        for tag in ("upscale", "downscale"):
            _, gt_t = apply_augmentation(self.img, self.gt, tag)
            assert gt_t.sum() == pytest.approx(self.gt.sum(), abs=1e-3), tag

    def test_rot180_is_an_involution(self):
        img_1, gt_1 = apply_augmentation(self.img, self.gt, "rot180")
        img_2, gt_2 = apply_augmentation(img_1, gt_1, "rot180")
        np.testing.assert_array_equal(img_2, self.img)
        np.testing.assert_array_equal(gt_2, self.gt)

    def test_transform_points_spot_values(self):
        assert transform_points([(10.0, 20.0)], "rot90", 100).tolist() == [[20.0, 90.0]]
        assert transform_points([(10.0, 20.0)], "flip_lr", 100).tolist() == [[90.0, 20.0]]
        assert transform_points([(10.0, 20.0)], "rot270", 100).tolist() == [[80.0, 10.0]]


class TestSampleCctv:
    def make_scene(self, size=256, seed=9):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(0, size, 40), rng.uniform(0, size, 40)])
        gt = render_density(pts, (size, size),
                            GaussianSpec(mode="gsd_adaptive", sigma_px=2.0), image_id="cam")
        return rng.random((size, size, 3)).astype(np.float32), gt

    def test_twenty_crops_of_224(self):
        img, gt = self.make_scene(400)
        samples = sample_cctv(img, gt, cctv_profile(), rng_for_tile(0, "cam", 0), "cam")
        assert len(samples) == 20
        assert all(s.image_crop.shape == (224, 224, 3) for s in samples)
        assert all(s.gt_low.shape == (56, 56) for s in samples)

    def test_grayscale_replicated_channels(self):
        img, gt = self.make_scene()
        s = sample_cctv(img, gt, cctv_profile(), rng_for_tile(0, "cam", 0), "cam")[0]
        np.testing.assert_array_equal(s.image_crop[..., 0], s.image_crop[..., 1])
        np.testing.assert_array_equal(s.image_crop[..., 0], s.image_crop[..., 2])
        # luminance weighting, not a channel mean
        r, c = s.provenance.crop_origin
        flipped = "flip_lr" in s.provenance.augmentations
        crop = img[r:r + 224, c:c + 224]
        if flipped:
            crop = np.fliplr(crop)
        expected = crop @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        np.testing.assert_allclose(s.image_crop[..., 0], expected, atol=1e-6)

    def test_flip_fraction_concentrates_near_point_three(self):
        img, gt = self.make_scene(64, seed=1)
        profile = cctv_profile(crop_size=32, crops_per_unit=20)
        flips = total = 0
        for i in range(500):
            for s in sample_cctv(img, gt, profile, rng_for_tile(11, "cam", i), "cam"):
                flips += bool(s.provenance.augmentations)
                total += 1
        assert total == 10_000
        assert 0.28 <= flips / total <= 0.32

    def test_identical_seeds_identical_streams(self):
        img, gt = self.make_scene()
        a = sample_cctv(img, gt, cctv_profile(), rng_for_tile(4, "cam", 0), "cam")
        b = sample_cctv(img, gt, cctv_profile(), rng_for_tile(4, "cam", 0), "cam")
        for sa, sb in zip(a, b):
            assert sa.image_crop.tobytes() == sb.image_crop.tobytes()
            assert sa.gt_full.values.tobytes() == sb.gt_full.values.tobytes()

    def test_small_image_reflect_padded(self):
        img, gt = self.make_scene(150)
        samples = sample_cctv(img, gt, cctv_profile(), rng_for_tile(0, "cam", 0), "cam")
        assert all(s.image_crop.shape == (224, 224, 3) for s in samples)

    def test_flip_moves_gt_with_pixels(self):
        img, gt = self.make_scene()
        profile = cctv_profile(flip_probability=1.0, grayscale=False, crops_per_unit=1)
        s = sample_cctv(img, gt, profile, rng_for_tile(0, "cam", 0), "cam")[0]
        r, c = s.provenance.crop_origin
        np.testing.assert_array_equal(s.image_crop, np.fliplr(img[r:r + 224, c:c + 224]))
        np.testing.assert_array_equal(s.gt_full.values, np.fliplr(gt.values[r:r + 224, c:c + 224]))


class TestPadToMinimum:
    def test_pads_image_and_gt_together(self):
        rng = np.random.default_rng(0)
        img = rng.random((100, 90, 3)).astype(np.float32)
        gt = DensityMap(values=rng.random((100, 90)).astype(np.float32),
                        image_id="a", resolution_divisor=1)
        pimg, pgt = pad_to_minimum(img, gt, 128)
        assert pimg.shape == (128, 128, 3)
        assert pgt.shape == (128, 128)
        # reflection: padded row mirrors the interior
        np.testing.assert_array_equal(pimg[100], pimg[98])
        np.testing.assert_array_equal(pgt.values[:, 90], pgt.values[:, 88])

    def test_noop_when_large_enough(self):
        img = np.zeros((128, 128, 3), np.float32)
        gt = DensityMap(values=np.zeros((128, 128), np.float32), image_id="a",
                        resolution_divisor=1)
        pimg, pgt = pad_to_minimum(img, gt, 128)
        assert pimg is img and pgt is gt


class TestGeneratePatches:
    def test_end_to_end_over_corpus(self, corpus):
        _, manifest = corpus
        profile = aerial_profile(tile_size=128, crop_size=96, rng_seed=0)
        samples = list(generate_patches(split(manifest, "train"), profile))
        n_train = len(split(manifest, "train"))
        assert len(samples) == 2 * n_train  # 128px images give one tile each
        assert all(s.image_crop.shape == (96, 96, 3) for s in samples)
        assert all(s.gt_low.shape == (24, 24) for s in samples)
        ids = {s.provenance.source_id for s in samples}
        assert ids == {r.id for r in split(manifest, "train")}

    def test_tile_samples_reproducible_in_isolation(self, corpus):
        _, manifest = corpus
        profile = aerial_profile(tile_size=96, crop_size=32, rng_seed=123)
        all_samples = list(generate_patches(manifest.records[:1], profile))
        # image is 128px, tile 96, stride 48 -> axis origins [0, 32]; 4 tiles
        assert len(all_samples) == 8
        record = manifest.records[0]
        replay = sample_aerial(
            _tile_for(record, profile, tile_index=2),
            profile, rng_for_tile(123, record.id, 2))
        for got, want in zip(all_samples[4:6], replay):
            np.testing.assert_array_equal(got.image_crop, want.image_crop)
            assert got.provenance == want.provenance


def _tile_for(record, profile, tile_index):
    from crowdmap.dataset import load_annotations, load_image
    from crowdmap.density import GaussianSpec, render_density

    image = load_image(record)
    ann = load_annotations(record)
    spec = GaussianSpec.from_gsd(record.gsd)
    gt = render_density(ann.points, (record.height, record.width), spec, image_id=record.id)
    origins = tile_origins(image.shape[:2], profile.tile_size, profile.tile_overlap)
    r, c = origins[tile_index]
    t = profile.tile_size
    return Tile(image=image[r:r + t, c:c + t],
                gt=DensityMap(values=gt.values[r:r + t, c:c + t].copy(),
                              image_id=record.id, resolution_divisor=1),
                source_id=record.id, origin=(r, c))
