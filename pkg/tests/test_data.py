import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from gftdefect.data import (
    AUGMENTATIONS,
    DEFECT,
    NON_DEFECT,
    DefectConfig,
    LabeledImage,
    PatchRecord,
    TextureConfig,
    augment,
    build_spectral_dataset,
    export_dataset_csv,
    extract_patches,
    load_dataset,
    load_image,
    load_manifest_images,
    rasterize_defect,
    sample_patches,
    save_dataset,
    save_image,
    stratified_split,
    synthesize_corpus,
    synthesize_turning_texture,
    underlying_patch,
    window_overlaps,
    write_manifest,
)
from gftdefect.errors import (
    ConfigError,
    EmptyInputError,
    FormatError,
    InputOutputError,
    SamplingExhaustedError,
    ShapeError,
)
from gftdefect.spectral import eigenbasis_analytic, gft_forward


def _write(path, arr, mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode=mode).save(path)
    return path


class TestLoadImage:
    def test_black_and_white(self, tmp_path):
        black = load_image(_write(tmp_path / "b.png", np.zeros((8, 8), np.uint8)), label=0)
        white = load_image(_write(tmp_path / "w.png", np.full((8, 8), 255, np.uint8)), label=0)
        assert np.all(black.image == 0.0)
        assert np.all(white.image == 1.0)

    def test_pgm_midgray(self, tmp_path):
        im = load_image(_write(tmp_path / "g.pgm", np.full((256, 256), 128, np.uint8)), label=0)
        assert im.image.shape == (256, 256)
        assert im.image[0, 0] == pytest.approx(0.50196, abs=1e-5)
        assert im.image[0, 0] == 128 / 255

    def test_colour_is_luma(self, tmp_path):
        rgb = np.zeros((4, 4, 3), np.uint8)
        rgb[..., 1] = 255
        im = load_image(_write(tmp_path / "c.png", rgb, mode="RGB"), label=1)
        assert im.image[0, 0] == pytest.approx(150 / 255, abs=1 / 255)

    def test_label_from_directory(self, tmp_path):
        p = _write(tmp_path / "defect" / "a.png", np.zeros((4, 4), np.uint8))
        assert load_image(p).label == DEFECT
        p = _write(tmp_path / "good" / "a.png", np.zeros((4, 4), np.uint8))
        assert load_image(p).label == NON_DEFECT

    def test_missing_label(self, tmp_path):
        with pytest.raises(FormatError):
            load_image(_write(tmp_path / "x.png", np.zeros((4, 4), np.uint8)))

    def test_unreadable(self, tmp_path):
        with pytest.raises(InputOutputError):
            load_image(tmp_path / "nope.png", label=0)
        (tmp_path / "junk.png").write_bytes(b"not an image")
        with pytest.raises(InputOutputError):
            load_image(tmp_path / "junk.png", label=0)

    def test_16_bit_rejected(self, tmp_path):
        p = tmp_path / "deep.png"
        Image.fromarray(np.full((4, 4), 40000, np.uint16)).save(p)
        with pytest.raises(FormatError):
            load_image(p, label=0)

    def test_manifest_round_trip(self, tmp_path):
        img = synthesize_turning_texture(TextureConfig(size=64), seed=3)
        save_image(img.image, tmp_path / "i.png")
        save_image(img.mask.astype(float), tmp_path / "m.png")
        write_manifest([("i.png", DEFECT, "m.png")], tmp_path / "manifest.csv")
        (back,) = load_manifest_images(tmp_path / "manifest.csv")
        np.testing.assert_array_equal(back.image, img.image)  # 8-bit quantized: lossless
        np.testing.assert_array_equal(back.mask, img.mask)
        assert back.label == DEFECT


class TestSynthesis:
    def test_deterministic(self):
        cfg = TextureConfig()
        a = synthesize_turning_texture(cfg, seed=11)
        b = synthesize_turning_texture(cfg, seed=11)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        c = synthesize_turning_texture(cfg, seed=12)
        assert not np.array_equal(a.image, c.image)

    def test_no_defects(self):
        cfg = dataclasses.replace(TextureConfig(), defects=DefectConfig(count=0))
        img = synthesize_turning_texture(cfg, seed=0)
        assert img.label == NON_DEFECT and not img.mask.any()

    def test_defect_label_matches_mask(self):
        img = synthesize_turning_texture(TextureConfig(), seed=0)
        assert img.label == DEFECT and img.mask.sum() >= DefectConfig().min_area
        assert img.image.min() >= 0 and img.image.max() <= 1
        np.testing.assert_array_equal(np.round(img.image * 255) / 255, img.image)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_blob_radius_6_area(self, seed):
        # nominal radius 6 with semi-axes jittered by x0.8..1.2 stays within [pi*4^2, pi*8^2]
        rng = np.random.default_rng(seed)
        m = rasterize_defect((64, 64), "blob", 32.0, 32.0, 6.0, rng)
        assert np.pi * 16 <= m.sum() <= np.pi * 64

    def test_blob_via_config(self):
        cfg = dataclasses.replace(
            TextureConfig(), defects=DefectConfig(shapes=("blob",), size_range=(6.0, 6.0), min_area=1)
        )
        for seed in range(10):
            assert np.pi * 16 <= synthesize_turning_texture(cfg, seed).mask.sum() <= np.pi * 64

    @pytest.mark.parametrize(
        "kw",
        [
            {"period_range": (2.0, 8.0)},
            {"period_range": (10.0, 40.0)},
            {"period_range": (9.0, 8.0)},
            {"noise_sigma": -0.1},
            {"defects": DefectConfig(shapes=("crack",))},
            {"defects": DefectConfig(size_range=(9.0, 5.0))},
            {"defects": DefectConfig(count=-1)},
            {"size": 16},
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            synthesize_turning_texture(dataclasses.replace(TextureConfig(), **kw), seed=0)

    def test_corpus_order_and_labels(self):
        imgs = synthesize_corpus(TextureConfig(), 2, 3, seed=4)
        assert [im.label for im in imgs] == [1, 1, 0, 0, 0]
        # each image is reproducible on its own
        again = synthesize_turning_texture(dataclasses.replace(TextureConfig()), [4, 0, 1], "img00001")
        np.testing.assert_array_equal(imgs[1].image, again.image)


@pytest.fixture(scope="module")
def defect_image():
    return synthesize_turning_texture(TextureConfig(), seed=21, image_id="d")


@pytest.fixture(scope="module")
def clean_image():
    cfg = dataclasses.replace(TextureConfig(), defects=DefectConfig(count=0))
    return synthesize_turning_texture(cfg, seed=22, image_id="c")


class TestPatches:
    def test_background_count(self, clean_image):
        ps = extract_patches(clean_image, 4, "background", seed=1)
        assert len(ps) == 4 and all(p.label == NON_DEFECT for p in ps)

    def test_defect_policy_overlap(self, defect_image):
        ps = extract_patches(defect_image, 30, "defect", seed=2)
        for p in ps:
            assert defect_image.mask[p.row : p.row + 64, p.col : p.col + 64].sum() >= 32
            assert p.label == DEFECT

    def test_label_purity(self, defect_image):
        for p in extract_patches(defect_image, 30, "background", seed=3):
            assert defect_image.mask[p.row : p.row + 64, p.col : p.col + 64].sum() == 0

    def test_bounds_and_content(self, defect_image):
        ps = extract_patches(defect_image, 50, "background", seed=4)
        assert len({(p.row, p.col) for p in ps}) == 50
        for p in ps:
            assert 0 <= p.row <= 192 and 0 <= p.col <= 192
            np.testing.assert_array_equal(p.patch, defect_image.image[p.row : p.row + 64, p.col : p.col + 64])

    def test_exhausted(self, clean_image):
        with pytest.raises(SamplingExhaustedError):
            extract_patches(clean_image, 1, "defect", seed=0)
        with pytest.raises(SamplingExhaustedError):
            # only 193*193 distinct positions exist
            extract_patches(clean_image, 193 * 193 + 1, "background", seed=0, max_tries=50000)

    def test_small_image(self):
        img = LabeledImage(np.zeros((32, 80)), NON_DEFECT)
        with pytest.raises(ShapeError):
            extract_patches(img, 1, "background")

    def test_deterministic(self, defect_image):
        a = extract_patches(defect_image, 5, "defect", seed=9)
        b = extract_patches(defect_image, 5, "defect", seed=9)
        assert [(p.row, p.col) for p in a] == [(p.row, p.col) for p in b]

    @given(st.integers(0, 2**16))
    @settings(max_examples=20, deadline=None)
    def test_window_overlaps_brute(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((12, 10)) < 0.3
        ov = window_overlaps(mask, 4)
        for r in range(9):
            for c in range(7):
                assert ov[r, c] == mask[r : r + 4, c : c + 4].sum()

    def test_sample_patches_spread(self):
        imgs = synthesize_corpus(TextureConfig(), 3, 2, seed=5)
        ps = sample_patches(imgs, 7, 5, seed=5)
        assert sum(p.label == DEFECT for p in ps) == 7
        assert sum(p.label == NON_DEFECT for p in ps) == 5
        counts = {}
        for p in ps:
            counts[p.source_id] = counts.get(p.source_id, 0) + 1
        assert sorted(counts.values()) == [2, 2, 2, 3, 3]


def _rec(arr, label=0):
    return PatchRecord(np.asarray(arr, dtype=float), label, "s", 0, 0)


square = st.integers(1, 6).flatmap(
    lambda n: st.lists(st.floats(0, 1), min_size=n * n, max_size=n * n).map(lambda v: np.array(v).reshape(n, n))
)


class TestAugment:
    def test_six_tags(self):
        out = augment(_rec(np.arange(16).reshape(4, 4), label=1))
        assert [p.augmentation for p in out] == list(AUGMENTATIONS)
        assert all(p.label == 1 and p.source_id == "s" for p in out)

    def test_constant_patch(self):
        for p in augment(_rec(np.full((5, 5), 0.3))):
            np.testing.assert_array_equal(p.patch, 0.3)

    def test_non_square(self):
        with pytest.raises(ShapeError):
            augment(_rec(np.zeros((3, 4))))

    def test_count_scaling(self):
        patches = [_rec(np.random.default_rng(i).random((4, 4))) for i in range(1000)]
        assert len([a for p in patches for a in augment(p)]) == 6000

    @given(square)
    def test_rot90_group(self, arr):
        r = arr
        for _ in range(4):
            r = augment(_rec(r))[1].patch
        np.testing.assert_array_equal(r, arr)

    @given(square)
    @settings(max_examples=50)
    def test_closure(self, arr):
        base = {p.patch.tobytes() for p in augment(_rec(arr))}
        for variant in augment(_rec(arr)):
            under = _rec(underlying_patch(variant))
            np.testing.assert_array_equal(under.patch, arr)
            assert {p.patch.tobytes() for p in augment(under)} == base


@pytest.fixture(scope="module")
def spec64():
    return eigenbasis_analytic(64, 64)


class TestDataset:
    def test_ten_patches(self, spec64):
        rng = np.random.default_rng(0)
        patches = [_rec(rng.random((64, 64)), label=i % 2) for i in range(10)]
        ds = build_spectral_dataset(patches, spec64, split_seed=3)
        assert ds.features.shape == (10, 4096)
        assert (~ds.is_test).sum() == 8 and ds.is_test.sum() == 2
        assert sorted(ds.labels[ds.is_test].tolist()) == [0, 1]
        np.testing.assert_allclose(ds.features[4], gft_forward(spec64, patches[4].patch), atol=1e-12)

    def test_zero_patch(self, spec64):
        ds = build_spectral_dataset([_rec(np.zeros((64, 64)))], spec64, split_seed=0)
        np.testing.assert_array_equal(ds.features[0], 0)

    def test_empty(self, spec64):
        with pytest.raises(EmptyInputError):
            build_spectral_dataset([], spec64, split_seed=0)

    def test_wrong_patch_size(self, spec64):
        with pytest.raises(ShapeError):
            build_spectral_dataset([_rec(np.zeros((32, 32)))], spec64, split_seed=0)

    def test_groups_stay_together(self, spec64):
        rng = np.random.default_rng(1)
        base = [PatchRecord(rng.random((64, 64)), i % 2, f"im{i}", i, 0) for i in range(10)]
        patches = [a for p in base for a in augment(p)]
        ds = build_spectral_dataset(patches, spec64, split_seed=5)
        flags = ds.is_test.reshape(10, 6)
        assert np.all(flags == flags[:, :1])
        assert (~ds.is_test).sum() == 48

    @given(st.lists(st.integers(0, 1), min_size=2, max_size=200), st.integers(0, 2**32 - 1), st.integers(1, 6))
    @settings(max_examples=60)
    def test_split_stratification(self, labels, seed, group):
        labels = np.array(labels)
        groups = [i // group for i in range(len(labels))]
        is_test = stratified_split(labels, groups, seed)
        for cls in (0, 1):
            n = int((labels == cls).sum())
            if n:
                frac = (~is_test[labels == cls]).sum() / n
                assert abs(frac - 0.8) <= 1 / n
        np.testing.assert_array_equal(is_test, stratified_split(labels, groups, seed))

    def test_save_load_csv(self, spec64, tmp_path):
        rng = np.random.default_rng(2)
        ds = build_spectral_dataset([_rec(rng.random((64, 64)), i % 2) for i in range(6)], spec64, split_seed=1)
        save_dataset(ds, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin")
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.is_test, ds.is_test)
        assert back.spectrum_version == spec64.version and back.split_seed == 1
        save_dataset(ds, tmp_path / "e.bin")
        assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()
        export_dataset_csv(ds, tmp_path / "d.csv")
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert len(lines) == 7 and lines[0].split(",")[:4] == ["split", "label", "s0", "s1"]
        assert float(lines[1].split(",")[2]) == ds.features[0, 0]

    def test_end_to_end_deterministic(self, spec64):
        def build():
            imgs = synthesize_corpus(TextureConfig(), 2, 2, seed=8)
            return build_spectral_dataset(sample_patches(imgs, 4, 4, seed=8), spec64, split_seed=8)

        a, b = build(), build()
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.is_test, b.is_test)
