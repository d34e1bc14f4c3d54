import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from resdenoise import data
from resdenoise.data import (
    AugmentConfig,
    ImageFormatError,
    ImageRecord,
    ManifestEntry,
    ManifestError,
    NoiseConfig,
    PhantomConfig,
)


def rec(img, id="r"):
    return ImageRecord(id, np.asarray(img, dtype=np.float32))


class TestLoad:
    @pytest.mark.parametrize("suffix", [".pgm", ".png"])
    @pytest.mark.parametrize("value,expected", [(255, 1.0), (0, 0.0)])
    def test_constant_files(self, tmp_path, suffix, value, expected):
        path = tmp_path / f"c{suffix}"
        data.write_raster(path, np.full((7, 9), value, np.uint8))
        r = data.load_image(path)
        assert r.pixels.shape == (1, 7, 9, 1)
        assert np.all(r.pixels == expected)
        assert r.original_dims == (7, 9)

    def test_pgm_bytes_by_hand(self, tmp_path):
        body = bytes(range(6))
        path = tmp_path / "hand.pgm"
        path.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + body)
        np.testing.assert_array_equal(data.read_raster(path), np.arange(6, dtype=np.uint8).reshape(2, 3))

    def test_png_decoded_by_reference_reader(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 8), dtype=np.uint8)
        path = tmp_path / "a.png"
        data.write_raster(path, img)
        np.testing.assert_array_equal(np.array(Image.open(path)), img)

    @pytest.mark.parametrize("suffix", [".pgm", ".png"])
    def test_round_trip_is_quantization(self, tmp_path, suffix):
        px = np.random.default_rng(1).uniform(0, 1, (6, 10))
        path = tmp_path / f"q{suffix}"
        data.save_image(path, px)
        np.testing.assert_array_equal(data.load_image(path).image, np.round(px * 255).astype(np.float32) / 255)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "x.bmp"
        path.write_bytes(b"BM" + bytes(40))
        with pytest.raises(ImageFormatError, match="unsupported") as exc:
            data.load_image(path)
        assert str(path) in str(exc.value)

    def test_truncated_pgm(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(ImageFormatError, match="truncated"):
            data.load_image(path)

    def test_16_bit_pgm_rejected(self, tmp_path):
        path = tmp_path / "w.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ImageFormatError, match="maxval"):
            data.load_image(path)

    def test_corrupt_png(self, tmp_path):
        path = tmp_path / "c.png"
        path.write_bytes(data._PNG_MAGIC + b"garbage" * 5)
        with pytest.raises(ImageFormatError, match="corrupt"):
            data.load_image(path)

    def test_colour_png_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.new("RGB", (4, 4)).save(path)
        with pytest.raises(ImageFormatError, match="grayscale"):
            data.load_image(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageFormatError):
            data.load_image(tmp_path / "nope.png")


class TestPreprocess:
    def test_pad_rows(self):
        out = data.preprocess(rec(np.ones((100, 400))), (200, 400))
        assert out.dims == (200, 400)
        assert np.all(out.image[:50] == 0) and np.all(out.image[150:] == 0)
        assert np.all(out.image[50:150] == 1)
        assert out.original_dims == (100, 400)

    def test_odd_padding_goes_bottom_right(self):
        out = data.preprocess(rec(np.ones((3, 4))), (6, 7))
        rows = np.flatnonzero(out.image.any(axis=1))
        cols = np.flatnonzero(out.image.any(axis=0))
        assert (rows[0], 6 - 1 - rows[-1]) == (1, 2)
        assert (cols[0], 7 - 1 - cols[-1]) == (1, 2)

    def test_resize_keeps_constant(self):
        out = data.preprocess(rec(np.full((400, 800), 0.3)), (200, 400))
        assert out.dims == (200, 400)
        np.testing.assert_allclose(out.image, 0.3, atol=1e-7)

    def test_identity(self):
        r = rec(np.random.default_rng(0).uniform(0, 1, (20, 40)))
        assert data.preprocess(r, (20, 40)).pixels.tobytes() == r.pixels.tobytes()

    def test_mixed_dims_resize_in_range(self):
        out = data.preprocess(rec(np.random.default_rng(1).uniform(0, 1, (30, 90))), (40, 60))
        assert out.dims == (40, 60)
        assert out.image.min() >= 0 and out.image.max() <= 1

    def test_bilinear_downscale_by_two_averages_pairs(self):
        # half-pixel centres: each output pixel sits midway between two input pixels
        img = np.arange(8, dtype=np.float64)[None, :].repeat(2, axis=0)
        np.testing.assert_allclose(data.resize_bilinear(img, 2, 4)[0], [0.5, 2.5, 4.5, 6.5])


class TestSplit:
    def ids(self, n):
        return [f"r{i:03d}" for i in range(n)]

    def test_hundred(self):
        s = data.split_dataset(self.ids(100), rng=0)
        assert (len(s.train), len(s.val), len(s.test)) == (70, 15, 15)

    def test_ten_largest_remainder(self):
        s = data.split_dataset(self.ids(10), rng=0)
        assert len(s.train) == 7 and {len(s.val), len(s.test)} == {1, 2}
        assert sorted(s.train + s.val + s.test) == self.ids(10)

    def test_deterministic(self):
        a, b = data.split_dataset(self.ids(30), rng=5), data.split_dataset(self.ids(30), rng=5)
        assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
        assert a.train != data.split_dataset(self.ids(30), rng=6).train

    def test_rejects_bad_fractions(self):
        with pytest.raises(ValueError):
            data.split_dataset(self.ids(10), (0.7, 0.2, 0.2))

    def test_rejects_too_few(self):
        with pytest.raises(ValueError):
            data.split_dataset(self.ids(2))

    @settings(max_examples=60, deadline=None)
    @given(n=st.integers(3, 300), seed=st.integers(0, 2**32))
    def test_disjoint_exhaustive(self, n, seed):
        ids = self.ids(n)
        s = data.split_dataset(ids, rng=seed)
        parts = s.train + s.val + s.test
        assert len(parts) == n and sorted(parts) == ids
        for size, frac in zip((len(s.train), len(s.val), len(s.test)), s.fractions):
            assert abs(size - n * frac) < 1


class TestAugment:
    def test_zero_transform_is_identity(self):
        r = rec(np.random.default_rng(0).uniform(0, 1, (12, 16)))
        assert data.apply_augmentation(r, 0.0, 0.0, 0.0).pixels.tobytes() == r.pixels.tobytes()

    def test_impulse_translation(self):
        img = np.zeros((16, 16))
        img[5, 5] = 1.0
        out = data.apply_augmentation(rec(img), 0.0, 3.0, 0.0).image
        assert np.unravel_index(np.argmax(out), out.shape) == (5, 8)
        assert out[5, 8] == pytest.approx(1.0)

    def test_rotation_about_centre(self):
        img = np.zeros((21, 21))
        img[10, 15] = 1.0  # 5 px right of centre
        out = data.apply_augmentation(rec(img), 90.0, 0.0, 0.0).image
        # counter-clockwise on screen: right of centre goes to above centre
        assert np.unravel_index(np.argmax(out), out.shape) == (5, 10)

    def test_zero_fill_and_clamped(self):
        out = data.apply_augmentation(rec(np.ones((10, 10))), 0.0, 4.0, 0.0).image
        assert np.all(out[:, :4] == 0) and np.all(out[:, 4:] == 1)
        out = data.augment(rec(np.ones((10, 10))), AugmentConfig(), np.random.default_rng(0)).image
        assert out.min() >= 0 and out.max() <= 1

    def test_angle_draw_statistics(self):
        gen = np.random.default_rng(123)
        angles = np.array([data.draw_augmentation(AugmentConfig(), gen)[0] for _ in range(100_000)])
        assert -10 <= angles.min() <= -9.9
        assert 9.9 <= angles.max() <= 10
        assert abs(angles.mean()) <= 0.1

    def test_translation_draws_in_range(self):
        gen = np.random.default_rng(7)
        d = np.array([data.draw_augmentation(AugmentConfig(), gen)[1:] for _ in range(10_000)])
        assert np.all(np.abs(d) <= 10)

    def test_deterministic_per_generator(self):
        r = rec(np.random.default_rng(0).uniform(0, 1, (12, 16)))
        a = data.augment(r, AugmentConfig(), np.random.default_rng(9))
        b = data.augment(r, AugmentConfig(), np.random.default_rng(9))
        assert a.pixels.tobytes() == b.pixels.tobytes()


class TestNoise:
    def test_zero_sigma_is_identity(self):
        r = rec(np.random.default_rng(0).uniform(0, 1, (8, 8)))
        noisy, sigma = data.add_noise(r, NoiseConfig(0.0, 0.0), np.random.default_rng(1))
        assert sigma == 0.0 and noisy.pixels.tobytes() == r.pixels.tobytes()

    def test_fixed_sigma_statistics(self):
        r = rec(np.full((250, 400), 0.5))
        noisy, sigma = data.add_noise(r, NoiseConfig(0.1, 0.1, clip=False), np.random.default_rng(2))
        diff = noisy.image.astype(np.float64) - 0.5
        assert sigma == 0.1
        assert abs(diff.std() / 0.1 - 1) < 0.01
        assert abs(diff.mean()) < 0.1 * 4 / np.sqrt(diff.size)

    def test_sigma_draws_in_range(self):
        gen = np.random.default_rng(3)
        r = rec(np.zeros((2, 2)))
        sigmas = [data.add_noise(r, NoiseConfig(), gen)[1] for _ in range(5000)]
        assert min(sigmas) >= 0.02 and max(sigmas) <= 0.5
        assert min(sigmas) < 0.03 and max(sigmas) > 0.49

    def test_clipped_by_default(self):
        r = rec(np.random.default_rng(4).uniform(0, 1, (32, 32)))
        noisy, _ = data.add_noise(r, NoiseConfig(0.5, 0.5), np.random.default_rng(5))
        assert noisy.image.min() == 0.0 and noisy.image.max() == 1.0

    def test_rejects_inverted_range(self):
        with pytest.raises(ValueError):
            NoiseConfig(0.3, 0.1)


def count_runs(profile, tol=1e-9):
    return 1 + int(np.sum(np.abs(np.diff(profile)) > tol))


class TestPhantoms:
    @pytest.mark.parametrize("family", [data.POSTERIOR, data.ANTERIOR])
    def test_deterministic_and_in_range(self, family):
        cfg = PhantomConfig(family, 48, 96, speckle=0.2, seed=3)
        a, b = data.generate_phantom(cfg), data.generate_phantom(cfg)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert a.image.min() >= 0 and a.image.max() <= 1
        assert a.source == family and a.dims == (48, 96)

    @pytest.mark.parametrize("n_layers", [4, 6, 8])
    def test_flat_bands_are_countable(self, n_layers):
        for seed in range(5):
            cfg = PhantomConfig(height=96, width=192, n_layers=n_layers, curvature=0.0, n_vessels=0, seed=seed)
            img = data.generate_phantom(cfg).image.astype(np.float64)
            # background above, the layers, background below
            assert count_runs(img.mean(axis=1)) == n_layers + 2

    def test_vessels_darken_columns(self):
        cfg = PhantomConfig(height=64, width=128, curvature=0.0, n_vessels=2, seed=1)
        img = data.generate_phantom(cfg).image.astype(np.float64)
        col = img[40]  # a row inside the tissue
        assert col.min() < 0.7 * np.median(col)

    def test_set_is_order_independent(self):
        cfg = PhantomConfig(height=32, width=64)
        full = data.generate_phantoms(cfg, 5, seed=8)
        again = data.generate_phantoms(cfg, 3, seed=8)
        assert [r.id for r in full] == [f"posterior-{i:04d}" for i in range(5)]
        assert all(a.pixels.tobytes() == b.pixels.tobytes() for a, b in zip(full, again))

    def test_anterior_has_structure(self):
        img = data.generate_phantom(PhantomConfig(data.ANTERIOR, 96, 192, seed=0)).image
        assert img.max() > 0.5 and np.median(img) < img.max() / 2


class TestManifest:
    def test_round_trip(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        entries = [ManifestEntry("a", tmp_path / "imgs" / "a.png", "train", "posterior"),
                   ManifestEntry("b", tmp_path / "imgs" / "b.pgm", "test", "anterior")]
        data.write_manifest(tmp_path / "m.tsv", entries)
        assert (tmp_path / "m.tsv").read_text() == "a\timgs/a.png\ttrain\tposterior\nb\timgs/b.pgm\ttest\tanterior\n"
        back = data.read_manifest(tmp_path / "m.tsv")
        assert [(e.id, e.path.resolve(), e.split, e.source) for e in back] == \
               [(e.id, e.path.resolve(), e.split, e.source) for e in entries]

    @pytest.mark.parametrize("line,match", [("a\tx.png\ttrain", "4 tab-separated"),
                                            ("a\tx.png\tholdout\tposterior", "unknown split"),
                                            ("a\tx.png\ttrain\tfundus", "unknown source")])
    def test_errors_carry_line_number(self, tmp_path, line, match):
        path = tmp_path / "m.tsv"
        path.write_text("# header\nok\tok.png\ttrain\tposterior\n" + line + "\n")
        with pytest.raises(ManifestError, match=match) as exc:
            data.read_manifest(path)
        assert ":3:" in str(exc.value)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a\tx.png\ttrain\tposterior\na\ty.png\tval\tposterior\n")
        with pytest.raises(ManifestError, match="duplicate"):
            data.read_manifest(path)

    def test_load_records_preprocesses(self, tmp_path):
        data.write_raster(tmp_path / "a.png", np.full((8, 8), 255, np.uint8))
        entries = [ManifestEntry("a", tmp_path / "a.png", "val", "external")]
        (r,) = data.load_manifest_records(entries, (16, 16), split="val")
        assert r.dims == (16, 16) and r.original_dims == (8, 8)
        assert data.load_manifest_records(entries, (16, 16), split="test") == []
