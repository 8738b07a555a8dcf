"""Image IO, TV denoising, and the MSE/PSNR reporting convention."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from gradleak import imaging


class TestCifarLoading:
    def test_labels_and_pixels(self, batch_file):
        path, images, labels = batch_file
        for index, label in enumerate(labels):
            img, got = imaging.load_cifar10(path, index)
            assert got == label
            assert img.shape == (3, 32, 32)
            npt.assert_allclose(img, images[index], atol=1e-12)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_index_past_end(self, batch_file):
        path, _, _ = batch_file
        with pytest.raises(ValueError, match="truncated"):
            imaging.load_cifar10(path, 4)

    def test_truncated_record(self, tmp_path, batch_file):
        path, _, _ = batch_file
        data = open(path, "rb").read()
        clipped = tmp_path / "clipped.bin"
        clipped.write_bytes(data[:3073 * 2 + 100])   # record 2 cut short
        imaging.load_cifar10(clipped, 1)             # record 1 still whole
        with pytest.raises(ValueError, match="truncated"):
            imaging.load_cifar10(clipped, 2)

    def test_label_byte_out_of_range(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes([17]) + bytes(3072))
        with pytest.raises(ValueError, match="label"):
            imaging.load_cifar10(bad, 0)

    def test_planar_channel_order(self, tmp_path):
        # red plane full, others zero -> channel 0 is ones
        record = bytes([0]) + b"\xff" * 1024 + bytes(2048)
        path = tmp_path / "red.bin"
        path.write_bytes(record)
        img, _ = imaging.load_cifar10(path, 0)
        npt.assert_array_equal(img[0], np.ones((32, 32)))
        npt.assert_array_equal(img[1:], np.zeros((2, 32, 32)))


class TestPpmRoundTrip:
    def test_half_maps_to_128(self, tmp_path):
        path = tmp_path / "gray.ppm"
        imaging.save_image(path, np.full((3, 2, 2), 0.5))
        raw = path.read_bytes()
        assert raw.startswith(b"P6")
        assert set(raw[-12:]) == {128}

    def test_round_trip_quantization(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(3, 16, 16))
        path = tmp_path / "rt.ppm"
        imaging.save_image(path, img)
        back = imaging.load_image(path)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12
        assert imaging.quality(img, back).psnr_db > 48.0

    def test_out_of_range_values_clipped(self, tmp_path):
        path = tmp_path / "clip.ppm"
        imaging.save_image(path, np.array([[[-0.3]], [[0.5]], [[1.7]]]))
        back = imaging.load_image(path)
        npt.assert_allclose(back.ravel(), [0.0, 0.5, 1.0], atol=1e-2)

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n# another\n255\n"
                         + bytes([10, 20, 30, 40, 50, 60]))
        img = imaging.load_image(path)
        assert img.shape == (3, 1, 2)
        npt.assert_allclose(img[:, 0, 0] * 255, [10, 20, 30], atol=1e-9)

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError, match="magic"):
            imaging.load_image(path)

    def test_rejects_wide_maxval(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ValueError, match="maxval"):
            imaging.load_image(path)

    def test_rejects_short_pixel_data(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
        with pytest.raises(ValueError, match="truncated"):
            imaging.load_image(path)

    def test_save_rejects_non_rgb(self, tmp_path):
        with pytest.raises(ValueError, match="3, h, w"):
            imaging.save_image(tmp_path / "x.ppm", np.zeros((1, 4, 4)))


def step_edge(noise_seed, sigma=0.1, shape=(3, 24, 24)):
    img = np.zeros(shape)
    img[:, :, shape[2] // 2:] = 1.0
    rng = np.random.default_rng(noise_seed)
    return img, img + sigma * rng.normal(size=shape)


class TestTvDenoise:
    def test_zero_weight_is_identity(self):
        img = np.random.default_rng(1).uniform(size=(3, 8, 8))
        out = imaging.tv_denoise(img, weight=0.0)
        npt.assert_array_equal(out, img)
        assert out is not img

    def test_constant_image_fixed_point(self):
        img = np.full((3, 12, 12), 0.42)
        npt.assert_allclose(imaging.tv_denoise(img), img, atol=1e-12)

    def test_noise_suppression_on_step_edges(self):
        better = 0
        for seed in range(20):
            clean, noisy = step_edge(seed)
            den = imaging.tv_denoise(noisy, weight=0.15)
            if (np.mean((den - clean) ** 2)
                    < 0.5 * np.mean((noisy - clean) ** 2)):
                better += 1
        assert better == 20

    def test_reduces_total_variation(self):
        _, noisy = step_edge(99)
        den = imaging.tv_denoise(noisy)
        assert imaging.total_variation(den) < imaging.total_variation(noisy)
        twice = imaging.tv_denoise(den)
        assert imaging.total_variation(twice) <= imaging.total_variation(den)

    def test_two_dim_input(self):
        _, noisy = step_edge(5, shape=(1, 16, 16))
        out = imaging.tv_denoise(noisy[0])
        assert out.shape == (16, 16)
        assert np.isfinite(out).all()

    def test_rejects_non_finite(self):
        img = np.zeros((3, 4, 4))
        img[0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            imaging.tv_denoise(img)

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError, match=">= 0"):
            imaging.tv_denoise(np.zeros((3, 4, 4)), weight=-0.1)


class TestQuality:
    def test_identical_images(self):
        img = np.random.default_rng(2).uniform(size=(3, 8, 8))
        score = imaging.quality(img, img)
        assert score.mse == 0.0
        assert math.isinf(score.psnr_db)
        assert score.as_dict() == {"mse": 0.0, "psnr_db": None}

    def test_peak_convention(self):
        # mse is computed on the [0, 1] scale while the peak is 255, so a
        # known mse pins the psnr exactly
        ref = np.zeros((3, 10, 10))
        cand = np.full((3, 10, 10), math.sqrt(0.0512))
        score = imaging.quality(ref, cand)
        assert score.mse == pytest.approx(0.0512, abs=1e-12)
        assert score.psnr_db == pytest.approx(61.0389, abs=1e-3)

    def test_small_mse_psnr(self):
        cand = np.full((3, 4, 4), 0.01)
        score = imaging.quality(np.zeros((3, 4, 4)), cand)
        assert score.mse == pytest.approx(1e-4, abs=1e-15)
        assert score.psnr_db == pytest.approx(88.1308, abs=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            imaging.quality(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))

    def test_as_dict_finite(self):
        score = imaging.quality(np.zeros((3, 2, 2)), np.full((3, 2, 2), 0.1))
        d = score.as_dict()
        assert d["mse"] == pytest.approx(0.01)
        assert d["psnr_db"] == pytest.approx(10 * math.log10(255 ** 2 / 0.01))
