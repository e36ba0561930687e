import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vriqa.image import (
    ImageBuffer,
    ImageNotFoundError,
    PatchGridError,
    TruncatedImageError,
    UnsupportedFormatError,
    assemble_patch_grid,
    extract_patch_grid,
    load_image,
    save_image,
    to_luma,
)

from conftest import random_image


def write_pnm(path, magic, width, height, maxval, payload):
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{width} {height}\n{maxval}\n".encode() + payload)


class TestImageBuffer:
    def test_shape_properties(self):
        img = ImageBuffer(np.zeros((3, 4, 5)))
        assert (img.channels, img.height, img.width) == (3, 4, 5)
        assert img.data.size == img.width * img.height * img.channels

    def test_2d_input_becomes_single_channel(self):
        assert ImageBuffer(np.zeros((4, 5))).shape == (1, 4, 5)

    @pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
    def test_rejects_out_of_range(self, bad):
        data = np.full((1, 2, 2), 0.5)
        data[0, 0, 0] = bad
        with pytest.raises(ValueError):
            ImageBuffer(data)

    def test_rejects_two_channels(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.zeros((2, 3, 3)))


class TestLoadImage:
    def test_white_png(self, tmp_path):
        path = tmp_path / "white.png"
        Image.fromarray(np.full((2, 2, 3), 255, np.uint8)).save(path)
        img = load_image(path)
        assert img.shape == (3, 2, 2)
        np.testing.assert_array_equal(img.data, 1.0)

    def test_black_ppm(self, tmp_path):
        path = tmp_path / "black.ppm"
        write_pnm(path, "P6", 2, 2, 255, bytes(12))
        img = load_image(path)
        assert img.shape == (3, 2, 2)
        np.testing.assert_array_equal(img.data, 0.0)

    def test_scaling_of_128(self, tmp_path):
        path = tmp_path / "g.pgm"
        write_pnm(path, "P5", 1, 1, 255, bytes([128]))
        assert load_image(path).data[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)
        assert load_image(path).data[0, 0, 0] == 128 / 255

    def test_sixteen_bit_pgm(self, tmp_path):
        path = tmp_path / "g16.pgm"
        write_pnm(path, "P5", 2, 1, 65535, np.array([0, 65535], ">u2").tobytes())
        np.testing.assert_array_equal(load_image(path).data[0, 0], [0.0, 1.0])

    def test_header_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        with open(path, "wb") as fh:
            fh.write(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(load_image(path).data[0, 0], [0.0, 1.0])

    def test_grayscale_png_keeps_one_channel(self, tmp_path):
        path = tmp_path / "l.png"
        Image.fromarray(np.array([[0, 51]], np.uint8), mode="L").save(path)
        img = load_image(path)
        assert img.channels == 1
        np.testing.assert_allclose(img.data[0, 0], [0.0, 0.2])

    def test_distinct_errors(self, tmp_path):
        with pytest.raises(ImageNotFoundError):
            load_image(tmp_path / "missing.png")
        bogus = tmp_path / "x.bmp"
        bogus.write_bytes(b"BM" + bytes(40))
        with pytest.raises(UnsupportedFormatError):
            load_image(bogus)
        short = tmp_path / "short.ppm"
        write_pnm(short, "P6", 4, 4, 255, bytes(10))
        with pytest.raises(TruncatedImageError):
            load_image(short)
        png = tmp_path / "cut.png"
        Image.fromarray(np.zeros((64, 64, 3), np.uint8) + 7).save(png)
        png.write_bytes(png.read_bytes()[:60])
        with pytest.raises(TruncatedImageError):
            load_image(png)

    def test_missing_is_also_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.ppm")


class TestSaveImage:
    def test_zero_round_trip(self, tmp_path):
        path = tmp_path / "z.png"
        save_image(ImageBuffer(np.zeros((3, 4, 6))), path)
        np.testing.assert_array_equal(load_image(path).data, 0.0)

    def test_random_round_trip_within_quantisation(self, tmp_path, rng):
        img = random_image(rng, 17, 9)
        path = tmp_path / "r.png"
        save_image(img, path)
        back = load_image(path)
        assert back.shape == img.shape
        assert np.max(np.abs(back.data - img.data)) <= 0.5 / 255 + 1e-12

    def test_single_channel_round_trip(self, tmp_path, rng):
        img = random_image(rng, 5, 3, channels=1)
        save_image(img, tmp_path / "g.png")
        assert load_image(tmp_path / "g.png").channels == 1

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            save_image(ImageBuffer(np.zeros((1, 2, 2))), tmp_path / "no" / "such" / "dir.png")


class TestLuma:
    def test_single_channel_identity(self, rng):
        img = random_image(rng, channels=1)
        assert to_luma(img) is img

    def test_white(self):
        np.testing.assert_allclose(to_luma(ImageBuffer(np.ones((3, 2, 2)))).data, 1.0)

    def test_pure_red(self):
        data = np.zeros((3, 1, 1))
        data[0] = 1.0
        assert to_luma(ImageBuffer(data)).data[0, 0, 0] == pytest.approx(0.299, abs=1e-15)


class TestPatchGrid:
    def test_full_resolution_grid(self):
        grid = extract_patch_grid(ImageBuffer(np.zeros((1, 1024, 2048), np.float32)), 256)
        assert len(grid) == 32
        assert grid.patches[-1].grid_index == (3, 7)
        assert grid.patches[0].position == (-896.0, -384.0)
        assert grid.patches[0].grid_index == (0, 0)

    def test_single_patch(self, rng):
        img = random_image(rng, 8, 8)
        grid = extract_patch_grid(img, 8)
        assert len(grid) == 1
        assert grid.patches[0].position == (0.0, 0.0)

    def test_patch_sizes(self, rng):
        grid = extract_patch_grid(random_image(rng, 12, 8), 4)
        assert all(p.pixels.width == p.pixels.height == 4 for p in grid)

    def test_non_divisible(self, rng):
        with pytest.raises(PatchGridError):
            extract_patch_grid(random_image(rng, 12, 8), 5)

    @settings(max_examples=40, deadline=None)
    @given(cols=st.integers(1, 6), rows=st.integers(1, 6), p=st.sampled_from([1, 2, 4, 8]),
           channels=st.sampled_from([1, 3]), seed=st.integers(0, 2**32 - 1))
    def test_grid_invariants(self, cols, rows, p, channels, seed):
        img = random_image(np.random.default_rng(seed), cols * p, rows * p, channels)
        grid = extract_patch_grid(img, p)
        assert len(grid) == rows * cols
        np.testing.assert_array_equal(grid.position_array().sum(axis=0), [0.0, 0.0])
        np.testing.assert_array_equal(assemble_patch_grid(grid).data, img.data)
        for k, patch in enumerate(grid):
            r, c = patch.grid_index
            assert (r, c) == divmod(k, cols)
            np.testing.assert_array_equal(patch.pixels.data, img.data[:, r * p:(r + 1) * p, c * p:(c + 1) * p])
