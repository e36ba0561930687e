import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vriqa.distortion import (
    BLOCK,
    DEFAULT_LADDERS,
    KINDS,
    DatasetBuildError,
    DistortionSpec,
    build_dataset,
    default_specs,
    distort,
    synth_mos,
    synth_scene,
    write_synthetic_refs,
)
from vriqa.image import ImageBuffer, load_image
from vriqa.metrics2d import ms_ssim
from vriqa.training import read_manifest

from conftest import random_image


@pytest.fixture(scope="module")
def scene():
    return synth_scene(7, 256, 192)


class TestDistortionSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            DistortionSpec("jpeg", 1.0)
        with pytest.raises(ValueError):
            DistortionSpec("blur", -1.0)
        with pytest.raises(ValueError):
            DistortionSpec("blur", float("nan"))

    def test_default_ladder_shape(self):
        specs = default_specs()
        assert len(specs) == 12
        assert {s.kind for s in specs} == set(KINDS)
        assert all(len(DEFAULT_LADDERS[k]) == 4 for k in KINDS)


class TestDistort:
    @pytest.mark.parametrize("kind", KINDS)
    def test_strength_zero_identity(self, scene, kind):
        out = distort(scene, DistortionSpec(kind, 0.0, seed=3))
        np.testing.assert_allclose(out.data, scene.data, atol=1e-6)

    @pytest.mark.parametrize("kind", KINDS)
    def test_ladder_monotone(self, scene, kind):
        values = [ms_ssim(scene, distort(scene, DistortionSpec(kind, s, 1))).value for s in DEFAULT_LADDERS[kind]]
        assert all(b < a for a, b in zip(values, values[1:])), values
        mos = [synth_mos(scene, distort(scene, DistortionSpec(kind, s, 1))) for s in DEFAULT_LADDERS[kind]]
        assert all(b < a for a, b in zip(mos, mos[1:])), mos

    def test_jpegish_dc_only_limit(self, rng):
        img = ImageBuffer(rng.uniform(0.2, 0.8, size=(3, 32, 48)))
        out = distort(img, DistortionSpec("jpegish", 1e4)).data
        blocks = out.reshape(3, 4, BLOCK, 6, BLOCK)
        np.testing.assert_allclose(np.ptp(blocks, axis=(2, 4)), 0, atol=1e-12)

    def test_jpegish_blocks_independent(self, rng):
        # changing one block leaves every other block's output untouched
        a = rng.uniform(0, 1, size=(1, 16, 16))
        b = a.copy()
        b[:, :8, :8] = rng.uniform(0, 1, size=(1, 8, 8))
        oa = distort(ImageBuffer(a), DistortionSpec("jpegish", 2)).data
        ob = distort(ImageBuffer(b), DistortionSpec("jpegish", 2)).data
        np.testing.assert_array_equal(oa[:, 8:, :], ob[:, 8:, :])
        np.testing.assert_array_equal(oa[:, :, 8:], ob[:, :, 8:])

    def test_blur_wraps_across_seam(self):
        data = np.zeros((1, 16, 32))
        data[:, :, 0] = 1.0
        out = distort(ImageBuffer(data), DistortionSpec("blur", 1.5)).data
        np.testing.assert_allclose(out[:, :, 1], out[:, :, -1], rtol=1e-12)

    def test_noise_seeded(self, scene):
        a = distort(scene, DistortionSpec("noise", 0.1, seed=5)).data
        b = distort(scene, DistortionSpec("noise", 0.1, seed=5)).data
        c = distort(scene, DistortionSpec("noise", 0.1, seed=6)).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(KINDS), st.floats(0, 20), st.integers(0, 2**32 - 1))
    def test_range(self, kind, strength, seed):
        img = random_image(np.random.default_rng(seed), 24, 16)
        out = distort(img, DistortionSpec(kind, strength, seed)).data
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSynthMos:
    def test_identity(self, scene):
        assert synth_mos(scene, scene) == 100.0

    def test_identity_random(self, rng):
        img = random_image(rng, 256, 192)
        assert synth_mos(img, img) == 100.0

    def test_range(self, scene, rng):
        bad = ImageBuffer(1.0 - scene.data)
        for dist in (bad, random_image(rng, 256, 192), distort(scene, DistortionSpec("noise", 0.5, 1))):
            assert 0.0 <= synth_mos(scene, dist) <= 100.0

    def test_dimension_mismatch(self, scene):
        with pytest.raises(ValueError):
            synth_mos(scene, synth_scene(7, 384, 192))


class TestScenes:
    def test_deterministic_and_distinct(self):
        a, b = synth_scene(1, 128, 64), synth_scene(1, 128, 64)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, synth_scene(2, 128, 64).data)
        assert a.shape == (3, 64, 128)
        assert 0.0 <= a.data.min() and a.data.max() <= 1.0


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    refs = write_synthetic_refs(root / "refs", 10, 256, 192, seed=2)
    manifest = build_dataset(refs, default_specs(4), root / "out")
    return root, refs, manifest


class TestBuildDataset:
    def test_row_count_and_paths(self, built):
        _, _, manifest = built
        rows = read_manifest(manifest)
        assert len(rows) == 120
        assert len({r["scene_id"] for r in rows}) == 10
        for r in rows[::17]:
            assert load_image(r["dist_path"]).shape == (3, 192, 256)
            assert 0.0 <= r["mos"] <= 100.0

    def test_rerun_byte_identical(self, built, tmp_path):
        root, refs, manifest = built
        again = build_dataset(refs, default_specs(4), root / "out")
        assert open(again, "rb").read() == open(manifest, "rb").read()
        rows = read_manifest(manifest)
        other = build_dataset(refs[:2], default_specs(4), tmp_path)
        for a, b in zip(read_manifest(other), rows):
            assert open(a["dist_path"], "rb").read() == open(b["dist_path"], "rb").read()

    def test_failures_aggregated(self, built, tmp_path):
        _, refs, _ = built
        with pytest.raises(DatasetBuildError) as exc:
            build_dataset([refs[0], tmp_path / "missing1.png", tmp_path / "missing2.png"], default_specs(),
                          tmp_path / "o")
        assert len(exc.value.failures) == 2
