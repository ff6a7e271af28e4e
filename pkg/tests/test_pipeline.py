import numpy as np
import pytest

from kernel_inverse_sr import lcnn, pipeline
from kernel_inverse_sr.errors import FormatError, NumericError, ParameterError
from kernel_inverse_sr.gallery import GaussianParams, delta_target, sample_anisotropic_gaussian
from kernel_inverse_sr.pipeline import KernelSpec


def keys_cubic(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def direct_upscale(img, s):
    """Evaluate the cubic kernel at every output coordinate, one pixel at a time."""
    h, w = img.shape
    out = np.zeros((h * s, w * s))
    for i in range(h * s):
        for j in range(w * s):
            yi = (i + 0.5) / s - 0.5
            xj = (j + 0.5) / s - 0.5
            acc = 0.0
            for m in range(int(np.floor(yi)) - 1, int(np.floor(yi)) + 3):
                for n in range(int(np.floor(xj)) - 1, int(np.floor(xj)) + 3):
                    mm, nn = min(max(m, 0), h - 1), min(max(n, 0), w - 1)
                    acc += keys_cubic(yi - m) * keys_cubic(xj - n) * img[mm, nn]
            out[i, j] = acc
    return out


class TestBicubic:
    def test_same_size_identity(self, rng):
        img = rng.uniform(size=(9, 7, 3))
        np.testing.assert_allclose(pipeline.bicubic_resize(img, 9, 7), img, atol=1e-9)

    @pytest.mark.parametrize("size", [(5, 5), (17, 9), (3, 40)])
    def test_constant_preserved(self, size):
        img = np.full((8, 6), 0.37)
        np.testing.assert_allclose(pipeline.bicubic_resize(img, *size), 0.37, atol=1e-12)

    def test_ramp_matches_direct_evaluation(self):
        ramp = np.add.outer(np.arange(4.0), 2 * np.arange(4.0)) / 10
        np.testing.assert_allclose(pipeline.upscale(ramp, 2), direct_upscale(ramp, 2), atol=1e-12)

    def test_random_matches_direct_evaluation_x3(self, rng):
        img = rng.uniform(size=(5, 6))
        np.testing.assert_allclose(pipeline.upscale(img, 3), direct_upscale(img, 3), atol=1e-12)

    def test_channels_resized_independently(self, rng):
        img = rng.uniform(size=(6, 6, 3))
        out = pipeline.bicubic_resize(img, 12, 10)
        for c in range(3):
            np.testing.assert_allclose(out[..., c], pipeline.bicubic_resize(img[..., c], 12, 10))

    def test_downscale_is_antialiased(self):
        # a pixel-level checkerboard averages out when shrinking by 4
        board = np.indices((32, 32)).sum(axis=0) % 2.0
        small = pipeline.bicubic_resize(board, 8, 8)
        assert np.abs(small - 0.5).max() < 0.05

    def test_bad_size(self):
        with pytest.raises(ParameterError):
            pipeline.bicubic_resize(np.zeros((4, 4)), 0, 3)


def brute_degrade(x, k, s):
    h, w = x.shape
    r = k.shape[0] // 2
    out = np.zeros((h // s, w // s))
    for i in range(h // s):
        for j in range(w // s):
            ci, cj = s // 2 + i * s, s // 2 + j * s
            acc = 0.0
            for u in range(k.shape[0]):
                for v in range(k.shape[1]):
                    si = min(max(ci - (u - r), 0), h - 1)
                    sj = min(max(cj - (v - r), 0), w - 1)
                    acc += k[u, v] * x[si, sj]
            out[i, j] = acc
    return out


class TestDegrade:
    def test_delta_scale_one(self, rng):
        x = rng.uniform(size=(10, 12, 3))
        np.testing.assert_allclose(pipeline.degrade(x, delta_target(21), 1), x, atol=1e-15)

    @pytest.mark.parametrize("s", [2, 3, 4])
    def test_constant_image(self, s):
        k = sample_anisotropic_gaussian(GaussianParams(3.0, 1.0, 0.4), 21)
        out = pipeline.degrade(np.full((24, 24), 0.6), k, s)
        assert out.shape == (24 // s, 24 // s)
        np.testing.assert_allclose(out, 0.6, atol=1e-12)

    def test_matches_brute_force(self, rng):
        x = rng.uniform(size=(16, 16))
        k = rng.uniform(size=(21, 21))
        k /= k.sum()
        np.testing.assert_allclose(pipeline.degrade(x, k, 2), brute_degrade(x, k, 2), atol=1e-12)

    def test_not_divisible(self):
        with pytest.raises(ParameterError):
            pipeline.degrade(np.zeros((15, 16)), delta_target(3), 2)


@pytest.fixture(scope="module")
def model():
    return lcnn.init_model(4)


class TestSuperResolve:
    def test_identity_model_is_bicubic(self, rng):
        y = rng.uniform(size=(10, 12, 3))
        out = pipeline.super_resolve(lcnn.identity_model(), y, 3)
        assert out.shape == (30, 36, 3)
        np.testing.assert_array_equal(out, pipeline.bicubic_baseline(y, 3))

    def test_channel_independence(self, model, rng):
        g = rng.uniform(size=(12, 12))
        rgb = np.stack([g, g, g], axis=-1)
        out_rgb = pipeline.super_resolve(model, rgb, 2)
        out_g = pipeline.super_resolve(model, g, 2)
        for c in range(3):
            np.testing.assert_allclose(out_rgb[..., c], out_g, atol=1e-12)

    def test_channel_permutation(self, model, rng):
        y = rng.uniform(size=(10, 10, 3))
        perm = [2, 0, 1]
        a = pipeline.super_resolve(model, y[..., perm], 2)
        b = pipeline.super_resolve(model, y, 2)[..., perm]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_collapse_path_agrees(self, model, rng):
        y = rng.uniform(size=(20, 18, 3))
        a = pipeline.super_resolve(model, y, 2)
        b = pipeline.super_resolve(model, y, 2, collapse=True)
        assert np.abs(a - b)[5:-5, 5:-5].max() <= 1e-10
        # replicate padding before the network makes even the border agree
        assert np.abs(a - b).max() <= 1e-10

    def test_same_model_any_scale(self, model, rng):
        y = rng.uniform(size=(8, 8))
        before = [w.copy() for w in model.layers]
        for s in pipeline.SUPPORTED_SCALES:
            assert pipeline.super_resolve(model, y, s).shape == (8 * s, 8 * s)
        assert all(np.array_equal(a, b) for a, b in zip(before, model.layers))

    def test_output_clamped(self, model, rng):
        out = pipeline.super_resolve(model, rng.uniform(size=(8, 8)), 2)
        assert out.min() >= 0 and out.max() <= 1

    def test_non_finite_model(self, rng):
        m = lcnn.identity_model()
        m.layers[2][0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            pipeline.super_resolve(m, rng.uniform(size=(6, 6)), 2)

    def test_delta_degrade_identity_round_trip(self, rng):
        x = rng.uniform(size=(16, 16))
        y = pipeline.degrade(x, delta_target(21), 2)
        out = pipeline.super_resolve(lcnn.identity_model(), y, 2)
        np.testing.assert_array_equal(out, pipeline.bicubic_baseline(x[1::2, 1::2], 2))


class TestEvalSet:
    def test_deterministic(self, rng):
        imgs = [rng.uniform(size=(17, 16, 3)) for _ in range(3)]
        a = pipeline.synth_eval_set(imgs, KernelSpec.unseen(2), 2, seed=5)
        b = pipeline.synth_eval_set(imgs, KernelSpec.unseen(2), 2, seed=5)
        for x, y in zip(a, b):
            assert np.array_equal(x.lr, y.lr) and np.array_equal(x.kernel.grid, y.kernel.grid)
        assert a[0].hr.shape == (16, 16, 3) and a[0].lr.shape == (8, 8, 3)

    def test_unseen_kernels(self):
        rng = np.random.default_rng(0)
        for s, n in ((2, 11), (4, 21)):
            spec = KernelSpec.unseen(s)
            for _ in range(20):
                k = pipeline.draw_kernel(spec, rng)
                assert k.grid.shape == (n, n)
                assert abs(k.grid.sum() - 1) <= 1e-12
                assert 3 <= k.params.sigma1 <= 5 and 3 <= k.params.sigma2 <= 5

    def test_zero_noise_is_clean_sampler(self):
        spec = KernelSpec(size=11, sigma_min=3, sigma_max=5, noise=0.0)
        k = pipeline.draw_kernel(spec, np.random.default_rng(9))
        clean = sample_anisotropic_gaussian(k.params, 11)
        assert np.array_equal(k.grid, clean.grid)

    def test_high_scale_spec(self):
        assert KernelSpec.in_distribution(8).size == 31
        assert KernelSpec.in_distribution(32) == KernelSpec(51, 0.175, 3.1, 0.0)
        assert KernelSpec.in_distribution(2) == KernelSpec()


def test_png_round_trip(tmp_path, rng):
    img = rng.uniform(size=(7, 5, 3))
    pipeline.write_png(tmp_path / "a.png", img)
    back = pipeline.read_png(tmp_path / "a.png")
    np.testing.assert_array_equal(back, pipeline.to_uint8(img) / 255.0)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_round_half_up():
    assert pipeline.to_uint8(np.array([0.5 / 255, 1.5 / 255, 2.0])).tolist() == [1, 2, 255]


def test_bundled_images():
    imgs = pipeline.bundled_hr_images()
    assert len(imgs) >= 5
    for im in imgs.values():
        assert im.shape == (288, 288, 3) and im.min() >= 0 and im.max() <= 1


def test_manifest(tmp_path):
    recs = [{"hr": "hr/a.png", "lr": "lr/a.png", "kernel": "k/a.npy", "scale": 2}]
    pipeline.write_manifest(tmp_path / "m.jsonl", recs)
    back = pipeline.read_manifest(tmp_path / "m.jsonl")
    assert back[0]["scale"] == 2 and back[0]["name"] == "a"
    assert back[0]["lr"] == str(tmp_path / "lr/a.png")
    (tmp_path / "bad.jsonl").write_text('{"hr": "x"}\n')
    with pytest.raises(FormatError):
        pipeline.read_manifest(tmp_path / "bad.jsonl")
