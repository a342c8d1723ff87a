import itertools
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bapm import augment as aug
from bapm.phantom import PhantomSpec, generate_phantom
from bapm.volume import LABELS, WM, Volume


def _trilinear_oracle(data, point):
    """Scalar trilinear lookup with zero outside the grid."""
    base = [math.floor(p) for p in point]
    total = 0.0
    for offs in itertools.product((0, 1), repeat=3):
        idx = [b + o for b, o in zip(base, offs)]
        if any(i < 0 or i >= n for i, n in zip(idx, data.shape)):
            continue
        w = 1.0
        for p, b, o in zip(point, base, offs):
            f = p - b
            w *= f if o else 1 - f
        total += w * float(data[tuple(idx)])
    return total


class TestAffine:
    def test_identity_bitwise(self, rng):
        v = Volume(rng.standard_normal((6, 7, 8)))
        assert aug.apply_affine(v).data.tobytes() == v.data.tobytes()

    def test_unit_shift(self, rng):
        v = Volume(rng.standard_normal((5, 5, 5)))
        out = aug.apply_affine(v, translation=(1, 0, 0)).data
        np.testing.assert_array_equal(out[1:], v.data[:-1])
        assert not out[0].any()

    def test_random_matches_oracle(self, rng):
        data = rng.standard_normal((8, 8, 8)).astype(np.float32)
        rot, scale, trans = (7.0, -4.0, 9.0), (0.95, 1.05, 1.1), (0.7, -1.2, 0.4)
        out = aug.apply_affine(Volume(data), rot, scale, trans).data
        r = Rotation.from_euler("xyz", rot, degrees=True).as_matrix()
        c = np.full(3, 3.5)
        inv = np.linalg.inv(r @ np.diag(scale))
        for idx in np.ndindex(8, 8, 8):
            src = inv @ (np.asarray(idx) - c - np.asarray(trans)) + c
            assert out[idx] == pytest.approx(_trilinear_oracle(data, src), abs=1e-5)

    def test_labels_need_nearest(self):
        lab = Volume(np.zeros((4, 4, 4), np.uint8), kind=LABELS)
        with pytest.raises(ValueError, match="nearest"):
            aug.apply_affine(lab, rotation=(5, 0, 0))
        out = aug.apply_affine(lab, rotation=(5, 0, 0), interpolation="nearest")
        assert out.data.dtype == np.uint8


class TestBlur:
    def test_zero_sigma(self, rng):
        v = Volume(rng.standard_normal((4, 4, 4)))
        assert aug.gaussian_blur(v, 0).data.tobytes() == v.data.tobytes()

    def test_impulse(self):
        d = np.zeros((9, 9, 9))
        d[4, 4, 4] = 1
        x = np.arange(-3, 4)
        k = np.exp(-x ** 2 / 2)
        k /= k.sum()
        expected = np.zeros((9, 9, 9))
        expected[1:8, 1:8, 1:8] = k[:, None, None] * k[None, :, None] * k[None, None, :]
        np.testing.assert_allclose(aug.gaussian_blur(Volume(d), 1.0).data, expected, atol=1e-7)

    def test_constant(self):
        v = Volume(np.full((6, 6, 6), 0.7))
        np.testing.assert_array_equal(aug.gaussian_blur(v, (1.5, 0.5, 2.0)).data, v.data)


class TestNoise:
    def test_zero(self, rng):
        v = Volume(rng.standard_normal((4, 4, 4)))
        assert aug.add_gaussian_noise(v, 0.0, 1).data.tobytes() == v.data.tobytes()

    def test_mean_and_determinism(self):
        v = Volume(np.full((64, 64, 64), 0.5))
        a = aug.add_gaussian_noise(v, 0.1, 7)
        b = aug.add_gaussian_noise(v, 0.1, 7)
        assert a.data.tobytes() == b.data.tobytes()
        diff = a.data.astype(np.float64) - 0.5
        assert abs(diff.mean()) <= 4 * 0.1 / math.sqrt(diff.size)

    def test_not_clamped(self):
        out = aug.add_gaussian_noise(Volume(np.full((8, 8, 8), 0.99)), 0.2, 0)
        assert out.data.max() > 1.0


class TestBias:
    def test_monomials(self):
        exps = aug.monomial_exponents(3)
        expected = [e for e in itertools.product(range(4), repeat=3) if sum(e) <= 3]
        assert len(exps) == 20 and sorted(exps) == sorted(expected)

    def test_zero_identity(self, rng):
        v = Volume(rng.uniform(0, 1, (5, 5, 5)))
        assert aug.apply_bias_field(v, np.zeros(20)).data.tobytes() == v.data.tobytes()

    def test_constant_term(self, rng):
        v = Volume(rng.uniform(0, 1, (5, 5, 5)))
        c = np.zeros(20)
        c[0] = 0.2
        np.testing.assert_allclose(aug.apply_bias_field(v, c).data, v.data * math.exp(0.2), rtol=1e-6)

    def test_polynomial_oracle(self, rng):
        dims = (5, 6, 7)
        data = rng.uniform(0, 1, dims)
        coefs = rng.uniform(-0.3, 0.3, 20)
        out = aug.apply_bias_field(Volume(data), coefs).data
        exps = aug.monomial_exponents(3)
        for idx in np.ndindex(*dims):
            u = [2 * i / (n - 1) - 1 for i, n in zip(idx, dims)]
            p = sum(c * u[0] ** a * u[1] ** b * u[2] ** g for c, (a, b, g) in zip(coefs, exps))
            assert out[idx] == pytest.approx(data[idx] * math.exp(p), rel=1e-5)


class TestMotion:
    def test_identity_movement(self, rng):
        v = Volume(rng.standard_normal((5, 5, 5)))
        out = aug.apply_motion(v, [((0, 0, 0), (0, 0, 0))])
        np.testing.assert_array_equal(out.data, v.data)

    def test_weights_one_zero(self, rng):
        v = Volume(rng.standard_normal((5, 5, 5)))
        out = aug.apply_motion(v, [((0, 0, 0), (0, 0, 0)), ((3, 0, 0), (1, 1, 0))], [1.0, 0.0])
        np.testing.assert_array_equal(out.data, v.data)

    def test_half_half_shifts(self, rng):
        v = Volume(rng.standard_normal((6, 6, 6)))
        out = aug.apply_motion(v, [((0, 0, 0), (1, 0, 0)), ((0, 0, 0), (-1, 0, 0))], [0.5, 0.5]).data
        a = aug.apply_affine(v, translation=(1, 0, 0), fill="edge").data
        b = aug.apply_affine(v, translation=(-1, 0, 0), fill="edge").data
        np.testing.assert_allclose(out, 0.5 * a + 0.5 * b, atol=1e-6)
        np.testing.assert_allclose(out[2:4], 0.5 * (v.data[1:3] + v.data[3:5]), atol=1e-6)

    def test_constant_preserved(self):
        v = Volume(np.full((6, 6, 6), 0.3))
        out = aug.apply_motion(v, [((0, 0, 0), (0, 0, 0)), ((4, -3, 2), (2, -1, 1))], [0.7, 0.3])
        np.testing.assert_allclose(out.data, 0.3, atol=1e-6)

    def test_bad_weights(self, rng):
        v = Volume(rng.standard_normal((4, 4, 4)))
        with pytest.raises(ValueError):
            aug.apply_motion(v, [((0, 0, 0), (0, 0, 0))] * 2, [0.6, 0.6])


class TestSampleAndApply:
    def test_all_off_identity(self):
        s = generate_phantom(PhantomSpec(), 0)
        cfg = aug.AugmentConfig(probability={t: 0.0 for t in aug.TRANSFORMS})
        v, lab = aug.sample_and_apply(s.intensity, s.labels, cfg, 5)
        assert v.data.tobytes() == s.intensity.data.tobytes()
        assert lab.data.tobytes() == s.labels.data.tobytes()

    def test_same_seed_same_pair(self):
        s = generate_phantom(PhantomSpec(), 0)
        cfg = aug.AugmentConfig(probability={t: 1.0 for t in aug.TRANSFORMS})
        a = aug.sample_and_apply(s.intensity, s.labels, cfg, 8)
        b = aug.sample_and_apply(s.intensity, s.labels, cfg, 8)
        assert a[0].data.tobytes() == b[0].data.tobytes() and a[1].data.tobytes() == b[1].data.tobytes()

    def test_intensity_only_leave_labels(self):
        s = generate_phantom(PhantomSpec(), 1)
        cfg = aug.AugmentConfig.only("blur", "noise", "bias")
        v, lab = aug.sample_and_apply(s.intensity, s.labels, cfg, 2)
        assert lab.data.tobytes() == s.labels.data.tobytes()
        assert v.data.tobytes() != s.intensity.data.tobytes()

    def test_fixed_draw_order(self):
        """Disabling a transform must not shift the draws of later ones."""
        cfg_all = aug.AugmentConfig(probability={t: 1.0 for t in aug.TRANSFORMS})
        cfg_no_blur = aug.AugmentConfig(probability={t: 1.0 for t in aug.TRANSFORMS},
                                        enabled=frozenset(aug.TRANSFORMS) - {"blur"})
        a = aug.sample_params(cfg_all, np.random.default_rng(4))
        b = aug.sample_params(cfg_no_blur, np.random.default_rng(4))
        assert b.blur is None and a.noise == b.noise
        np.testing.assert_array_equal(a.bias, b.bias)

    @pytest.mark.parametrize("seed", range(5))
    def test_affine_centroids_agree(self, seed):
        spec = PhantomSpec(csf=(0.25, 0.0), gm=(0.5, 0.0), wm=(0.8, 0.0), background=(0.02, 0.0))
        s = generate_phantom(spec, seed)
        v, lab = aug.sample_and_apply(s.intensity, s.labels, aug.AugmentConfig.only("affine"), seed)
        grid = np.indices(v.dims).reshape(3, -1)
        wm_lab = (lab.data == WM).reshape(-1)
        wm_int = (v.data > 0.65).reshape(-1)
        gap = np.linalg.norm(grid[:, wm_lab].mean(axis=1) - grid[:, wm_int].mean(axis=1))
        assert gap <= 0.6

    def test_random_affine_deterministic(self):
        s = generate_phantom(PhantomSpec(), 0)
        a = aug.random_affine(s.intensity, aug.AugmentConfig(), 3)
        b = aug.random_affine(s.intensity, aug.AugmentConfig(), 3)
        assert a.data.tobytes() == b.data.tobytes()


class TestConfig:
    def test_probability_range(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(probability={"blur": 1.5})

    def test_unknown_transform(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(enabled=frozenset({"elastic"}))
