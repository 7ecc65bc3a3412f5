import numpy as np
import pytest

from qmrecon.mri_ops import (
    SamplingMask,
    adjoint_op,
    apply_mask,
    estimate_sensitivity,
    expand,
    fft2c,
    forward_op,
    ifft2c,
    reduce,
    rss,
)


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def full_mask(ky, acs=0):
    return SamplingMask(lines=np.ones(ky), acs_width=acs)


def make_mask_lines(ky, acs_width, extra=()):
    lines = np.zeros(ky)
    lo = ky // 2 - acs_width // 2
    lines[lo:lo + acs_width] = 1.0
    for i in extra:
        lines[i] = 1.0
    return SamplingMask(lines=lines, acs_width=acs_width)


class TestFFT:
    def test_centered_impulse_gives_flat_spectrum(self):
        img = np.zeros((8, 6), dtype=complex)
        img[4, 3] = 1.0  # grid center at floor(n/2)
        ksp = fft2c(img)
        expected = 1.0 / np.sqrt(8 * 6)
        assert np.allclose(np.abs(ksp), expected, atol=1e-12)

    def test_zero_image(self):
        assert np.all(fft2c(np.zeros((4, 4))) == 0)

    def test_parseval(self):
        rng = np.random.default_rng(0)
        x = random_complex(rng, (16, 16))
        # oracle: direct norm computation on both sides
        assert abs(np.linalg.norm(fft2c(x)) - np.linalg.norm(x)) < 1e-10

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        x = random_complex(rng, (8, 8))
        assert np.max(np.abs(ifft2c(fft2c(x)) - x)) < 1e-10

    def test_inverse_of_flat_spectrum_is_impulse(self):
        ksp = np.full((8, 6), 1.0 / np.sqrt(8 * 6), dtype=complex)
        img = ifft2c(ksp)
        expected = np.zeros((8, 6), dtype=complex)
        expected[4, 3] = 1.0
        assert np.max(np.abs(img - expected)) < 1e-10

    def test_ifft_linearity(self):
        rng = np.random.default_rng(2)
        y1 = random_complex(rng, (8, 8))
        y2 = random_complex(rng, (8, 8))
        a, b = 1.7 - 0.3j, -0.4 + 2.2j
        lhs = ifft2c(a * y1 + b * y2)
        rhs = a * ifft2c(y1) + b * ifft2c(y2)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_non_finite_rejected(self):
        bad = np.ones((4, 4), dtype=complex)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            fft2c(bad)
        bad[0, 0] = np.inf
        with pytest.raises(ValueError, match="non-finite"):
            ifft2c(bad)


class TestMask:
    def test_identity_mask(self):
        rng = np.random.default_rng(3)
        y = random_complex(rng, (2, 6, 8))
        assert np.array_equal(apply_mask(y, full_mask(8)), y)

    def test_acs_only_zeroes_rest(self):
        rng = np.random.default_rng(4)
        y = random_complex(rng, (2, 8, 8))
        mask = make_mask_lines(8, 4)
        out = apply_mask(y, mask)
        lo = 8 // 2 - 2
        assert np.array_equal(out[..., lo:lo + 4], y[..., lo:lo + 4])
        assert np.all(out[..., :lo] == 0) and np.all(out[..., lo + 4:] == 0)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        y = random_complex(rng, (3, 8, 10))
        mask = make_mask_lines(10, 2, extra=[0, 7])
        once = apply_mask(y, mask)
        assert np.array_equal(apply_mask(once, mask), once)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mask length"):
            apply_mask(np.zeros((1, 4, 4), dtype=complex), full_mask(6))

    def test_acs_must_be_sampled(self):
        lines = np.zeros(8)
        lines[0] = 1
        with pytest.raises(ValueError, match="ACS"):
            SamplingMask(lines=lines, acs_width=2)


class TestExpandReduce:
    def test_unit_single_coil_expand(self):
        rng = np.random.default_rng(6)
        x = random_complex(rng, (5, 5))
        sens = np.ones((1, 5, 5), dtype=complex)
        assert np.array_equal(expand(x, sens)[0], x)

    def test_expand_zero_image(self):
        sens = np.ones((3, 4, 4), dtype=complex)
        assert np.all(expand(np.zeros((4, 4)), sens) == 0)

    def test_expand_elementwise_oracle(self):
        rng = np.random.default_rng(7)
        x = random_complex(rng, (4, 4))
        sens = random_complex(rng, (2, 4, 4))
        out = expand(x, sens)
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    assert out[c, i, j] == sens[c, i, j] * x[i, j]

    def test_reduce_unit_single_coil(self):
        rng = np.random.default_rng(8)
        y = random_complex(rng, (1, 5, 5))
        sens = np.ones((1, 5, 5), dtype=complex)
        assert np.array_equal(reduce(y, sens), y[0])

    def test_reduce_expand_identity_unit_rss(self):
        rng = np.random.default_rng(9)
        x = random_complex(rng, (6, 6))
        sens = random_complex(rng, (4, 6, 6))
        sens /= rss(sens)[None]
        assert np.max(np.abs(reduce(expand(x, sens), sens) - x)) < 1e-10

    def test_adjoint_pairing(self):
        rng = np.random.default_rng(10)
        x = random_complex(rng, (6, 6))
        z = random_complex(rng, (3, 6, 6))
        sens = random_complex(rng, (3, 6, 6))
        lhs = np.vdot(expand(x, sens), z)
        rhs = np.vdot(x, reduce(z, sens))
        assert abs(lhs - rhs) < 1e-10 * np.linalg.norm(x) * np.linalg.norm(z)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            expand(np.zeros((4, 4)), np.ones((2, 5, 5), dtype=complex))
        with pytest.raises(ValueError):
            reduce(np.zeros((2, 4, 4), dtype=complex), np.ones((2, 5, 5), dtype=complex))


class TestForwardAdjoint:
    def test_degenerate_composition_is_fft(self):
        rng = np.random.default_rng(11)
        x = random_complex(rng, (8, 8))
        sens = np.ones((1, 8, 8), dtype=complex)
        out = forward_op(x, sens, full_mask(8))
        assert np.max(np.abs(out[0] - fft2c(x))) < 1e-12

    def test_zero_image_zero_measurement(self):
        sens = np.ones((2, 8, 8), dtype=complex)
        assert np.all(forward_op(np.zeros((8, 8)), sens, full_mask(8)) == 0)

    def test_adjoint_full_mask_unit_coil_is_ifft(self):
        rng = np.random.default_rng(12)
        y = random_complex(rng, (1, 8, 8))
        sens = np.ones((1, 8, 8), dtype=complex)
        out = adjoint_op(y, sens, full_mask(8))
        assert np.max(np.abs(out - ifft2c(y[0]))) < 1e-12

    def test_adjoint_of_forward_identity(self):
        rng = np.random.default_rng(13)
        x = random_complex(rng, (8, 8))
        sens = random_complex(rng, (4, 8, 8))
        sens /= rss(sens)[None]
        mask = full_mask(8)
        out = adjoint_op(forward_op(x, sens, mask), sens, mask)
        assert np.max(np.abs(out - x)) < 1e-10

    @pytest.mark.parametrize("shape,nc,acs", [((16, 16), 4, 6), ((8, 12), 2, 4), ((10, 10), 1, 2)])
    def test_dot_product_adjoint(self, shape, nc, acs):
        rng = np.random.default_rng(14)
        mask = make_mask_lines(shape[1], acs, extra=[0, shape[1] - 1])
        for _ in range(20):
            x = random_complex(rng, shape)
            y = random_complex(rng, (nc,) + shape)
            sens = random_complex(rng, (nc,) + shape)
            lhs = np.vdot(forward_op(x, sens, mask), y)
            rhs = np.vdot(x, adjoint_op(y, sens, mask))
            assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(y)


class TestRSS:
    def test_pythagorean(self):
        imgs = np.stack([np.full((4, 4), 3.0 + 0j), np.full((4, 4), 4.0 + 0j)])
        assert np.allclose(rss(imgs), 5.0)

    def test_single_coil_abs(self):
        rng = np.random.default_rng(15)
        y = random_complex(rng, (1, 5, 5))
        assert np.allclose(rss(y), np.abs(y[0]))

    def test_ten_coil_voxel_loop_oracle(self):
        rng = np.random.default_rng(16)
        y = random_complex(rng, (10, 6, 6))
        out = rss(y)
        for i in range(6):
            for j in range(6):
                acc = sum(abs(y[c, i, j]) ** 2 for c in range(10))
                assert abs(out[i, j] - np.sqrt(acc)) < 1e-12


class TestSensitivityEstimation:
    def test_single_coil_unit_magnitude(self):
        rng = np.random.default_rng(17)
        img = random_complex(rng, (16, 16)) + 4.0
        ksp = fft2c(img)[None]
        mask = make_mask_lines(16, 8)
        sens = estimate_sensitivity(ksp, mask)
        mags = np.abs(sens[0])
        assert np.all((np.abs(mags - 1.0) < 1e-10) | (mags == 0))

    def test_unit_rss_on_support(self):
        rng = np.random.default_rng(18)
        ksp = random_complex(rng, (10, 16, 16))
        mask = make_mask_lines(16, 6)
        sens = estimate_sensitivity(ksp, mask)
        norms = rss(sens)
        assert np.all((np.abs(norms - 1.0) < 1e-10) | (norms == 0))

    def test_empty_acs_rejected(self):
        with pytest.raises(ValueError, match="ACS"):
            estimate_sensitivity(np.ones((2, 8, 8), dtype=complex), full_mask(8, acs=0))

    def test_simulate_then_estimate_matches_truth(self):
        # smooth coil maps modulating a smooth object; the ACS-windowed
        # estimate should correlate > 0.99 with the truth inside the object
        from qmrecon.phantom import simulate_coils

        rng = np.random.default_rng(19)
        n = 64
        yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n))
        obj_mask = (xx ** 2 + yy ** 2) < 0.6
        img = np.where(obj_mask, 1.0 + 0.3 * xx + 0.2 * yy, 0.0) * np.exp(1j * 0.5 * xx)
        sens_true = simulate_coils(8, (n, n), seed=7)
        ksp = fft2c(expand(img, sens_true))
        mask = make_mask_lines(n, 24)
        sens_est = estimate_sensitivity(ksp, mask)
        a = sens_est[:, obj_mask].ravel()
        b = sens_true[:, obj_mask].ravel()
        corr = abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
        assert corr > 0.99
