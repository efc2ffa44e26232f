import pytest
import numpy as np

from kspace_loupe.config import TVConfig
from kspace_loupe.mri_model import sense_forward, simulate_coils
from kspace_loupe.numerics import cdot, crandn, spawn_rng
from kspace_loupe.recon import ReconstructionError
from kspace_loupe.recon.classical import (
    TVDivergenceError, div2d, grad2d, power_method_opnorm, tv_iso, tv_objective,
    tv_operator_norm, tv_recon, zero_filled,
)


@pytest.fixture
def partial_mask(rng):
    mask = (rng.random((16, 16)) < 0.35).astype(float)
    mask[6:10, 6:10] = 1.0
    return mask


def test_div_is_negative_adjoint_of_grad(rng):
    for shape in [(8, 8), (5, 9), (16, 16)]:
        x = crandn(rng, shape)
        px, py = crandn(rng, shape), crandn(rng, shape)
        dx, dy = grad2d(x)
        lhs = cdot(dx, px) + cdot(dy, py)
        rhs = -cdot(x, div2d(px, py))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_constant_image_has_no_variation():
    x = np.full((6, 6), 2.0 - 1.0j)
    dx, dy = grad2d(x)
    assert not dx.any() and not dy.any()
    assert tv_iso(x) == 0.0


def test_tv_of_a_step():
    x = np.zeros((4, 4))
    x[:, 2:] = 1.0
    assert tv_iso(x) == pytest.approx(4.0)


class TestPowerMethod:
    def test_identity(self):
        assert power_method_opnorm(lambda x: x, lambda x: x, (8, 8)) == pytest.approx(1.0, abs=1e-9)

    def test_scaled_identity(self):
        norm = power_method_opnorm(lambda x: 2.0 * x, lambda x: 2.0 * x, (8, 8))
        assert norm == pytest.approx(2.0, abs=1e-9)

    def test_zero_operator(self):
        assert power_method_opnorm(lambda x: 0 * x, lambda x: 0 * x, (4, 4)) == 0.0

    def test_matches_dense_singular_value(self, rng):
        sens = simulate_coils(spawn_rng(50, 0), 8, 8, 2)
        mask = (rng.random((8, 8)) < 0.5).astype(float)
        rows = []
        for i in range(64):
            e = np.zeros(64, dtype=complex)
            e[i] = 1.0
            image = e.reshape(8, 8)
            dx, dy = grad2d(image)
            rows.append(np.concatenate([sense_forward(image, sens, mask).reshape(-1),
                                        dx.reshape(-1), dy.reshape(-1)]))
        dense = np.stack(rows, axis=1)
        expected = np.linalg.svd(dense, compute_uv=False)[0]
        assert tv_operator_norm(sens, mask, n=500) == pytest.approx(expected, rel=1e-3)


def test_zero_filled_with_full_mask_is_the_label(small_sample):
    np.testing.assert_allclose(zero_filled(small_sample.kspace, small_sample.sens, np.ones((16, 16))),
                               small_sample.label, atol=1e-12)


def test_zero_mask_gives_zero_image(small_sample):
    result = tv_recon(small_sample.kspace, small_sample.sens, np.zeros((16, 16)),
                      TVConfig(alpha=0.01, n_iter=20))
    assert not np.any(result.image)


def test_without_regularization_full_data_is_reproduced(small_sample):
    result = tv_recon(small_sample.kspace, small_sample.sens, np.ones((16, 16)),
                      TVConfig(alpha=0.0, n_iter=200))
    assert np.max(np.abs(result.image - small_sample.label)) < 1e-4


def test_strong_regularization_flattens_the_image(rng):
    sens = simulate_coils(spawn_rng(50, 1), 8, 8, 2)
    image = crandn(rng, (8, 8))
    mask = (rng.random((8, 8)) < 0.4).astype(float)
    mask[3:5, 3:5] = 1.0
    b = sense_forward(image, sens, np.ones((8, 8)))
    result = tv_recon(b, sens, mask, TVConfig(alpha=1e4, n_iter=3000))
    assert tv_iso(result.image) / 64 < 1e-3


def test_objective_never_exceeds_start(small_sample, partial_mask):
    result = tv_recon(small_sample.kspace, small_sample.sens, partial_mask,
                      TVConfig(alpha=0.005, n_iter=60))
    assert len(result.objective) == 61
    assert result.final_objective <= result.objective[0]
    assert all(a >= b for a, b in zip(result.best_objective, result.best_objective[1:]))
    assert result.final_objective == pytest.approx(
        tv_objective(result.image, small_sample.kspace, small_sample.sens, partial_mask, 0.005))
    assert result.step_size > 0


def test_tv_improves_on_zero_filled(small_sample, partial_mask):
    zf = zero_filled(small_sample.kspace, small_sample.sens, partial_mask)
    result = tv_recon(small_sample.kspace, small_sample.sens, partial_mask,
                      TVConfig(alpha=0.005, n_iter=100))
    assert np.linalg.norm(result.image - small_sample.label) < np.linalg.norm(zf - small_sample.label)


def test_common_phase_rotation_leaves_result_unchanged(small_sample, partial_mask):
    cfg = TVConfig(alpha=0.005, n_iter=30)
    phase = np.exp(0.7j)
    plain = tv_recon(small_sample.kspace, small_sample.sens, partial_mask, cfg)
    rotated = tv_recon(phase * small_sample.kspace, phase * small_sample.sens.maps, partial_mask, cfg)
    np.testing.assert_allclose(rotated.image, plain.image, atol=1e-8)


def test_step_sizes_are_checked(small_sample, partial_mask):
    with pytest.raises(ReconstructionError, match="violate"):
        tv_recon(small_sample.kspace, small_sample.sens, partial_mask,
                 TVConfig(alpha=0.005, n_iter=5, tau=1.0, sigma=1.0))


def test_invalid_settings(small_sample, partial_mask):
    with pytest.raises(ReconstructionError):
        tv_recon(small_sample.kspace, small_sample.sens, partial_mask, TVConfig(alpha=-1.0))
    with pytest.raises(ReconstructionError):
        tv_recon(small_sample.kspace, small_sample.sens, np.ones((8, 8)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflowing_objective_is_reported(small_sample, partial_mask):
    with pytest.raises(TVDivergenceError, match="non-finite"):
        tv_recon(1e200 * small_sample.kspace, small_sample.sens, partial_mask,
                 TVConfig(alpha=0.005, n_iter=5))
