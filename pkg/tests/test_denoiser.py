"""Denoiser architecture, preconditioning algebra, score identities, and the
gradient check against finite differences."""

import numpy as np
import pytest
import torch

from gta.data import tensor_mask
from gta.denoiser import (
    DenoiserConfig,
    build_denoiser,
    precondition_coeffs,
    score_from_denoiser,
)
from gta.training import _dsm_loss_torch

from conftest import GaussianOracleDenoiser, gaussian_4d


class TestConfig:
    def test_invalid_blocks(self):
        with pytest.raises(ValueError, match="n_blocks"):
            DenoiserConfig(horizon=4, state_dim=2, action_dim=1, n_blocks=0)

    def test_width_floor(self):
        with pytest.raises(ValueError, match="width"):
            DenoiserConfig(horizon=4, state_dim=8, action_dim=4, width=8)

    def test_channels(self):
        cfg = DenoiserConfig(horizon=16, state_dim=4, action_dim=2)
        assert cfg.channels == 7 and cfg.seq_len == 17


class TestForward:
    def test_shape_contract_on_zeros(self):
        cfg = DenoiserConfig(horizon=16, state_dim=4, action_dim=2, n_blocks=6, width=32)
        h = build_denoiser(cfg, seed=0)
        out = h.denoise(np.zeros((17, 7), dtype=np.float32), 1.0)
        assert out.shape == (17, 7) and np.isfinite(out).all()

    def test_shape_across_sigma_range(self):
        cfg = DenoiserConfig(horizon=7, state_dim=3, action_dim=2, n_blocks=4, width=24)
        h = build_denoiser(cfg, seed=1)
        x = np.random.default_rng(0).standard_normal((5, 8, 6)).astype(np.float32)
        for sigma in (0.002, 0.05, 1.0, 10.0, 80.0):
            assert h.denoise(x, sigma).shape == x.shape

    def test_same_seed_same_parameters(self):
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        a = build_denoiser(cfg, seed=3)
        b = build_denoiser(cfg, seed=3)
        assert np.array_equal(a.parameter_vector(), b.parameter_vector())
        c = build_denoiser(cfg, seed=4)
        assert not np.array_equal(a.parameter_vector(), c.parameter_vector())

    def test_forward_deterministic(self):
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        h = build_denoiser(cfg, seed=3)
        x = np.random.default_rng(1).standard_normal((3, 5, 4)).astype(np.float32)
        cond = np.array([0.1, np.nan, 0.9])
        assert np.array_equal(h.denoise(x, 0.7, cond), h.denoise(x, 0.7, cond))

    def test_sigma_zero_rejected(self):
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        h = build_denoiser(cfg, seed=0)
        with pytest.raises(ValueError, match="sigma"):
            h.denoise(np.zeros((5, 4), dtype=np.float32), 0.0)

    def test_sigma_batch_mismatch(self):
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        h = build_denoiser(cfg, seed=0)
        with pytest.raises(ValueError, match="batch"):
            h.denoise(np.zeros((3, 5, 4), dtype=np.float32), np.array([1.0, 2.0]))

    def test_small_sigma_is_near_identity(self):
        # c_skip -> 1 and c_out -> 0 pin the output to the input
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        h = build_denoiser(cfg, seed=5)
        x = np.random.default_rng(2).standard_normal((2, 5, 4)).astype(np.float32)
        out = h.denoise(x, 1e-6)
        assert np.abs(out - x).max() < 1e-5

    def test_null_equals_cond_before_conditional_training(self):
        # the conditional branch is a zero-initialized delta on the null path
        cfg = DenoiserConfig(horizon=4, state_dim=2, action_dim=1, width=16)
        h = build_denoiser(cfg, seed=6)
        x = np.random.default_rng(3).standard_normal((4, 5, 4)).astype(np.float32)
        assert np.array_equal(h.denoise(x, 0.5, np.full(4, 0.7)), h.denoise(x, 0.5, None))


class TestPreconditioning:
    def test_c_skip_half_at_sigma_data(self):
        c_skip, _, _, _ = precondition_coeffs(1.7, 1.7)
        assert c_skip == 0.5

    def test_coefficient_algebra(self):
        sd = 0.8
        for sigma in (0.01, 0.5, 3.0, 80.0):
            c_skip, c_out, c_in, c_noise = precondition_coeffs(sigma, sd)
            assert c_skip == pytest.approx(sd ** 2 / (sigma ** 2 + sd ** 2))
            assert c_out == pytest.approx(sigma * sd / np.sqrt(sigma ** 2 + sd ** 2))
            assert c_in == pytest.approx(1.0 / np.sqrt(sigma ** 2 + sd ** 2))
            assert c_noise == pytest.approx(np.log(sigma) / 4.0)
            # unit-variance input scaling
            assert c_in ** 2 * (sigma ** 2 + sd ** 2) == pytest.approx(1.0, rel=1e-12)


class TestScore:
    def test_fixed_point_zero_score(self):
        m, s = gaussian_4d()
        oracle = GaussianOracleDenoiser(m, s, (2, 2))
        x = m.reshape(1, 2, 2)
        score = score_from_denoiser(oracle, x, 0.5)
        np.testing.assert_allclose(score, 0.0, atol=1e-12)

    def test_matches_closed_form_gaussian_score(self):
        m, s = gaussian_4d()
        oracle = GaussianOracleDenoiser(m, s, (2, 2))
        rng = np.random.default_rng(4)
        for sigma in (0.2, 1.0, 3.0):
            x = rng.multivariate_normal(m, s + sigma ** 2 * np.eye(4), 50).reshape(-1, 2, 2)
            got = score_from_denoiser(oracle, x, sigma)
            np.testing.assert_allclose(got, oracle.score(x, sigma), rtol=1e-9, atol=1e-12)

    def test_sigma_scaling_identity(self):
        class ConstantDenoiser:
            def denoise(self, x, sigma, cond=None):
                return np.full_like(x, 2.0)

        x = np.zeros((1, 2, 2))
        s1 = score_from_denoiser(ConstantDenoiser(), x, 1.0)
        s2 = score_from_denoiser(ConstantDenoiser(), x, 2.0)
        np.testing.assert_allclose(s2, s1 / 4.0)


class TestGradientCheck:
    def test_analytic_matches_central_differences(self):
        cfg = DenoiserConfig(horizon=2, state_dim=2, action_dim=1, n_blocks=1,
                             width=8, time_embed_dim=8, cond_embed_dim=8)
        handle = build_denoiser(cfg, seed=0)
        net = handle.net.double()
        rng = np.random.default_rng(0)
        b = 4
        x0 = torch.as_tensor(rng.standard_normal((b, 3, 4)))
        sigma = torch.as_tensor(np.array([0.3, 0.7, 1.5, 0.05]))
        noise = torch.as_tensor(rng.standard_normal((b, 3, 4)))
        cond = torch.as_tensor(np.array([0.1, 0.5, 0.9, 0.3]))
        null = torch.as_tensor(np.array([False, True, False, False]))
        mask = torch.as_tensor(tensor_mask(2, 2, 1), dtype=torch.float64)

        def loss_fn():
            return _dsm_loss_torch(net, x0, sigma, noise, cond, null, mask,
                                   cfg.sigma_data, grad=True)

        loss = loss_fn()
        loss.backward()
        analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy()

        eps = 1e-6
        fd = np.empty_like(analytic)
        i = 0
        with torch.no_grad():
            for p in net.parameters():
                flat = p.reshape(-1)
                for j in range(flat.shape[0]):
                    orig = flat[j].item()
                    flat[j] = orig + eps
                    up = float(loss_fn())
                    flat[j] = orig - eps
                    down = float(loss_fn())
                    flat[j] = orig
                    fd[i] = (up - down) / (2 * eps)
                    i += 1
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(analytic),
                                                  np.linalg.norm(fd))
        assert rel < 1e-3


class TestTrainedBehavior:
    def test_cond_and_null_differ_after_training(self, trained_m16):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 17, 7)).astype(np.float32)
        cond = np.full(8, 0.9)
        d_cond = trained_m16.denoise(x, 1.0, cond)
        d_null = trained_m16.denoise(x, 1.0, None)
        assert np.abs(d_cond - d_null).max() > 1e-4

    def test_gaussian_posterior_mean_rmse(self, gaussian_fixture, trained_gaussian):
        m, s, oracle, _ = gaussian_fixture
        rng = np.random.default_rng(100)
        errs = []
        for sigma in (0.1, 0.2, 0.5, 1.0, 2.0):
            probes = rng.multivariate_normal(
                m, s + sigma ** 2 * np.eye(4), 1000
            ).reshape(-1, 2, 2)
            d_hat = trained_gaussian.denoise(probes.astype(np.float32), sigma)
            errs.append(((d_hat - oracle.denoise(probes, sigma)) ** 2).mean())
        rmse = float(np.sqrt(np.mean(errs)))
        assert rmse <= 0.05
