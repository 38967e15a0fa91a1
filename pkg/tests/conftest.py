"""Shared fixtures: toy datasets, analytic Gaussian oracles, and trained
denoisers reused across test modules (training them is the expensive part).

Set GTA_TEST_CACHE=/some/dir to cache trained checkpoints between runs;
cache keys include the full training recipe, so edits to the recipe
invalidate naturally.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest

import gta
from gta.denoiser import DenoiserConfig, build_denoiser
from gta.training import TrainConfig, fit_tensors, load_checkpoint, save_checkpoint, train


class GaussianOracleDenoiser:
    """Closed-form optimal denoiser for x0 ~ N(m, S) under additive Gaussian
    noise: D*(x; sigma) = m + S (S + sigma^2 I)^-1 (x - m). Ignores the
    condition argument."""

    def __init__(self, mean: np.ndarray, cov: np.ndarray, shape: tuple[int, int]):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.shape = shape
        assert int(np.prod(shape)) == self.mean.shape[0]

    def posterior_gain(self, sigma: float) -> np.ndarray:
        d = self.mean.shape[0]
        return self.cov @ np.linalg.inv(self.cov + sigma ** 2 * np.eye(d))

    def denoise(self, x: np.ndarray, sigma, cond=None) -> np.ndarray:
        sigma = float(np.asarray(sigma).reshape(-1)[0])
        single = x.ndim == 2
        flat = (x[None] if single else x).reshape(-1, self.mean.shape[0])
        out = self.mean + (flat - self.mean) @ self.posterior_gain(sigma).T
        out = out.reshape((1 if single else x.shape[0],) + self.shape)
        return out[0] if single else out

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        """Exact noisy-data score -(S + sigma^2 I)^-1 (x - m)."""
        d = self.mean.shape[0]
        flat = x.reshape(-1, d)
        prec = np.linalg.inv(self.cov + float(sigma) ** 2 * np.eye(d))
        return (-(flat - self.mean) @ prec.T).reshape(x.shape)


def gaussian_4d(seed: int = 7):
    """A fixed well-conditioned 4-d Gaussian mapped onto (2, 2) tensors."""
    rng = np.random.default_rng(seed)
    m = np.array([0.5, -0.3, 1.0, 0.2])
    a = rng.normal(size=(4, 4)) * 0.5
    s = a @ a.T + 0.1 * np.eye(4)
    return m, s


def _cache_dir() -> Path | None:
    d = os.environ.get("GTA_TEST_CACHE")
    if not d:
        return None
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cached(key_parts: dict, builder):
    """Train-or-load helper keyed by the full recipe."""
    cache = _cache_dir()
    if cache is None:
        return builder()
    key = hashlib.sha256(json.dumps(key_parts, sort_keys=True).encode()).hexdigest()[:16]
    path = cache / f"denoiser_{key}.ckpt"
    if path.is_file():
        return load_checkpoint(path)
    handle = builder()
    save_checkpoint(handle, path)
    return handle


MEDIUM_SEED = 11


@pytest.fixture(scope="session")
def dense_env():
    return gta.make_env("pointmass-dense-v0")


@pytest.fixture(scope="session")
def sparse_env():
    return gta.make_env("pointmass-sparse-v0")


@pytest.fixture(scope="session")
def medium_dataset(dense_env):
    return gta.generate_dataset(dense_env, "medium", 200, seed=MEDIUM_SEED)


@pytest.fixture(scope="session")
def sparse_dataset(sparse_env):
    return gta.generate_dataset(sparse_env, "medium", 300, seed=21)


M16_RECIPE = {
    "kind": "m16",
    "dataset": ["pointmass-dense-v0", "medium", 200, MEDIUM_SEED],
    "config": {"horizon": 16, "state_dim": 4, "action_dim": 2, "n_blocks": 6, "width": 64},
    "train": {"batch_size": 128, "steps": 4000, "seed": 1, "cond_dropout": 0.25},
}


@pytest.fixture(scope="session")
def trained_m16(medium_dataset):
    """Horizon-16 denoiser trained on the medium dense dataset; the shared
    workhorse for augmentation and guidance tests."""

    def builder():
        config = DenoiserConfig(**M16_RECIPE["config"])
        handle = build_denoiser(config, seed=0)
        handle, _ = train(handle, medium_dataset, TrainConfig(**M16_RECIPE["train"]))
        return handle

    return _cached(M16_RECIPE, builder)


M1_RECIPE = {
    "kind": "m1",
    "dataset": ["pointmass-dense-v0", "medium", 200, MEDIUM_SEED],
    "config": {"horizon": 1, "state_dim": 4, "action_dim": 2, "n_blocks": 6, "width": 64},
    "train": {"batch_size": 128, "steps": 4000, "seed": 1, "cond_dropout": 0.25},
}


@pytest.fixture(scope="session")
def trained_m1(medium_dataset):
    """Transition-level (H=1) model trained with the same budget as
    trained_m16, for the horizon ablation."""

    def builder():
        config = DenoiserConfig(**M1_RECIPE["config"])
        handle = build_denoiser(config, seed=0)
        handle, _ = train(handle, medium_dataset, TrainConfig(**M1_RECIPE["train"]))
        return handle

    return _cached(M1_RECIPE, builder)


GAUSS_RECIPE = {
    "kind": "gauss4",
    "seed": 7,
    "config": {"horizon": 1, "state_dim": 1, "action_dim": 0, "n_blocks": 4, "width": 64},
    "train": {"batch_size": 256, "steps": 5000, "seed": 0, "cond_dropout": 0.0,
              "sigma_log_mean": -0.6, "sigma_log_std": 1.3},
}


@pytest.fixture(scope="session")
def gaussian_fixture():
    m, s = gaussian_4d()
    oracle = GaussianOracleDenoiser(m, s, (2, 2))
    rng = np.random.default_rng(7)
    data = rng.multivariate_normal(m, s, size=8192).astype(np.float32).reshape(-1, 2, 2)
    return m, s, oracle, data


@pytest.fixture(scope="session")
def trained_gaussian(gaussian_fixture):
    """Denoiser trained on the 4-d Gaussian; compared against the closed-form
    posterior mean."""
    m, s, oracle, data = gaussian_fixture

    def builder():
        config = DenoiserConfig(**GAUSS_RECIPE["config"],
                                sigma_data=float(data.std()))
        handle = build_denoiser(config, seed=0)
        handle, _ = fit_tensors(handle, data, TrainConfig(**GAUSS_RECIPE["train"]))
        return handle

    return _cached(GAUSS_RECIPE, builder)
