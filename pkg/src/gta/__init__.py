"""Generative trajectory augmentation for offline RL: train a
return-conditioned trajectory diffusion model, augment offline data by
partial noising and guided denoising, score the result with oracle metrics,
and verify downstream benefit with a minimal offline learner."""

from .data import (
    NormStats,
    ReweightConfig,
    SubTrajectory,
    TrajectoryDataset,
    decode_terminals,
    denormalize,
    encode_terminals,
    load_dataset,
    make_dataset,
    normalize,
    reweighted_episode_sample,
    reweighted_sample,
    save_dataset,
    slice_windows,
    window_return,
)
from .denoiser import DenoiserConfig, DenoiserHandle, build_denoiser, denoise, score_from_denoiser
from .envs import PointMassEnv, SparsePointMassEnv, generate_dataset, make_env
from .metrics import (
    QualityReport,
    compute_quality_report,
    condition_return_correlation,
    dynamic_mse,
    novelty,
    oracle_reward,
    welch_t_test,
)
from .rl import (
    Policy,
    ReplayBuffer,
    TD3BCConfig,
    build_replay,
    evaluate_policy,
    normalized_score,
    td3bc_train,
)
from .sampling import (
    AugmentConfig,
    NoiseSchedule,
    cfg_denoise,
    gaussian_noise_augment,
    gta_augment,
    karras_schedule,
    partial_noise,
    reverse_sample,
    windows_to_transitions,
)
from .training import TrainConfig, dsm_loss, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
