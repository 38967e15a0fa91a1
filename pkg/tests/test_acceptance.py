"""Acceptance criteria A1-A12.

Each test prints one PASS/FAIL line. Trained models come from session
fixtures in conftest so the expensive training runs are shared; the settings
there are the desk-scale defaults these thresholds were pinned against.
"""

import json
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

import gta
from gta.cli import build_parser, content_hash, main as cli_main
from gta.data import ReweightConfig, make_dataset, slice_windows, windows_to_tensor
from gta.denoiser import DenoiserConfig, build_denoiser
from gta.metrics import (
    condition_return_correlation,
    dynamic_mse,
    novelty,
    welch_t_test,
)
from gta.rl import TD3BCConfig, build_replay, evaluate_policy, td3bc_train
from gta.sampling import (
    AugmentConfig,
    cfg_denoise,
    gta_augment,
    karras_schedule,
    partial_noise,
    reverse_sample,
    windows_to_transitions,
)
from gta.training import TrainConfig, train

from conftest import GaussianOracleDenoiser, gaussian_4d


def report(tag: str, ok: bool, detail: str):
    print(f"\n[{tag}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{tag}: {detail}"


SCHEDULE = karras_schedule(n_steps=128)


def test_a1_gaussian_oracle_denoiser(gaussian_fixture, trained_gaussian):
    m, s, oracle, _ = gaussian_fixture
    rng = np.random.default_rng(100)
    sq_errs = []
    for sigma in (0.1, 0.2, 0.5, 1.0, 2.0):
        probes = rng.multivariate_normal(m, s + sigma ** 2 * np.eye(4), 1000)
        probes = probes.reshape(-1, 2, 2)
        d_hat = trained_gaussian.denoise(probes.astype(np.float32), sigma)
        sq_errs.append(((d_hat - oracle.denoise(probes, sigma)) ** 2).mean())
    rmse = float(np.sqrt(np.mean(sq_errs)))
    report("A1", rmse <= 0.05,
           f"trained denoiser vs closed-form posterior mean: RMSE {rmse:.4f} (<= 0.05)")


def test_a2_sampler_correctness():
    m, s = gaussian_4d(seed=3)
    oracle = GaussianOracleDenoiser(m, s, (2, 2))
    rng = np.random.default_rng(17)
    n = 10_000
    sched = karras_schedule(n_steps=64)
    x_init = sched.sigma_max * rng.standard_normal((n, 2, 2))
    out = reverse_sample(oracle, x_init, sched.n_steps, sched, rng=rng).reshape(n, 4)
    mean_err = np.linalg.norm(out.mean(0) - m) / np.linalg.norm(m)
    cov_err = np.linalg.norm(np.cov(out.T) - s) / np.linalg.norm(s)
    report("A2", mean_err <= 0.05 and cov_err <= 0.10,
           f"oracle-denoiser sampling from k=K: mean err {mean_err:.4f} (<= 0.05), "
           f"cov Frobenius err {cov_err:.4f} (<= 0.10)")


def test_a3_partial_noising_monotonicity(medium_dataset, trained_m16):
    pool = slice_windows(medium_dataset, 16)
    idx = np.random.default_rng(8).integers(0, len(pool), 256)
    sources = [pool[i] for i in idx]
    x_src, _ = windows_to_tensor(sources, medium_dataset.norm_stats)
    dists = []
    for mu in (0.1, 0.25, 0.5, 0.75, 1.0):
        cfg = AugmentConfig(noise_ratio=mu, return_multiplier=1.3,
                            guidance_scale=2.0, seed=5)
        out, _, _ = gta_augment(trained_m16, sources, cfg, SCHEDULE)
        x_gen, _ = windows_to_tensor(out, medium_dataset.norm_stats)
        dists.append(float(np.linalg.norm(
            (x_gen - x_src).reshape(len(out), -1), axis=1).mean()))
    ok = all(b >= a for a, b in zip(dists, dists[1:]))
    report("A3", ok, "mean ||augmented - original|| over mu grid: "
           + " -> ".join(f"{d:.3f}" for d in dists))


def test_a4_guidance_effect(medium_dataset, trained_m16):
    rw = ReweightConfig(n_bins=50, count_smoothing=0.001, distance_smoothing=5.0)
    sources = gta.reweighted_sample(medium_dataset, 16, rw, 512,
                                    np.random.default_rng(7))
    cfg = AugmentConfig(noise_ratio=0.5, return_multiplier=1.3,
                        guidance_scale=2.0, seed=5)
    amplified, _, _ = gta_augment(trained_m16, sources, cfg, SCHEDULE)
    unconditional, _, _ = gta_augment(trained_m16, sources, cfg, SCHEDULE,
                                      unconditional=True)
    ret_a = np.array([w.condition_y for w in amplified])
    ret_u = np.array([w.condition_y for w in unconditional])
    t, p = welch_t_test(ret_a, ret_u)
    ok = ret_a.mean() > ret_u.mean() and p < 0.05
    report("A4", ok,
           f"amplified return {ret_a.mean():.2f} vs unconditional {ret_u.mean():.2f}, "
           f"Welch t={t:.2f} p={p:.2e} (< 0.05)")


def test_a5_condition_return_correlation(medium_dataset, trained_m16):
    pool = slice_windows(medium_dataset, 16)
    idx = np.random.default_rng(9).integers(0, len(pool), 512)
    sources = [pool[i] for i in idx]
    cfg = AugmentConfig(noise_ratio=0.5, return_multiplier=1.3,
                        guidance_scale=2.0, seed=6)
    _, provenance, _ = gta_augment(trained_m16, sources, cfg, SCHEDULE)
    r = condition_return_correlation(provenance)
    report("A5", r >= 0.5, f"Pearson(condition, realized return) = {r:.3f} (>= 0.5)")


def test_a6_horizon_ablation(medium_dataset, dense_env, trained_m16, trained_m1):
    def augmented_dynamic_mse(handle, horizon, n_transitions=4096):
        pool = slice_windows(medium_dataset, horizon)
        idx = np.random.default_rng(3).integers(0, len(pool), n_transitions // horizon)
        sources = [pool[i] for i in idx]
        cfg = AugmentConfig(noise_ratio=0.5, return_multiplier=1.3,
                            guidance_scale=2.0, seed=9)
        out, _, _ = gta_augment(handle, sources, cfg, SCHEDULE)
        frag = windows_to_transitions(out, gamma=1.0, env_id=dense_env.env_id)
        return dynamic_mse(frag, dense_env.dynamics, medium_dataset.norm_stats)

    mse_16 = augmented_dynamic_mse(trained_m16, 16)
    mse_1 = augmented_dynamic_mse(trained_m1, 1)
    ok = mse_1 >= 2.0 * mse_16
    report("A6", ok,
           f"dynamic MSE H=1: {mse_1:.4f} vs H=16: {mse_16:.4f} "
           f"(ratio {mse_1 / mse_16:.2f}, required >= 2)")


def test_a7_downstream_rl_gain(medium_dataset, dense_env, trained_m16):
    pool = slice_windows(medium_dataset, 16)
    idx = np.random.default_rng(3).integers(0, len(pool), 1600)
    sources = [pool[i] for i in idx]
    # on this env returns are negative, so pushing returns toward their
    # maximum means multiplying by alpha < 1 (see the decisions ledger)
    cfg = AugmentConfig(noise_ratio=0.5, return_multiplier=0.7,
                        guidance_scale=2.0, seed=5)
    out, _, _ = gta_augment(trained_m16, sources, cfg, SCHEDULE)
    fragment = windows_to_transitions(out, gamma=1.0, env_id=dense_env.env_id)

    def arm(sources_list):
        scores = []
        for seed in range(4):
            replay = build_replay(sources_list, stats=medium_dataset.norm_stats,
                                  rng=np.random.default_rng(seed))
            policy = td3bc_train(
                replay, TD3BCConfig(batch_size=256, gradient_steps=8000, seed=seed))
            mean, _ = evaluate_policy(dense_env, policy, 10,
                                      np.random.default_rng(10_000 + seed))
            scores.append(mean)
        return np.array(scores)

    baseline = arm([medium_dataset])
    augmented = arm([fragment])
    t, p = welch_t_test(augmented, baseline)
    floor = baseline.mean() - baseline.std()
    ok = augmented.mean() >= baseline.mean() and (augmented >= floor).all()
    report("A7", ok,
           f"TD3+BC return: GTA {augmented.mean():.2f}+-{augmented.std():.2f} vs "
           f"baseline {baseline.mean():.2f}+-{baseline.std():.2f}; per-seed floor "
           f"{floor:.2f}; Welch t={t:.2f} p={p:.3f}")


def test_a8_reweighted_sampling():
    from gta.data import window_bin_weights

    rng = np.random.default_rng(0)
    n_eps, ep_len = 150, 8
    n = n_eps * ep_len
    rewards = np.repeat(rng.normal(size=n_eps), ep_len)
    ds = make_dataset(rng.normal(size=(n, 2)), rng.normal(size=(n, 1)), rewards,
                      np.zeros(n, bool), np.arange(0, n, ep_len))
    cfg = ReweightConfig(n_bins=50, count_smoothing=0.001, distance_smoothing=5.0)
    windows = slice_windows(ds, 2)
    returns = np.array([w.condition_y for w in windows])
    weights, assignment = window_bin_weights(returns, cfg)
    probs = weights / weights.sum()

    draws = gta.reweighted_sample(ds, 2, cfg, 50_000, np.random.default_rng(1))
    lookup = {float(r): a for r, a in zip(returns, assignment)}
    counts = np.bincount([lookup[float(w.condition_y)] for w in draws], minlength=50)
    live = probs > 0
    expected = probs[live] * 50_000
    stat = float(((counts[live] - expected) ** 2 / expected).sum())
    crit = scipy_stats.chi2.ppf(0.999, df=int(live.sum()) - 1)

    # Table-4 defaults must load from a config file bit-exactly
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        cfg_path = Path(d) / "cfg.json"
        cfg_path.write_text(json.dumps(
            {"reweight_bins": 50, "reweight_u": 0.001, "reweight_q": 5.0}))
        parser, subparsers = build_parser()
        subparsers["train-diffusion"].set_defaults(**json.loads(cfg_path.read_text()))
        args = parser.parse_args(["train-diffusion", "--data", "x", "--out", "y"])
        exact = (args.reweight_bins == 50 and args.reweight_u == 0.001
                 and args.reweight_q == 5.0)
    ok = stat < crit and exact
    report("A8", ok,
           f"chi-square {stat:.1f} < 0.999 quantile {crit:.1f} over 50k draws; "
           f"Table-4 defaults load bit-exactly: {exact}")


def test_a9_cfg_identities(medium_dataset):
    config = DenoiserConfig(horizon=8, state_dim=4, action_dim=2, n_blocks=4, width=32)
    handle = build_denoiser(config, seed=2)
    x = np.random.default_rng(0).standard_normal((6, 9, 7)).astype(np.float32)
    cond = np.linspace(0.1, 0.9, 6)
    w0_identical = np.array_equal(
        cfg_denoise(handle, x, 0.7, cond, 0.0), handle.denoise(x, 0.7, cond))

    lam1 = build_denoiser(config, seed=3)
    lam1, _ = train(lam1, medium_dataset,
                    TrainConfig(batch_size=64, steps=300, cond_dropout=1.0, seed=4,
                                log_every=100))
    probes = np.random.default_rng(1).standard_normal((16, 9, 7)).astype(np.float32)
    dev = float(np.abs(
        lam1.denoise(probes, 1.0, np.full(16, 0.8)) - lam1.denoise(probes, 1.0, None)
    ).max())
    ok = w0_identical and dev < 1e-5
    report("A9", ok,
           f"w=0 bit-identical to conditional denoise: {w0_identical}; "
           f"lambda=1 model cond-vs-null max deviation {dev:.2e} (< 1e-5)")


def test_a10_format_and_pipeline_determinism(tmp_path):
    # container round trip
    rng = np.random.default_rng(0)
    ds = make_dataset(rng.normal(size=(64, 3)), rng.normal(size=(64, 2)),
                      rng.normal(size=64), np.zeros(64, bool), np.array([0, 32]))
    gta.save_dataset(ds, tmp_path / "rt")
    back = gta.load_dataset(tmp_path / "rt")
    round_trip = all(
        np.array_equal(getattr(back, f), getattr(ds, f))
        for f in ("observations", "actions", "rewards", "terminals", "episode_offsets")
    )

    def pipeline(root):
        root = str(root)
        env = ["--env", "pointmass-dense-v0"]
        assert cli_main(["gen-data", *env, "--quality", "medium", "--episodes", "40",
                         "--seed", "3", "--out", f"{root}/gen"]) == 0
        assert cli_main(["train-diffusion", "--data", f"{root}/gen/data",
                         "--horizon", "8", "--steps", "200", "--batch-size", "32",
                         "--width", "24", "--blocks", "3", "--seed", "3",
                         "--out", f"{root}/train"]) == 0
        assert cli_main(["augment", "--ckpt", f"{root}/train/denoiser.ckpt",
                         "--data", f"{root}/gen/data", "--mu", "0.5", "--alpha", "0.7",
                         "--w", "2.0", "--n-transitions", "1000", "--steps", "32",
                         "--seed", "3", "--out", f"{root}/aug"]) == 0
        assert cli_main(["quality", "--aug", f"{root}/aug/data",
                         "--ref", f"{root}/gen/data", *env,
                         "--out", f"{root}/quality"]) == 0
        assert cli_main(["rl", "--replay", f"{root}/aug/data", *env, "--seeds", "2",
                         "--gradient-steps", "200", "--batch-size", "64",
                         "--eval-episodes", "2", "--out", f"{root}/rl"]) == 0
        hashes = {}
        for stage in ("gen", "train", "aug", "quality", "rl"):
            manifest = json.loads(
                (Path(root) / stage / "manifest.json").read_text())
            hashes[stage] = manifest["outputs"]
        return hashes

    h1 = pipeline(tmp_path / "run1")
    h2 = pipeline(tmp_path / "run2")
    deterministic = h1 == h2
    ok = round_trip and deterministic
    report("A10", ok,
           f"container round-trip bit-exact: {round_trip}; "
           f"two full pipeline runs produce identical content hashes: {deterministic}")


def test_a11_metric_oracles():
    rng = np.random.default_rng(5)

    def flat(points, actions):
        n = points.shape[0]
        return make_dataset(np.repeat(points, 2, axis=0), np.repeat(actions, 2, axis=0),
                            np.zeros(2 * n), np.zeros(2 * n, bool),
                            np.arange(0, 2 * n, 2))

    ref = flat(rng.normal(size=(2000, 4)), rng.normal(size=(2000, 2)))
    aug = flat(rng.normal(size=(500, 4)), rng.normal(size=(500, 2)))
    got = novelty(aug, ref, "joint")
    ref_pts = np.hstack([ref.observations, ref.actions])[::2]
    q_pts = np.hstack([aug.observations, aug.actions])[::2]
    brute = ((q_pts[:, None, :] - ref_pts[None, :, :]) ** 2).sum(-1).min(1).mean()
    nn_ok = abs(got - brute) <= 1e-10

    welch_ok = True
    for _ in range(100):
        a = rng.normal(rng.normal(), rng.uniform(0.5, 2), size=rng.integers(3, 40))
        b = rng.normal(rng.normal(), rng.uniform(0.5, 2), size=rng.integers(3, 40))
        t, p = welch_t_test(a, b)
        reference = scipy_stats.ttest_ind(a, b, equal_var=False)
        welch_ok &= abs(t - reference.statistic) <= 1e-10
        welch_ok &= abs(p - reference.pvalue) <= 1e-10
    ok = nn_ok and welch_ok
    report("A11", ok,
           f"novelty matches brute force to 1e-10: {nn_ok}; "
           f"Welch matches reference on 100 fixtures to 1e-10: {welch_ok}")


def test_a12_terminal_encoding(sparse_env, sparse_dataset):
    # encode / decode round trip on real sparse rewards is exact
    encoded = gta.encode_terminals(sparse_dataset)
    decoded = gta.decode_terminals(encoded)
    round_trip = np.array_equal(decoded.rewards, sparse_dataset.rewards)

    config = DenoiserConfig(horizon=16, state_dim=4, action_dim=2, n_blocks=6, width=64)
    handle = build_denoiser(config, seed=0)
    handle, _ = train(handle, encoded,
                      TrainConfig(batch_size=128, steps=2500, seed=2, log_every=500),
                      reweight=ReweightConfig(mode="episode", success_weight=10.0))
    sources = gta.reweighted_episode_sample(
        encoded, 16, ReweightConfig(mode="episode", success_weight=10.0), 512,
        np.random.default_rng(3))
    cfg = AugmentConfig(noise_ratio=0.25, return_multiplier=1.0,
                        guidance_scale=2.0, seed=4)
    out, _, _ = gta_augment(handle, sources, cfg, SCHEDULE)
    fragment = windows_to_transitions(out, terminal_decode=True, gamma=1.0,
                                      env_id=sparse_env.env_id)
    per_window = fragment.terminals.reshape(len(out), 17).sum(axis=1)
    at_most_one = int((per_window <= 1).sum())
    ok = round_trip and at_most_one == len(out)
    report("A12", ok,
           f"encode/decode round-trip exact: {round_trip}; windows with <= 1 decoded "
           f"terminal: {at_most_one}/{len(out)}")
