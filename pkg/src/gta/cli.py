"""Command-line pipeline: gen-data, train-diffusion, augment, quality, rl,
report. Every command writes its outputs under --out together with a run
manifest (merged config, seed, input/output content hashes)."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ContainerError,
    ReweightConfig,
    encode_terminals,
    load_dataset,
    save_dataset,
    slice_windows,
    reweighted_episode_sample,
    reweighted_sample,
)
from .denoiser import DenoiserConfig, build_denoiser
from .envs import ENV_REGISTRY, make_env, generate_dataset
from .metrics import compute_quality_report, welch_t_test
from .rl import TD3BCConfig, build_replay, evaluate_policy, save_policy, td3bc_train
from .sampling import AugmentConfig, gta_augment, karras_schedule, windows_to_transitions
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_USAGE = 2
EXIT_RUNTIME = 3

# keys stripped before hashing so reruns produce identical content hashes
_VOLATILE_KEYS = {"wall_ms", "wall_time_s", "timestamp"}


def _strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k not in _VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def content_hash(path: str | Path) -> str:
    """Hash a file or directory; JSON/JSONL content is canonicalized with
    volatile fields (wall times) removed."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for child in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(child.relative_to(path).as_posix().encode())
            h.update(content_hash(child).encode())
        return h.hexdigest()
    if path.suffix == ".json":
        data = _strip_volatile(json.loads(path.read_text()))
        h.update(json.dumps(data, sort_keys=True).encode())
    elif path.suffix == ".jsonl":
        for line in path.read_text().splitlines():
            if line.strip():
                h.update(json.dumps(_strip_volatile(json.loads(line)), sort_keys=True).encode())
                h.update(b"\n")
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list[Path],
                    outputs: list[Path], t_start: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): content_hash(p) for p in inputs},
        "outputs": {str(p.relative_to(out_dir)): content_hash(p) for p in outputs},
        "wall_time_s": time.perf_counter() - t_start,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_config_file(argv: list[str]) -> dict:
    """Extract --config FILE (JSON) if present; its values become parser
    defaults so explicit flags still win."""
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return json.loads(Path(argv[i + 1]).read_text())
        if tok.startswith("--config="):
            return json.loads(Path(tok.split("=", 1)[1]).read_text())
    return {}


def _ns_config(args: argparse.Namespace) -> dict:
    def conv(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        return v

    return {k: conv(v) for k, v in vars(args).items() if k not in ("func", "config")}


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    env = make_env(args.env)
    dataset = generate_dataset(
        env, args.quality, args.episodes, seed=args.seed,
        mixed_expert_per=args.mixed_expert_per, gamma=args.gamma,
    )
    out = Path(args.out)
    data_dir = out / "data"
    save_dataset(dataset, data_dir)
    _write_manifest(out, "gen-data", _ns_config(args), [], [data_dir], t0)
    print(f"wrote {dataset.n_total} transitions / {dataset.n_episodes} episodes to {data_dir}")
    return 0


def _reweight_from_args(args) -> ReweightConfig | None:
    if args.reweight == "none":
        return None
    return ReweightConfig(
        n_bins=args.reweight_bins,
        count_smoothing=args.reweight_u,
        distance_smoothing=args.reweight_q,
        success_weight=args.success_weight,
        mode=args.reweight,
    )


def cmd_train_diffusion(args) -> int:
    t0 = time.perf_counter()
    dataset = load_dataset(args.data)
    if dataset.terminals.any() and not dataset.norm_stats.terminal_encoded:
        dataset = encode_terminals(dataset)
    config = DenoiserConfig(
        horizon=args.horizon,
        state_dim=dataset.state_dim,
        action_dim=dataset.action_dim,
        n_blocks=args.blocks,
        width=args.width,
    )
    handle = build_denoiser(config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = TrainConfig(
        batch_size=args.batch_size,
        steps=args.steps,
        lr=args.lr,
        cond_dropout=args.cond_dropout,
        seed=args.seed,
    )
    log_path = out / "metrics.jsonl"
    handle, _ = train(handle, dataset, train_cfg, _reweight_from_args(args), log_path)
    ckpt_path = out / "denoiser.ckpt"
    save_checkpoint(handle, ckpt_path)
    _write_manifest(out, "train-diffusion", _ns_config(args), [Path(args.data)],
                    [ckpt_path, log_path], t0)
    print(f"trained {args.steps} steps; checkpoint at {ckpt_path}")
    return 0


def cmd_augment(args) -> int:
    t0 = time.perf_counter()
    handle = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    if dataset.state_dim != handle.config.state_dim or dataset.action_dim != handle.config.action_dim:
        raise ContainerError(
            f"checkpoint expects d_s={handle.config.state_dim}, d_a={handle.config.action_dim}; "
            f"dataset has d_s={dataset.state_dim}, d_a={dataset.action_dim}"
        )
    if handle.terminal_encoded and not dataset.norm_stats.terminal_encoded:
        dataset = encode_terminals(dataset)

    horizon = handle.config.horizon
    n_transitions = args.n_transitions or 4 * dataset.n_total
    n_windows = max(1, -(-n_transitions // horizon))
    rng = np.random.default_rng(args.seed)
    reweight = _reweight_from_args(args)
    if reweight is None:
        pool = slice_windows(dataset, horizon)
        idx = rng.integers(0, len(pool), size=n_windows)
        sources = [pool[i] for i in idx]
    elif reweight.mode == "episode":
        sources = reweighted_episode_sample(dataset, horizon, reweight, n_windows, rng)
    else:
        sources = reweighted_sample(dataset, horizon, reweight, n_windows, rng)

    schedule = karras_schedule(n_steps=args.steps)
    aug_cfg = AugmentConfig(
        noise_ratio=args.mu,
        return_multiplier=args.alpha,
        guidance_scale=args.w,
        n_transitions=n_transitions,
        seed=args.seed,
    )
    windows, provenance, n_rejected = gta_augment(
        handle, sources, aug_cfg, schedule, unconditional=args.unconditional
    )
    fragment = windows_to_transitions(
        windows,
        terminal_decode=handle.terminal_encoded,
        gamma=float(handle.train_meta.get("gamma", 1.0)),
        env_id=str(handle.train_meta.get("env_id", "")),
    )
    out = Path(args.out)
    data_dir = out / "data"
    save_dataset(fragment, data_dir)
    prov_path = out / "provenance.jsonl"
    with open(prov_path, "w") as f:
        for rec in provenance:
            f.write(json.dumps(rec) + "\n")
    stats_path = out / "rejections.json"
    stats_path.write_text(json.dumps({"n_rejected": n_rejected, "n_kept": len(windows)}) + "\n")
    _write_manifest(out, "augment", _ns_config(args), [Path(args.ckpt), Path(args.data)],
                    [data_dir, prov_path, stats_path], t0)
    print(f"augmented {len(windows)} windows ({fragment.n_total} rows, "
          f"{n_rejected} rejected) to {data_dir}")
    return 0


def cmd_quality(args) -> int:
    t0 = time.perf_counter()
    aug = load_dataset(args.aug)
    ref = load_dataset(args.ref)
    env = make_env(args.env)
    provenance = None
    prov_path = Path(args.aug).parent / "provenance.jsonl"
    if prov_path.is_file():
        provenance = [json.loads(l) for l in prov_path.read_text().splitlines() if l.strip()]
    report = compute_quality_report(aug, ref, env, provenance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "quality.json"
    report_path.write_text(report.to_json() + "\n")
    _write_manifest(out, "quality", _ns_config(args), [Path(args.aug), Path(args.ref)],
                    [report_path], t0)
    for line in report.to_json().splitlines():
        print(line)
    return 0


def cmd_rl(args) -> int:
    t0 = time.perf_counter()
    sources = [load_dataset(p) for p in args.replay]
    mix = None
    if args.mix_ratio:
        mix = tuple(float(x) for x in args.mix_ratio.split(":"))
    env = make_env(args.env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    outputs = []
    for seed in range(args.seeds):
        replay = build_replay(sources, mix, rng=np.random.default_rng(seed))
        cfg = TD3BCConfig(
            batch_size=args.batch_size,
            gradient_steps=args.gradient_steps,
            bc_weight=args.bc_weight,
            seed=seed,
        )
        policy = td3bc_train(replay, cfg)
        mean, std = evaluate_policy(env, policy, args.eval_episodes,
                                    np.random.default_rng(10_000 + seed))
        ckpt_path = out / f"policy_seed{seed}.ckpt"
        save_policy(policy, ckpt_path)
        outputs.append(ckpt_path)
        results.append({"seed": seed, "mean_return": mean, "std_return": std})
        print(f"seed {seed}: return {mean:.3f} +- {std:.3f}")
    scores_path = out / "scores.json"
    scores_path.write_text(json.dumps({
        "env": args.env,
        "replay": [str(p) for p in args.replay],
        "per_seed": results,
        "mean": float(np.mean([r["mean_return"] for r in results])),
        "std": float(np.std([r["mean_return"] for r in results])),
    }, indent=2) + "\n")
    outputs.append(scores_path)
    _write_manifest(out, "rl", _ns_config(args), [Path(p) for p in args.replay], outputs, t0)
    return 0


def cmd_report(args) -> int:
    runs = []
    for run in args.runs:
        scores = json.loads((Path(run) / "scores.json").read_text())
        runs.append({
            "run": str(run),
            "scores": [r["mean_return"] for r in scores["per_seed"]],
            "mean": scores["mean"],
            "std": scores["std"],
        })
    report: dict = {"runs": runs}
    for r in runs:
        print(f"{r['run']}: mean {r['mean']:.3f} +- {r['std']:.3f} over {len(r['scores'])} seeds")
    if len(runs) == 2:
        a, b = (np.array(r["scores"]) for r in runs)
        if len(a) < 2 or len(b) < 2:
            raise ValueError("need at least 2 seeds per arm for a t-test")
        t, p = welch_t_test(a, b)
        report["welch_t"] = t
        report["welch_p"] = p
        print(f"Welch t={t:.4f} p={p:.4g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="gta", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)
    subparsers: dict[str, argparse.ArgumentParser] = {}

    def add_common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True)

    p = subparsers["gen-data"] = sub.add_parser("gen-data", help="synthesize an offline dataset from a toy env")
    p.add_argument("--env", required=True, choices=sorted(ENV_REGISTRY))
    p.add_argument("--quality", required=True, choices=["random", "medium", "expert", "mixed"])
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--mixed-expert-per", type=int, default=10,
                   help="medium episodes per expert episode in mixed quality")
    add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = subparsers["train-diffusion"] = sub.add_parser("train-diffusion", help="train the trajectory denoiser")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--horizon", type=int, default=16)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--lambda", dest="cond_dropout", type=float, default=0.25,
                   help="condition dropout probability")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--reweight", choices=["none", "window", "episode"], default="none")
    p.add_argument("--reweight-bins", type=int, default=50)
    p.add_argument("--reweight-u", type=float, default=0.001)
    p.add_argument("--reweight-q", type=float, default=5.0)
    p.add_argument("--success-weight", type=float, default=10.0)
    add_common(p)
    p.set_defaults(func=cmd_train_diffusion)

    p = subparsers["augment"] = sub.add_parser("augment", help="partial-noise/denoise augmentation")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mu", type=float, default=0.5, help="noising ratio in (0, 1]")
    p.add_argument("--alpha", type=float, default=1.3, help="return multiplier")
    p.add_argument("--w", type=float, default=2.0, help="guidance scale")
    p.add_argument("--n-transitions", type=int, default=0,
                   help="target transition count (default: 4x source size)")
    p.add_argument("--steps", type=int, default=128, help="diffusion steps K")
    p.add_argument("--unconditional", action="store_true",
                   help="ignore returns; denoise with the null condition")
    p.add_argument("--reweight", choices=["none", "window", "episode"], default="none")
    p.add_argument("--reweight-bins", type=int, default=50)
    p.add_argument("--reweight-u", type=float, default=0.001)
    p.add_argument("--reweight-q", type=float, default=5.0)
    p.add_argument("--success-weight", type=float, default=10.0)
    add_common(p)
    p.set_defaults(func=cmd_augment)

    p = subparsers["quality"] = sub.add_parser("quality", help="score an augmented dataset against oracles")
    p.add_argument("--aug", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--env", required=True, choices=sorted(ENV_REGISTRY))
    add_common(p)
    p.set_defaults(func=cmd_quality)

    p = subparsers["rl"] = sub.add_parser("rl", help="train TD3+BC per seed on replay sources")
    p.add_argument("--replay", type=Path, nargs="+", required=True)
    p.add_argument("--env", required=True, choices=sorted(ENV_REGISTRY))
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--mix-ratio", default=None,
                   help="colon-separated subsampling ratio across sources, e.g. 1:1")
    p.add_argument("--gradient-steps", type=int, default=20_000)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--bc-weight", type=float, default=2.5)
    p.add_argument("--eval-episodes", type=int, default=10)
    add_common(p)
    p.set_defaults(func=cmd_rl)

    p = subparsers["report"] = sub.add_parser("report", help="aggregate rl runs; Welch test for two arms")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_report)

    return parser, subparsers


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser, subparsers = build_parser()
    try:
        file_config = _load_config_file(argv)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: cannot read config file: {e}", file=sys.stderr)
        return EXIT_USAGE
    if file_config:
        # config values become subcommand defaults; explicit flags still win
        if not argv or argv[0] not in subparsers:
            print("error: --config requires a subcommand", file=sys.stderr)
            return EXIT_USAGE
        sp = subparsers[argv[0]]
        known = {a.dest for a in sp._actions}
        bad = set(file_config) - known
        if bad:
            print(f"error: unknown config keys {sorted(bad)}", file=sys.stderr)
            return EXIT_USAGE
        sp.set_defaults(**file_config)
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
