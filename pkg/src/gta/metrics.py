"""Data-quality metrics for augmented datasets: dynamics error against the
true environment model, nearest-neighbor novelty, oracle reward, condition
tracking, and Welch's t-test."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import betainc

from .data import NormStats, TrajectoryDataset, data_row_indices, transition_pairs


@dataclass(frozen=True)
class QualityReport:
    dynamic_mse: float
    novelty_joint: float
    novelty_state: float
    novelty_action: float
    oracle_reward_mean: float
    pearson_condition_return: float | None
    n_evaluated: int
    n_dynamics_excluded: int = 0

    def to_json(self) -> str:
        # fixed field order for byte-stable reports
        d = {
            "dynamic_mse": self.dynamic_mse,
            "novelty_joint": self.novelty_joint,
            "novelty_state": self.novelty_state,
            "novelty_action": self.novelty_action,
            "oracle_reward_mean": self.oracle_reward_mean,
            "pearson_condition_return": self.pearson_condition_return,
            "n_evaluated": self.n_evaluated,
            "n_dynamics_excluded": self.n_dynamics_excluded,
        }
        return json.dumps(d, indent=2)


def _normalize_obs(obs: np.ndarray, stats: NormStats) -> np.ndarray:
    return (obs - stats.obs_mean) / stats.obs_std


def _normalize_act(act: np.ndarray, stats: NormStats) -> np.ndarray:
    return (act - stats.act_mean) / stats.act_std


def dynamic_mse(
    augmented: TrajectoryDataset,
    dynamics_fn,
    stats: NormStats,
    return_details: bool = False,
):
    """Mean squared error between the true successor f*(s, a) and the stored
    successor s', in z-scored state units. Transitions where the oracle is
    undefined (non-finite output) are excluded and counted."""
    s, a, _, s_next, _ = transition_pairs(augmented)
    pred = np.stack([dynamics_fn(si, ai) for si, ai in zip(s, a)])
    valid = np.isfinite(pred).all(axis=1)
    err = _normalize_obs(pred[valid], stats) - _normalize_obs(s_next[valid], stats)
    mse = float((err ** 2).sum(axis=1).mean())
    if return_details:
        return mse, int(valid.sum()), int((~valid).sum())
    return mse


def novelty(
    augmented: TrajectoryDataset,
    reference: TrajectoryDataset,
    projection: str = "joint",
    squared: bool = True,
) -> float:
    """Mean distance from each augmented (s, a) point to its exact nearest
    neighbor in the reference data. Both datasets must be in the same
    (normalized) units. projection: joint | state | action."""
    if reference.n_total == 0:
        raise ValueError("reference dataset is empty")

    def _project(ds: TrajectoryDataset) -> np.ndarray:
        rows = data_row_indices(ds)
        if projection == "joint":
            return np.hstack([ds.observations[rows], ds.actions[rows]])
        if projection == "state":
            return ds.observations[rows]
        if projection == "action":
            return ds.actions[rows]
        raise ValueError(f"unknown projection {projection!r}")

    query = _project(augmented).astype(np.float64)
    pool = _project(reference).astype(np.float64)
    dist, _ = cKDTree(pool).query(query, k=1, workers=-1)
    return float((dist ** 2).mean() if squared else dist.mean())


def oracle_reward(augmented: TrajectoryDataset, reward_fn) -> float:
    """Mean true environment reward over the generated (s, a) pairs."""
    rows = data_row_indices(augmented)
    s = augmented.observations[rows]
    a = augmented.actions[rows]
    return float(np.mean([reward_fn(si, ai) for si, ai in zip(s, a)]))


def condition_return_correlation(provenance: list[dict]) -> float:
    """Pearson correlation between the conditioning value and the realized
    return of the generated window."""
    conds = np.array(
        [p["condition_value"] for p in provenance if p.get("condition_value") is not None],
        dtype=np.float64,
    )
    realized = np.array(
        [p["realized_return"] for p in provenance if p.get("condition_value") is not None],
        dtype=np.float64,
    )
    if conds.shape[0] < 3:
        raise ValueError("need at least 3 conditioned provenance records")
    if conds.std() == 0 or realized.std() == 0:
        raise ValueError("degenerate variance: correlation undefined")
    return float(np.corrcoef(conds, realized)[0, 1])


def welch_t_test(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Unequal-variance t statistic and two-sided p-value with
    Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.shape[0], b.shape[0]
    se2 = va / na + vb / nb
    if se2 == 0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    dof = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    # two-sided p via the regularized incomplete beta form of the t CDF
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t ** 2)))
    return float(t), p


def compute_quality_report(
    augmented: TrajectoryDataset,
    reference: TrajectoryDataset,
    env,
    provenance: list[dict] | None = None,
) -> QualityReport:
    """Full report against an environment oracle. Distance-based metrics are
    computed in the reference dataset's normalized units."""
    stats = reference.norm_stats
    mse, n_eval, n_excl = dynamic_mse(augmented, env.dynamics, stats, return_details=True)

    aug_n = _normalize_with(augmented, stats)
    ref_n = _normalize_with(reference, stats)
    nov_joint = novelty(aug_n, ref_n, "joint")
    nov_state = novelty(aug_n, ref_n, "state")
    nov_action = novelty(aug_n, ref_n, "action")

    reward_mean = oracle_reward(augmented, env.reward)
    pearson = None
    if provenance:
        conditioned = [p for p in provenance if p.get("condition_value") is not None]
        if len(conditioned) >= 3:
            pearson = condition_return_correlation(conditioned)
    return QualityReport(
        dynamic_mse=mse,
        novelty_joint=nov_joint,
        novelty_state=nov_state,
        novelty_action=nov_action,
        oracle_reward_mean=reward_mean,
        pearson_condition_return=pearson,
        n_evaluated=n_eval,
        n_dynamics_excluded=n_excl,
    )


def _normalize_with(ds: TrajectoryDataset, stats: NormStats) -> TrajectoryDataset:
    import dataclasses

    return dataclasses.replace(
        ds,
        observations=_normalize_obs(ds.observations, stats).astype(np.float32),
        actions=_normalize_act(ds.actions, stats).astype(np.float32),
        norm_stats=dataclasses.replace(stats, normalized=True),
    )
