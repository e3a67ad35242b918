"""Post-hoc analysis over run logs: stability, variance, heatmaps, masks.

All metrics consume the run-log records (StepReport) or raw trajectories;
nothing here feeds back into training. CSV rendering is plain text so the
plotting component and external tools can consume files without importing
this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .core import Trajectory, group_stats
from .env import HiddenIntentTask
from .infogain import (
    MODE_MARGINAL,
    MaskSpec,
    MaskStrategy,
    info_gain_exact_marginal,
    info_gain_per_turn,
)
from .rollout import RolloutConfig, rollout_group, valid_turn_flags
from .trainer import StepReport


@dataclass(frozen=True)
class StabilityMetrics:
    """Final score, best-to-final drop, and collapse fraction across seeds."""

    j_final: float
    delta_bf: float
    p_collapse: float


def eval_scores(reports: list[StepReport]) -> list[float]:
    return [r.eval_success for r in reports if r.eval_success is not None]


def stability_metrics(
    series: list[list[StepReport]], alpha: float = 0.5
) -> StabilityMetrics:
    """Aggregate per-seed evaluation curves.

    Per seed: the final evaluation score, the drop from the best checkpoint
    to the final one, and whether the final score fell below alpha times the
    seed's own best (a collapse).
    """
    if not series:
        raise ValueError("empty run series")
    finals, drops, collapses = [], [], []
    for reports in series:
        scores = eval_scores(reports)
        if len(scores) < 2:
            raise ValueError("need at least 2 evaluation checkpoints per seed")
        best = max(scores)
        final = scores[-1]
        finals.append(final)
        drops.append(best - final)
        collapses.append(final < alpha * best)
    return StabilityMetrics(
        j_final=float(np.mean(finals)),
        delta_bf=float(np.mean(drops)),
        p_collapse=float(np.mean(collapses)),
    )


def zero_variance_fraction(reports: list[StepReport]) -> float:
    """Fraction of rollout groups in the window with exactly zero outcome std."""
    flags = [flag for r in reports for flag in r.zero_variance_flags]
    if not flags:
        raise ValueError("window contains no rollout groups")
    return float(np.mean(flags))


def zero_variance_buckets(
    reports: list[StepReport],
    phase_fraction: float = 0.2,
    n_buckets: int = 5,
) -> list[float]:
    """Zero-variance fraction per bucket over the initial training phase.

    The initial phase is the first ``phase_fraction`` of iterations, split
    into equal-width buckets.
    """
    n = max(1, int(round(len(reports) * phase_fraction)))
    window = reports[:n]
    edges = np.linspace(0, len(window), n_buckets + 1).astype(int)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        chunk = window[lo:hi]
        if chunk:
            out.append(zero_variance_fraction(chunk))
    return out


def length_reward_correlation(
    lengths: list[float], rewards: list[float]
) -> tuple[float | None, bool]:
    """Pearson correlation of episode mean action length vs external reward.

    Returns (rho, defined); undefined when either variable has zero variance.
    """
    if len(lengths) != len(rewards):
        raise ValueError("lengths and rewards must align")
    if len(lengths) < 2:
        return None, False
    x = np.asarray(lengths, dtype=np.float64)
    y = np.asarray(rewards, dtype=np.float64)
    if np.std(x) == 0.0 or np.std(y) == 0.0:
        return None, False
    return float(np.corrcoef(x, y)[0, 1]), True


def episode_length_stats(trajectories: list[Trajectory], rewards: list[float]):
    lengths = [t.n_action_tokens / t.n_turns for t in trajectories]
    return length_reward_correlation(lengths, list(rewards))


def turn_heatmap(
    runs: list[list[StepReport]], n_buckets: int = 10
) -> np.ndarray:
    """Mean valid-turn info gain per [training bucket x turn index].

    Buckets are equal-width over iterations; cells with no valid turns are
    NaN. Multiple runs pool by valid-turn counts.
    """
    if not runs or not runs[0]:
        raise ValueError("need at least one nonempty run")
    n_iters = max(len(r) for r in runs)
    horizon = max(len(rep.per_turn_info_mean) for r in runs for rep in r)
    sums = np.zeros((n_buckets, horizon))
    counts = np.zeros((n_buckets, horizon))
    for reports in runs:
        for rep in reports:
            bucket = min(int(rep.iteration * n_buckets / n_iters), n_buckets - 1)
            for t, (mean, count) in enumerate(
                zip(rep.per_turn_info_mean, rep.per_turn_valid_counts)
            ):
                if count:
                    sums[bucket, t] += mean * count
                    counts[bucket, t] += count
    with np.errstate(invalid="ignore"):
        heatmap = sums / counts
    heatmap[counts == 0] = np.nan
    return heatmap


def heatmap_argmax_turn(heatmap: np.ndarray, bucket: int) -> int:
    """1-based turn index of the largest present cell in one bucket row."""
    row = heatmap[bucket]
    if np.all(np.isnan(row)):
        raise ValueError(f"bucket {bucket} has no populated cells")
    return int(np.nanargmax(row)) + 1


def heatmap_to_csv(heatmap: np.ndarray) -> str:
    """Render the heatmap as CSV: header row, then one row per bucket."""
    horizon = heatmap.shape[1]
    lines = ["bucket," + ",".join(f"turn_{t + 1}" for t in range(horizon))]
    for b in range(heatmap.shape[0]):
        cells = [
            "" if math.isnan(heatmap[b, t]) else repr(float(heatmap[b, t]))
            for t in range(horizon)
        ]
        lines.append(f"{b}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def heatmap_from_csv(text: str) -> np.ndarray:
    rows = []
    lines = [ln for ln in text.strip().splitlines() if ln]
    for line in lines[1:]:
        cells = line.split(",")[1:]
        rows.append([float(c) if c else math.nan for c in cells])
    return np.asarray(rows, dtype=np.float64)


@dataclass(frozen=True)
class MaskStrategySummary:
    strategy: str
    mean: float
    median: float
    iqr: float
    relative_gap: float
    t_test_p: float | None
    mann_whitney_p: float | None


def _summary_stats(values: np.ndarray) -> tuple[float, float, float]:
    q75, q25 = np.percentile(values, [75, 25])
    return float(np.mean(values)), float(np.median(values)), float(q75 - q25)


def mask_sensitivity(
    task: HiddenIntentTask,
    policy,
    strategies: list[str],
    n_turns: int = 200,
    baseline: str = MaskStrategy.FIXED_MASK_TOKEN.value,
    seed: int = 0,
    include_marginal: bool = False,
) -> dict:
    """Compare placeholder strategies on one shared sample of valid turns.

    Rolls groups until ``n_turns`` valid (trajectory, turn) pairs are
    collected, scores each pair under every strategy, and reports per-strategy
    location statistics plus the relative mean gap against the baseline
    strategy and two-sample location-test p-values. Optionally also scores
    the exact-marginal reward on the same turns, to expose the gap between
    the placeholder training signal and the quantity the theorems govern.
    """
    if len(strategies) < 2:
        raise ValueError("need at least 2 strategies to compare")
    if baseline not in strategies:
        raise ValueError(f"baseline {baseline!r} must be among the strategies")

    samples: list[tuple[Trajectory, int]] = []
    group_index = 0
    cfg = RolloutConfig(group_size=5, seed=seed)
    while len(samples) < n_turns and group_index < 200 * max(1, n_turns // 5):
        group, flags = rollout_group(task, policy, cfg, group_index=group_index)
        for traj, row in zip(group.trajectories, flags.flags):
            for t, ok in enumerate(row):
                if ok and len(samples) < n_turns:
                    samples.append((traj, t))
        group_index += 1
    if len(samples) < 2:
        raise ValueError("policy produced too few valid turns to compare")

    vocab = task.vocab
    per_strategy: dict[str, np.ndarray] = {}
    for name in strategies:
        spec = MaskSpec.from_name(name, vocab, seed=seed)
        values = []
        for traj, t in samples:
            flags_row = valid_turn_flags(traj)
            row = info_gain_per_turn(traj, policy, spec, flags_row)
            values.append(float(row[t]))
        per_strategy[name] = np.asarray(values)

    base_values = per_strategy[baseline]
    base_mean = float(np.mean(base_values))
    summaries = []
    for name in strategies:
        values = per_strategy[name]
        mean, median, iqr = _summary_stats(values)
        if name == baseline:
            gap, t_p, u_p = 0.0, None, None
        else:
            if base_mean == 0.0:
                gap = 0.0 if mean == 0.0 else math.inf
            else:
                gap = abs(mean - base_mean) / abs(base_mean)
            if np.std(values) == 0.0 and np.std(base_values) == 0.0:
                t_p, u_p = None, None
            else:
                t_p = float(scipy_stats.ttest_ind(values, base_values, equal_var=False).pvalue)
                u_p = float(scipy_stats.mannwhitneyu(values, base_values).pvalue)
        summaries.append(
            MaskStrategySummary(
                strategy=name,
                mean=mean,
                median=median,
                iqr=iqr,
                relative_gap=gap,
                t_test_p=t_p,
                mann_whitney_p=u_p,
            )
        )

    result = {
        "baseline": baseline,
        "n_turns": len(samples),
        "strategies": summaries,
        "max_relative_gap": max(s.relative_gap for s in summaries),
    }
    if include_marginal:
        marginal_values = []
        for traj, t in samples:
            flags_row = valid_turn_flags(traj)
            row = info_gain_exact_marginal(traj, policy, task, flags_row)
            marginal_values.append(float(row[t]))
        mean, median, iqr = _summary_stats(np.asarray(marginal_values))
        result["exact_marginal"] = {
            "mode": MODE_MARGINAL,
            "mean": mean,
            "median": median,
            "iqr": iqr,
        }
    return result


def info_contribution_series(reports: list[StepReport]) -> list[float]:
    return [r.info_contribution_ratio for r in reports]
