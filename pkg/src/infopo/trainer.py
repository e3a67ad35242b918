"""The training loop: rollout, score, fuse advantages, clipped update.

Each iteration snapshots the current weights as the rollout/old policy,
samples one or more groups, computes external scores and placeholder-mode
info-gain rewards, builds the fused advantages, and takes clipped-surrogate
gradient steps with an exact per-state KL penalty against the frozen
reference (initial) policy. Everything is seeded through disjoint rng stream
families, so a run is bit-reproducible from its config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .advantage import AblationMode, AdvantageTensor, GateConfig, build_advantages
from .core import DEFAULT_EPSILON, RolloutGroup, flatten, group_stats
from .env import HiddenIntentTask
from .infogain import MODE_PLACEHOLDER, InfoGainTable, MaskSpec, build_info_gain_table
from .policy import (
    PolicyParams,
    PolicySnapshot,
    exact_kl,
    exact_kl_grad,
    snapshot,
    token_log_dist,
)
from .rollout import (
    RolloutConfig,
    ValidTurnFlags,
    action_contexts,
    rollout_episode,
    rollout_group,
)


@dataclass(frozen=True)
class TrainerConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.001
    learning_rate: float = 1.0
    iterations: int = 300
    inner_epochs: int = 1
    num_groups: int = 1
    eval_every: int = 10
    eval_episodes: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be nonnegative")
        if self.iterations < 1 or self.inner_epochs < 1 or self.num_groups < 1:
            raise ValueError("iterations, inner_epochs, num_groups must be >= 1")


@dataclass
class StepReport:
    """One training iteration's diagnostics (one JSON line in the run log)."""

    iteration: int
    mean_ext_reward: float
    success_rate: float
    zero_variance_flags: list[bool]
    gate_values: list[float]
    per_turn_info_mean: list[float]
    per_turn_valid_counts: list[int]
    info_contribution_ratio: float
    grad_norm: float
    mean_kl: float
    mean_turns: float
    mean_action_len: float
    episode_rewards: list[float]
    episode_action_lens: list[float]
    eval_success: float | None = None

    def to_json(self) -> str:
        record = {
            "iteration": self.iteration,
            "mean_ext_reward": self.mean_ext_reward,
            "success_rate": self.success_rate,
            "zero_variance_flags": self.zero_variance_flags,
            "gate_values": self.gate_values,
            "per_turn_info_mean": self.per_turn_info_mean,
            "per_turn_valid_counts": self.per_turn_valid_counts,
            "info_contribution_ratio": self.info_contribution_ratio,
            "grad_norm": self.grad_norm,
            "mean_kl": self.mean_kl,
            "mean_turns": self.mean_turns,
            "mean_action_len": self.mean_action_len,
            "episode_rewards": self.episode_rewards,
            "episode_action_lens": self.episode_action_lens,
            "eval_success": self.eval_success,
        }
        return json.dumps(record)

    @classmethod
    def from_json(cls, line: str) -> "StepReport":
        return cls(**json.loads(line))


def _token_walk(traj, space):
    """Yield (context, token) for every action token, advancing mid-action."""
    for turn_ctx, turn in zip(action_contexts(traj, space), traj.turns):
        ctx = turn_ctx
        for token in turn.action_tokens:
            yield ctx, token
            ctx = space.advance(ctx, token)


def surrogate_loss(
    groups: list[RolloutGroup],
    advantages: list[AdvantageTensor],
    params: PolicyParams,
    old: PolicySnapshot,
    ref: PolicySnapshot,
    cfg: TrainerConfig,
) -> tuple[float, np.ndarray, float]:
    """Clipped-surrogate loss with exact KL penalty, plus its gradient.

    Objective per action token: min(rho * A, clip(rho, 1-eps, 1+eps) * A)
    minus kl_coef times the exact KL(pi || pi_ref) at the token's state; each
    trajectory's tokens are averaged by its own action-token count and
    trajectories by the total count. The returned loss is the negated
    objective; the gradient passes through the ratio only where the
    unclipped branch attains the min. Also returns the weighted mean KL.
    """
    space = params.space
    n_traj = sum(len(g.trajectories) for g in groups)
    grad_obj = np.zeros_like(params.weights)
    objective = 0.0
    kl_total = 0.0

    for group, adv in zip(groups, advantages):
        for traj, a_hat in zip(group.trajectories, adv.a_hat):
            _, mask, _ = flatten(traj)
            masked_idx = np.nonzero(mask)[0]
            n_tokens = masked_idx.size
            if n_tokens == 0:
                continue
            weight = 1.0 / (n_traj * n_tokens)
            for k, (ctx, token) in enumerate(_token_walk(traj, space)):
                a = float(a_hat[masked_idx[k]])
                legal, log_p = token_log_dist(params, ctx)
                _, log_p_old = token_log_dist(old, ctx)
                pos = int(np.nonzero(legal == token)[0][0])
                ratio = float(np.exp(log_p[pos] - log_p_old[pos]))
                if not np.isfinite(ratio):
                    raise FloatingPointError("non-finite probability ratio")
                clipped = min(max(ratio, 1.0 - cfg.clip_eps), 1.0 + cfg.clip_eps)
                unclipped_term = ratio * a
                clipped_term = clipped * a
                objective += weight * min(unclipped_term, clipped_term)
                if unclipped_term <= clipped_term:
                    row = space.state_index(ctx)
                    probs = np.exp(log_p)
                    grad_obj[row, legal] -= weight * a * ratio * probs
                    grad_obj[row, token] += weight * a * ratio
                kl = exact_kl(params, ref, ctx)
                kl_total += weight * kl
                objective -= weight * cfg.kl_coef * kl
                if cfg.kl_coef:
                    row, kl_grad = exact_kl_grad(params, ref, ctx)
                    grad_obj[row] -= weight * cfg.kl_coef * kl_grad

    if not np.isfinite(objective):
        raise FloatingPointError("non-finite surrogate objective")
    return -objective, -grad_obj, kl_total


def _eval_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(2, iteration))
    )


def evaluate_success(
    task: HiddenIntentTask, policy, rng: np.random.Generator, episodes: int
) -> float:
    rewards = [rollout_episode(task, policy, rng)[1] for _ in range(episodes)]
    return float(np.mean(rewards))


def _per_turn_summary(
    tables: list[InfoGainTable], horizon: int
) -> tuple[list[float], list[int]]:
    sums = np.zeros(horizon)
    counts = np.zeros(horizon, dtype=np.int64)
    for table in tables:
        for values, valid in zip(table.values, table.valid):
            for t, (v, ok) in enumerate(zip(values, valid)):
                if ok and t < horizon:
                    sums[t] += float(v)
                    counts[t] += 1
    means = [float(sums[t] / counts[t]) if counts[t] else 0.0 for t in range(horizon)]
    return means, [int(c) for c in counts]


def _contribution_ratio(
    advantages: list[AdvantageTensor], groups: list[RolloutGroup], beta: float
) -> float:
    ext_abs: list[float] = []
    info_abs: list[float] = []
    for group, adv in zip(groups, advantages):
        for traj, a_ext, a_info in zip(group.trajectories, adv.a_ext, adv.a_info):
            _, mask, _ = flatten(traj)
            sel = mask.astype(bool)
            ext_abs.extend(np.abs(a_ext[sel]))
            info_abs.extend(np.abs(beta * adv.gate_value * a_info[sel]))
    if not ext_abs:
        return 0.0
    ext_mean = float(np.mean(ext_abs))
    info_mean = float(np.mean(info_abs))
    denom = ext_mean + info_mean
    return info_mean / denom if denom > 0 else 0.0


def train(
    task: HiddenIntentTask,
    params: PolicyParams,
    trainer_cfg: TrainerConfig,
    rollout_cfg: RolloutConfig,
    gate_cfg: GateConfig,
    mask_spec: MaskSpec,
    ablation: AblationMode = AblationMode.NONE,
    epsilon: float = DEFAULT_EPSILON,
    info_mode: str = MODE_PLACEHOLDER,
    on_report=None,
    checkpoint_fn=None,
    checkpoint_every: int = 0,
) -> list[StepReport]:
    """Run the full iteration loop; returns the run log.

    ``on_report`` receives each StepReport as it is emitted (the CLI streams
    them to the run log); ``checkpoint_fn(iteration, params)`` fires every
    ``checkpoint_every`` iterations and at the end.
    """
    ref = snapshot(params)
    reports: list[StepReport] = []

    for it in range(trainer_cfg.iterations):
        old = snapshot(params)
        groups: list[RolloutGroup] = []
        flag_sets: list[ValidTurnFlags] = []
        tables: list[InfoGainTable] = []
        for g in range(trainer_cfg.num_groups):
            group, flags = rollout_group(
                task, old, rollout_cfg, group_index=it * trainer_cfg.num_groups + g
            )
            groups.append(group)
            flag_sets.append(flags)
            tables.append(
                build_info_gain_table(
                    group, old, flags, mask=mask_spec, mode=info_mode, task=task
                )
            )

        stats = [
            group_stats(group, info=table, epsilon=epsilon)
            for group, table in zip(groups, tables)
        ]
        advantages = [
            build_advantages(group, table, st, gate_cfg, ablation=ablation)
            for group, table, st in zip(groups, tables, stats)
        ]

        grad_norm = 0.0
        mean_kl = 0.0
        for epoch in range(trainer_cfg.inner_epochs):
            loss, grad, kl = surrogate_loss(
                groups, advantages, params, old, ref, trainer_cfg
            )
            if epoch == 0:
                grad_norm = float(np.linalg.norm(grad))
                mean_kl = kl
            params.apply_update(-trainer_cfg.learning_rate * grad)

        rewards = [r for g in groups for r in g.ext_scores]
        horizon = rollout_cfg.horizon if rollout_cfg.horizon is not None else task.horizon
        per_turn_mean, per_turn_counts = _per_turn_summary(tables, horizon)
        n_turns = [t.n_turns for g in groups for t in g.trajectories]
        action_len = [
            t.n_action_tokens / t.n_turns for g in groups for t in g.trajectories
        ]

        eval_success = None
        if (it + 1) % trainer_cfg.eval_every == 0 or it + 1 == trainer_cfg.iterations:
            eval_success = evaluate_success(
                task, params, _eval_rng(trainer_cfg.seed, it), trainer_cfg.eval_episodes
            )

        report = StepReport(
            iteration=it,
            mean_ext_reward=float(np.mean(rewards)),
            success_rate=float(np.mean([r == 1.0 for r in rewards])),
            zero_variance_flags=[s.sigma_ext == 0.0 for s in stats],
            gate_values=[adv.gate_value for adv in advantages],
            per_turn_info_mean=per_turn_mean,
            per_turn_valid_counts=per_turn_counts,
            info_contribution_ratio=_contribution_ratio(advantages, groups, gate_cfg.beta),
            grad_norm=grad_norm,
            mean_kl=mean_kl,
            mean_turns=float(np.mean(n_turns)),
            mean_action_len=float(np.mean(action_len)),
            episode_rewards=[float(r) for r in rewards],
            episode_action_lens=[float(v) for v in action_len],
            eval_success=eval_success,
        )
        reports.append(report)
        if on_report is not None:
            on_report(report)
        if checkpoint_fn is not None and (
            (checkpoint_every and (it + 1) % checkpoint_every == 0)
            or it + 1 == trainer_cfg.iterations
        ):
            checkpoint_fn(it, params)

    return reports
