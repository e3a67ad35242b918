"""Fused token-level advantages: outcome, info-gain, and the variance gate.

The outcome advantage standardizes each trajectory's external reward within
its rollout group and broadcasts it over the trajectory's action tokens. The
info-gain advantage standardizes per-turn info-gain values (pooled over all
valid turns in the group) and broadcasts each onto the tokens of the turn
that triggered the feedback. A logistic gate on the group's outcome standard
deviation decides how much the info-gain channel contributes:
gate(sigma) = 1 / (1 + exp(sigma / T)), so a zero-variance group gets the
peak weight 0.5 and discriminative groups suppress the intrinsic term.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import GroupStats, RolloutGroup, flatten
from .infogain import InfoGainTable


class AblationMode(enum.Enum):
    NONE = "none"
    NO_GATE = "no_gate"
    NO_STD = "no_std"
    NO_EXT = "no_ext"


@dataclass(frozen=True)
class GateConfig:
    temperature: float = 0.5
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("gate temperature must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass(frozen=True)
class AdvantageTensor:
    """Per-token advantages aligned with each trajectory's flattened tokens."""

    a_ext: tuple[np.ndarray, ...]
    a_info: tuple[np.ndarray, ...]
    a_hat: tuple[np.ndarray, ...]
    gate_value: float
    stats: GroupStats


def outcome_advantage(group: RolloutGroup, stats: GroupStats) -> tuple[np.ndarray, ...]:
    """Standardized external reward, broadcast over each action token."""
    out = []
    for traj, score in zip(group.trajectories, group.ext_scores):
        _, mask, _ = flatten(traj)
        value = (score - stats.mu_ext) / (stats.sigma_ext + stats.epsilon)
        out.append(value * mask.astype(np.float64))
    return tuple(out)


def info_advantage(
    group: RolloutGroup,
    info: InfoGainTable,
    stats: GroupStats,
    normalize: bool = True,
) -> tuple[np.ndarray, ...]:
    """Per-turn info-gain values broadcast onto their turn's action tokens.

    Values are standardized with the group-pooled valid-turn statistics
    unless ``normalize`` is off (the unstandardized ablation). Tokens of
    invalid turns, and all observation tokens, carry 0.
    """
    out = []
    for i, traj in enumerate(group.trajectories):
        _, mask, turn_of = flatten(traj)
        adv = np.zeros(traj.n_tokens, dtype=np.float64)
        values = info.values[i]
        valid = info.valid[i]
        for k in range(traj.n_tokens):
            if not mask[k]:
                continue
            t = int(turn_of[k]) - 1
            if t >= len(valid) or not valid[t]:
                continue
            raw = float(values[t])
            if normalize:
                adv[k] = (raw - stats.mu_info) / (stats.sigma_info + stats.epsilon)
            else:
                adv[k] = raw
        out.append(adv)
    return tuple(out)


def gate(sigma_ext: float, cfg: GateConfig) -> float:
    """Logistic gate on the group's outcome std: in (0, 0.5], peak at sigma=0."""
    if sigma_ext < 0:
        raise ValueError("sigma_ext must be nonnegative")
    return float(1.0 / (1.0 + np.exp(sigma_ext / cfg.temperature)))


def fuse(
    a_ext: tuple[np.ndarray, ...],
    a_info: tuple[np.ndarray, ...],
    gate_value: float,
    cfg: GateConfig,
    stats: GroupStats,
    ablation: AblationMode = AblationMode.NONE,
) -> AdvantageTensor:
    """Elementwise fusion: A_hat = A_ext + beta * gate * A_info.

    The no-ext ablation replaces the fused signal with the info advantage
    alone; the other ablations are applied upstream (gate pinned to 1,
    normalization disabled) and flow through this same formula.
    """
    if len(a_ext) != len(a_info):
        raise ValueError("advantage tuples must align")
    fused = []
    for ext, info in zip(a_ext, a_info):
        if ext.shape != info.shape:
            raise ValueError(f"shape mismatch: {ext.shape} vs {info.shape}")
        if ablation is AblationMode.NO_EXT:
            fused.append(info.copy())
        else:
            fused.append(ext + cfg.beta * gate_value * info)
    return AdvantageTensor(
        a_ext=tuple(a_ext),
        a_info=tuple(a_info),
        a_hat=tuple(fused),
        gate_value=gate_value,
        stats=stats,
    )


def build_advantages(
    group: RolloutGroup,
    info: InfoGainTable,
    stats: GroupStats,
    cfg: GateConfig,
    ablation: AblationMode = AblationMode.NONE,
) -> AdvantageTensor:
    """Full pipeline: outcome + info advantages, gate, fusion, ablations."""
    a_ext = outcome_advantage(group, stats)
    a_info = info_advantage(group, info, stats, normalize=ablation is not AblationMode.NO_STD)
    gate_value = 1.0 if ablation is AblationMode.NO_GATE else gate(stats.sigma_ext, cfg)
    return fuse(a_ext, a_info, gate_value, cfg, stats, ablation=ablation)
