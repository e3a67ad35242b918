"""Turn-level counterfactual info-gain rewards fused with group-relative
outcome advantages, plus exact information-theoretic verifiers."""

from .advantage import AblationMode, AdvantageTensor, GateConfig, build_advantages, fuse, gate
from .core import GroupStats, RolloutGroup, Trajectory, TurnRecord, Vocab, flatten, group_stats
from .env import ActionSpec, EnvState, HiddenIntentTask, Verb, encode_action, reset, step
from .infogain import (
    InfoGainTable,
    MaskSpec,
    MaskStrategy,
    build_info_gain_table,
    cumulative_info_gain,
    info_gain_exact_marginal,
    info_gain_per_turn,
)
from .policy import (
    ContextState,
    PolicyParams,
    PolicySnapshot,
    PolicySpace,
    action_log_prob,
    exact_kl,
    grad_log_prob,
    init_params,
    marginal_action_log_prob,
    sample_action,
    snapshot,
)
from .rollout import RolloutConfig, ValidTurnFlags, rollout_group
from .theory import (
    MIResult,
    TheoryCase,
    conditional_mi,
    fano_bound,
    verify_theorem1,
    verify_theorem2,
)
from .trainer import StepReport, TrainerConfig, surrogate_loss, train

__all__ = [name for name in dir() if not name.startswith("_")]
