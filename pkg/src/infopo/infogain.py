"""Turn-level counterfactual info-gain rewards via teacher forcing.

For every valid turn t we score the realized next action a_{t+1} twice under
the same tokens: once in the factual context (observation slot holding o_t)
and once in a counterfactual context (observation slot holding a placeholder).
Training mode averages the per-token log-prob shift over a_{t+1}'s tokens;
the exact-marginal mode instead compares against the policy marginalized over
the true observation distribution, as an unaveraged sequence log-ratio, which
is the form the mutual-information verifier checks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .core import Token, Trajectory
from .env import (
    HiddenIntentTask,
    Verb,
    decode_action,
    intent_posterior,
    observation_distribution_from_posterior,
)
from .policy import (
    ContextState,
    PolicySpace,
    action_log_prob,
    marginal_action_log_prob,
    sequence_log_prob,
)
from .rollout import ValidTurnFlags, action_contexts

MODE_PLACEHOLDER = "placeholder"
MODE_MARGINAL = "marginal"


class MaskStrategy(enum.Enum):
    """Counterfactual placeholder variants (the mask-sensitivity axes)."""

    DEFAULT_STRING = "default"
    ALT_STRING = "alt"
    RANDOM_TOKENS = "random"
    FIXED_MASK_TOKEN = "fixed"


@dataclass
class MaskSpec:
    """Placeholder choice for the counterfactual context.

    RANDOM_TOKENS re-samples a placeholder from the whole vocabulary on every
    evaluation, off a dedicated seeded stream; the other strategies use a
    fixed reserved token.
    """

    strategy: MaskStrategy
    placeholder_tokens: tuple[Token, ...]
    seed: int = 0
    _rng: np.random.Generator | None = field(default=None, repr=False)
    _vocab_size: int = field(default=0, repr=False)

    @classmethod
    def from_name(cls, name: str, vocab, seed: int = 0) -> "MaskSpec":
        strategy = MaskStrategy(name)
        tokens_by_strategy = {
            MaskStrategy.FIXED_MASK_TOKEN: (vocab.mask,),
            MaskStrategy.DEFAULT_STRING: (vocab.placeholder_a,),
            MaskStrategy.ALT_STRING: (vocab.placeholder_b,),
            MaskStrategy.RANDOM_TOKENS: (vocab.mask,),
        }
        spec = cls(
            strategy=strategy,
            placeholder_tokens=tokens_by_strategy[strategy],
            seed=seed,
            _vocab_size=vocab.size,
        )
        if strategy is MaskStrategy.RANDOM_TOKENS:
            spec._rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(3,))
            )
        return spec

    def placeholder(self) -> tuple[Token, ...]:
        if self.strategy is MaskStrategy.RANDOM_TOKENS:
            if self._rng is None:
                raise ValueError("random-token mask spec was not seeded")
            return (int(self._rng.integers(self._vocab_size)),)
        return self.placeholder_tokens


@dataclass(frozen=True)
class InfoGainTable:
    """Per-(trajectory, turn) info-gain values with validity flags.

    Invalid entries carry value 0 and are excluded from group statistics.
    """

    values: tuple[np.ndarray, ...]
    valid: tuple[tuple[bool, ...], ...]
    mode: str

    def __post_init__(self) -> None:
        for vals, flags in zip(self.values, self.valid):
            if len(vals) != len(flags):
                raise ValueError("values and validity flags must align per trajectory")


def _counterfactual(ctx: ContextState, placeholder: tuple[Token, ...]) -> ContextState:
    return ContextState(
        revealed=ctx.revealed,
        pending_verb=ctx.pending_verb,
        turn=ctx.turn,
        obs_slot=placeholder[-1] if placeholder else None,
    )


def info_gain_per_turn(
    traj: Trajectory,
    policy,
    mask: MaskSpec,
    flags: tuple[bool, ...],
) -> np.ndarray:
    """Placeholder-mode r_info for one trajectory (training signal).

    Per valid turn t: mean over a_{t+1}'s tokens of
    log pi(y | factual ctx) - log pi(y | ctx with placeholder observation),
    both teacher-forced on the realized tokens. Invalid turns get 0.
    """
    space: PolicySpace = policy.space
    contexts = action_contexts(traj, space)
    values = np.zeros(traj.n_turns, dtype=np.float64)
    for t, is_valid in enumerate(flags):
        if not is_valid:
            continue
        if t + 1 >= traj.n_turns:
            raise ValueError(
                f"turn {t + 1} flagged valid but has no successor action"
            )
        tokens = traj.turns[t + 1].action_tokens
        factual_ctx = contexts[t + 1]
        counter_ctx = _counterfactual(factual_ctx, mask.placeholder())
        factual = action_log_prob(policy, factual_ctx, tokens)
        counter = action_log_prob(policy, counter_ctx, tokens)
        values[t] = float(np.mean(factual - counter))
    return values


def info_gain_exact_marginal(
    traj: Trajectory,
    policy,
    task: HiddenIntentTask,
    flags: tuple[bool, ...],
    obs_dist_fn=None,
) -> np.ndarray:
    """Exact-marginal r_info for one trajectory (verification signal).

    The counterfactual term is the sequence-level log-prob of a_{t+1} under
    the policy marginalized over the true observation distribution given the
    pre-observation history (posterior reconstructed from the transcript);
    the value is the unaveraged sequence log-ratio. ``obs_dist_fn`` overrides
    the observation model (negative controls corrupt it).
    """
    if obs_dist_fn is None:
        obs_dist_fn = observation_distribution_from_posterior
    space: PolicySpace = policy.space
    contexts = action_contexts(traj, space)
    values = np.zeros(traj.n_turns, dtype=np.float64)

    counts = [(0, 0)] * task.n_attributes
    for t, turn in enumerate(traj.turns):
        if flags[t]:
            if t + 1 >= traj.n_turns:
                raise ValueError(
                    f"turn {t + 1} flagged valid but has no successor action"
                )
            spec = decode_action(turn.action_tokens, space.vocab)
            if spec.verb is not Verb.QUERY or turn.observation_tokens is None:
                raise ValueError("valid turns must be queries with feedback")
            posterior = intent_posterior(task, tuple(counts))
            obs_dist = obs_dist_fn(task, posterior, spec.argument)
            tokens = traj.turns[t + 1].action_tokens
            factual_ctx = contexts[t + 1]
            factual = sequence_log_prob(policy, factual_ctx, tokens)
            marginal = marginal_action_log_prob(policy, factual_ctx, obs_dist, tokens)
            values[t] = factual - marginal
        if turn.observation_tokens is not None:
            spec = decode_action(turn.action_tokens, space.vocab)
            bit = 1 if turn.observation_tokens[-1] == space.vocab.bit(1) else 0
            n0, n1 = counts[spec.argument]
            counts[spec.argument] = (n0 + (bit == 0), n1 + (bit == 1))
    return values


def build_info_gain_table(
    group,
    policy,
    flags: ValidTurnFlags,
    mask: MaskSpec | None = None,
    mode: str = MODE_PLACEHOLDER,
    task: HiddenIntentTask | None = None,
) -> InfoGainTable:
    """Score every trajectory in a group under one mode."""
    rows = []
    for i, traj in enumerate(group.trajectories):
        if mode == MODE_PLACEHOLDER:
            if mask is None:
                raise ValueError("placeholder mode needs a mask spec")
            rows.append(info_gain_per_turn(traj, policy, mask, flags[i]))
        elif mode == MODE_MARGINAL:
            if task is None:
                raise ValueError("exact-marginal mode needs the task")
            rows.append(info_gain_exact_marginal(traj, policy, task, flags[i]))
        else:
            raise ValueError(f"unknown info-gain mode {mode!r}")
    return InfoGainTable(values=tuple(rows), valid=flags.flags, mode=mode)


def cumulative_info_gain(table: InfoGainTable) -> float:
    """Sum of info-gain values over all valid entries."""
    total = 0.0
    for values, flags in zip(table.values, table.valid):
        for v, ok in zip(values, flags):
            if ok:
                total += float(v)
    return total
