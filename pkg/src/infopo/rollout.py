"""Group rollout engine: G episodes per task from a policy snapshot.

Each group member owns an independent rng stream derived from
(seed, group index, member index), so serial and concurrent rollouts produce
identical bits. The engine also tracks the policy-side context state across
turns (the revealed record lags one observation behind the environment; the
newest observation rides in the context's observation slot) and flags which
turns are scoreable by the info-gain reward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import RolloutGroup, Token, Trajectory, TurnRecord
from .env import (
    HiddenIntentTask,
    SEEN_ONE,
    SEEN_ZERO,
    Verb,
    decode_action,
    encode_action,
    reset,
    step,
)
from .policy import ContextState, PolicySpace, sample_action


@dataclass(frozen=True)
class RolloutConfig:
    group_size: int = 5
    horizon: int | None = None
    seed: int = 0
    shared_intent: bool = False

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError(f"group size must be >= 2, got {self.group_size}")


@dataclass(frozen=True)
class ValidTurnFlags:
    """Per-(trajectory, turn) flags: turn has feedback and a successor action."""

    flags: tuple[tuple[bool, ...], ...]

    def __getitem__(self, traj_index: int) -> tuple[bool, ...]:
        return self.flags[traj_index]

    def count(self) -> int:
        return sum(sum(row) for row in self.flags)


def valid_turn_flags(traj: Trajectory) -> tuple[bool, ...]:
    """A turn is valid iff it has an observation and is not the final turn."""
    n = traj.n_turns
    return tuple(
        turn.observation_tokens is not None and t < n - 1
        for t, turn in enumerate(traj.turns)
    )


def fold_observation(
    revealed: tuple[int, ...], attribute: int, obs_token: Token, space: PolicySpace
) -> tuple[int, ...]:
    """Fold an observed bit token into the ternary revealed record."""
    bit = 1 if obs_token == space.vocab.bit(1) else 0
    out = list(revealed)
    out[attribute] = SEEN_ONE if bit else SEEN_ZERO
    return tuple(out)


class ContextTracker:
    """Tracks the policy context across an episode.

    ``context`` is always the state under which the *next* action is
    generated. When a new observation arrives, the previous one (held in the
    observation slot) is folded into the revealed record.
    """

    def __init__(self, space: PolicySpace):
        self.space = space
        self.context = space.initial_state()
        self._slot_attr: int | None = None

    def observe(self, queried_attribute: int, obs_token: Token) -> None:
        ctx = self.context
        revealed = ctx.revealed
        if self._slot_attr is not None and ctx.obs_slot is not None:
            revealed = fold_observation(revealed, self._slot_attr, ctx.obs_slot, self.space)
        self.context = ContextState(
            revealed=revealed,
            pending_verb=None,
            turn=min(ctx.turn + 1, self.space.horizon),
            obs_slot=obs_token,
        )
        self._slot_attr = queried_attribute


def action_contexts(traj: Trajectory, space: PolicySpace) -> list[ContextState]:
    """Replay a trajectory, returning the context each action was sampled in."""
    tracker = ContextTracker(space)
    contexts: list[ContextState] = []
    for turn in traj.turns:
        contexts.append(tracker.context)
        if turn.observation_tokens is not None:
            spec = decode_action(turn.action_tokens, space.vocab)
            tracker.observe(spec.argument, turn.observation_tokens[-1])
    return contexts


# spawn_key namespaces: (0, ...) rollout members, (1, ...) group intents,
# (2, ...) trainer evaluation, (3, ...) mask sampling. Keeping the families
# disjoint means no stream is ever consumed by two purposes.
def member_rng(seed: int, group_index: int, member: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(0, group_index, member))
    )


def _group_intent_rng(seed: int, group_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(1, group_index))
    )


def rollout_episode(
    task: HiddenIntentTask, policy, rng: np.random.Generator
) -> tuple[Trajectory, float]:
    """Run one episode; returns the trajectory and its terminal reward."""
    space: PolicySpace = policy.space
    tracker = ContextTracker(space)
    state = reset(task, rng)
    turns: list[TurnRecord] = []
    reward = 0.0
    while not state.done:
        spec, _ = sample_action(policy, tracker.context, rng)
        state, obs, terminal_reward = step(state, spec, rng)
        turns.append(
            TurnRecord(encode_action(spec, space.vocab), obs, state.turn)
        )
        if terminal_reward is not None:
            reward = terminal_reward
        if obs is not None and not state.done:
            tracker.observe(spec.argument, obs[-1])
    traj = Trajectory.from_turns(task.task_id, turns, terminal=True)
    return traj, reward


def rollout_group(
    task: HiddenIntentTask,
    policy,
    config: RolloutConfig,
    group_index: int = 0,
) -> tuple[RolloutGroup, ValidTurnFlags]:
    """Sample a group of episodes under fresh per-member intents.

    With ``shared_intent`` the whole group plays the same latent intent,
    drawn from a group-level stream.
    """
    effective = task
    if config.horizon is not None and config.horizon != task.horizon:
        effective = replace(task, horizon=config.horizon)
    if config.shared_intent and effective.intent is None:
        intent = int(_group_intent_rng(config.seed, group_index).integers(effective.n_intents))
        effective = replace(effective, intent=intent)

    trajectories: list[Trajectory] = []
    scores: list[float] = []
    for member in range(config.group_size):
        rng = member_rng(config.seed, group_index, member)
        traj, reward = rollout_episode(effective, policy, rng)
        trajectories.append(traj)
        scores.append(reward)
    group = RolloutGroup(
        trajectories=tuple(trajectories),
        ext_scores=tuple(scores),
        group_id=f"g{group_index}",
    )
    flags = ValidTurnFlags(tuple(valid_turn_flags(t) for t in trajectories))
    return group, flags
