"""Shared domain types: tokens, turns, trajectories, rollout groups, masks.

Tokens are plain ints indexing a fixed vocabulary (see ``Vocab``). A turn is
one agent action segment followed by at most one observation segment. A
trajectory flattens to parallel token / response-mask / turn-index arrays so
every downstream consumer (advantages, surrogate loss) indexes tokens the
same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Token = int

DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class Vocab:
    """Token layout for the two-token action grammar.

    ids: [QUERY, ANSWER, ARG_0..ARG_{A-1}, BIT_0, BIT_1, MASK, PLACEHOLDER_A,
    PLACEHOLDER_B] where A = max(n_intents, n_attributes). MASK is the
    reserved blank used as the default counterfactual placeholder; the two
    PLACEHOLDER tokens stand in for fixed placeholder phrases in the
    mask-sensitivity study.
    """

    n_intents: int
    n_attributes: int

    QUERY: int = 0
    ANSWER: int = 1

    def __post_init__(self) -> None:
        if self.n_intents < 2:
            raise ValueError(f"need at least 2 intents, got {self.n_intents}")
        if self.n_attributes < 1:
            raise ValueError(f"need at least 1 attribute, got {self.n_attributes}")

    @property
    def n_args(self) -> int:
        return max(self.n_intents, self.n_attributes)

    def arg(self, index: int) -> Token:
        if not 0 <= index < self.n_args:
            raise ValueError(f"argument index {index} out of range [0, {self.n_args})")
        return 2 + index

    def arg_index(self, token: Token) -> int:
        if not 2 <= token < 2 + self.n_args:
            raise ValueError(f"token {token} is not an argument token")
        return token - 2

    def bit(self, value: int) -> Token:
        if value not in (0, 1):
            raise ValueError(f"bit value must be 0 or 1, got {value}")
        return 2 + self.n_args + value

    @property
    def mask(self) -> Token:
        return 4 + self.n_args

    @property
    def placeholder_a(self) -> Token:
        return 5 + self.n_args

    @property
    def placeholder_b(self) -> Token:
        return 6 + self.n_args

    @property
    def size(self) -> int:
        return 7 + self.n_args

    def is_bit(self, token: Token) -> bool:
        return token in (self.bit(0), self.bit(1))


@dataclass(frozen=True)
class TurnRecord:
    """One interaction turn: the agent's action tokens and optional feedback.

    ``observation_tokens`` is None exactly when the environment gave no
    feedback for this turn (an answering/terminal turn).
    """

    action_tokens: tuple[Token, ...]
    observation_tokens: tuple[Token, ...] | None
    turn_index: int

    def __post_init__(self) -> None:
        if len(self.action_tokens) == 0:
            raise ValueError("action_tokens must be nonempty")
        if self.turn_index < 1:
            raise ValueError(f"turn_index must be >= 1, got {self.turn_index}")


@dataclass(frozen=True)
class Trajectory:
    """An episode: ordered turns plus derived flat-token bookkeeping.

    ``response_mask[k]`` is 1 exactly on agent-generated (action) tokens.
    ``turn_of_token[k]`` gives the 1-based turn that produced token k.
    """

    task_id: str
    turns: tuple[TurnRecord, ...]
    response_mask: tuple[int, ...]
    turn_of_token: tuple[int, ...]
    terminal: bool

    def __post_init__(self) -> None:
        if len(self.turns) == 0:
            raise ValueError("trajectory must contain at least one turn")
        indices = [t.turn_index for t in self.turns]
        if indices != sorted(indices) or len(set(indices)) != len(indices):
            raise ValueError(f"turn indices must be strictly increasing, got {indices}")
        total = sum(
            len(t.action_tokens) + len(t.observation_tokens or ()) for t in self.turns
        )
        if len(self.response_mask) != total or len(self.turn_of_token) != total:
            raise ValueError(
                f"mask/turn maps must cover all {total} tokens, got "
                f"{len(self.response_mask)}/{len(self.turn_of_token)}"
            )

    @classmethod
    def from_turns(
        cls, task_id: str, turns: tuple[TurnRecord, ...] | list[TurnRecord], terminal: bool
    ) -> "Trajectory":
        """Build a trajectory, deriving the mask and turn-index maps."""
        mask: list[int] = []
        turn_of: list[int] = []
        for turn in turns:
            mask.extend([1] * len(turn.action_tokens))
            turn_of.extend([turn.turn_index] * len(turn.action_tokens))
            obs = turn.observation_tokens or ()
            mask.extend([0] * len(obs))
            turn_of.extend([turn.turn_index] * len(obs))
        return cls(
            task_id=task_id,
            turns=tuple(turns),
            response_mask=tuple(mask),
            turn_of_token=tuple(turn_of),
            terminal=terminal,
        )

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    @property
    def n_tokens(self) -> int:
        return len(self.response_mask)

    @property
    def n_action_tokens(self) -> int:
        return sum(self.response_mask)


def flatten(traj: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten a trajectory into (tokens, mask, turn_index) int arrays.

    The mask is 1 exactly on action tokens; output length equals the sum of
    per-turn action+observation lengths.
    """
    tokens: list[Token] = []
    for turn in traj.turns:
        tokens.extend(turn.action_tokens)
        tokens.extend(turn.observation_tokens or ())
    return (
        np.asarray(tokens, dtype=np.int64),
        np.asarray(traj.response_mask, dtype=np.int64),
        np.asarray(traj.turn_of_token, dtype=np.int64),
    )


@dataclass(frozen=True)
class RolloutGroup:
    """G trajectories sharing one task instance, with their external scores."""

    trajectories: tuple[Trajectory, ...]
    ext_scores: tuple[float, ...]
    group_id: str

    def __post_init__(self) -> None:
        if len(self.trajectories) != len(self.ext_scores):
            raise ValueError("trajectories and ext_scores must align")
        if len(self.trajectories) < 2:
            raise ValueError(f"group size must be >= 2, got {len(self.trajectories)}")

    @property
    def size(self) -> int:
        return len(self.trajectories)


@dataclass(frozen=True)
class GroupStats:
    """Group mean/std for external scores and pooled valid info-gain values.

    Standard deviations use the population (divide-by-G) convention so a
    constant group yields sigma == 0 exactly.
    """

    mu_ext: float
    sigma_ext: float
    mu_info: float
    sigma_info: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.sigma_ext < 0 or self.sigma_info < 0:
            raise ValueError("standard deviations must be nonnegative")


def group_stats(group: RolloutGroup, info=None, epsilon: float = DEFAULT_EPSILON) -> GroupStats:
    """Compute group statistics over external scores and valid info entries.

    ``info`` is an info-gain table (``values``/``valid`` per trajectory); only
    entries flagged valid enter mu_info/sigma_info, pooled across the whole
    group. With no valid entries both info statistics are 0.
    """
    scores = np.asarray(group.ext_scores, dtype=np.float64)
    mu_ext = float(np.mean(scores))
    sigma_ext = float(np.std(scores))

    mu_info = 0.0
    sigma_info = 0.0
    if info is not None:
        pooled = [
            float(v)
            for values, valid in zip(info.values, info.valid)
            for v, ok in zip(values, valid)
            if ok
        ]
        if pooled:
            arr = np.asarray(pooled, dtype=np.float64)
            mu_info = float(np.mean(arr))
            sigma_info = float(np.std(arr))
    return GroupStats(
        mu_ext=mu_ext,
        sigma_ext=sigma_ext,
        mu_info=mu_info,
        sigma_info=sigma_info,
        epsilon=epsilon,
    )
