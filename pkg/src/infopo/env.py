"""Hidden-intent interaction environment with exact observation distributions.

The task hides an intent Z uniform over M candidates, each described by K
binary attributes. The agent either QUERYs an attribute (observing its bit,
flipped with probability ``noise``) or ANSWERs an intent (which ends the
episode with reward 1 iff correct). Everything is small and discrete on
purpose: observation distributions, intent posteriors, and the full
trajectory distribution are all computable in closed form, which is what the
exact verifiers need.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .core import Token, Trajectory, TurnRecord, Vocab

# Revealed-record codes: per attribute, what the agent has seen so far.
UNKNOWN = 0
SEEN_ZERO = 1
SEEN_ONE = 2

ENUMERATION_LEAF_LIMIT = 10**6


class EnumerationLimitError(RuntimeError):
    """Raised when the reachable interaction tree exceeds the leaf guard."""


class Verb(enum.Enum):
    QUERY = "query"
    ANSWER = "answer"


@dataclass(frozen=True)
class ActionSpec:
    """A two-token action: QUERY(attribute j) or ANSWER(intent z)."""

    verb: Verb
    argument: int


def binary_table(n_intents: int, n_attributes: int) -> tuple[tuple[int, ...], ...]:
    """Attribute table where row z holds the binary encoding of z.

    Bit j of intent z is (z >> j) & 1, so with n_attributes >= log2(n_intents)
    every intent is identifiable from its attribute bits.
    """
    return tuple(
        tuple((z >> j) & 1 for j in range(n_attributes)) for z in range(n_intents)
    )


@dataclass(frozen=True)
class HiddenIntentTask:
    """Task template: M intents x K binary attributes, noisy bit feedback.

    ``intent`` may pin the latent intent for every episode; left None, each
    reset draws Z ~ Unif([M]).
    """

    n_intents: int
    n_attributes: int
    attribute_table: tuple[tuple[int, ...], ...]
    noise: float = 0.0
    horizon: int = 6
    intent: int | None = None
    task_id: str = "hidden-intent"

    def __post_init__(self) -> None:
        if len(self.attribute_table) != self.n_intents:
            raise ValueError("attribute_table must have one row per intent")
        if any(len(row) != self.n_attributes for row in self.attribute_table):
            raise ValueError("attribute_table rows must have one bit per attribute")
        if any(b not in (0, 1) for row in self.attribute_table for b in row):
            raise ValueError("attribute_table entries must be 0/1")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError(f"noise must lie in [0, 0.5), got {self.noise}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.intent is not None and not 0 <= self.intent < self.n_intents:
            raise ValueError(f"pinned intent {self.intent} out of range")

    @classmethod
    def binary(
        cls,
        n_intents: int,
        n_attributes: int,
        noise: float = 0.0,
        horizon: int = 6,
        task_id: str = "hidden-intent",
    ) -> "HiddenIntentTask":
        return cls(
            n_intents=n_intents,
            n_attributes=n_attributes,
            attribute_table=binary_table(n_intents, n_attributes),
            noise=noise,
            horizon=horizon,
            task_id=task_id,
        )

    @property
    def identifiable(self) -> bool:
        return len(set(self.attribute_table)) == self.n_intents

    @property
    def vocab(self) -> Vocab:
        return Vocab(n_intents=self.n_intents, n_attributes=self.n_attributes)


@dataclass(frozen=True)
class EnvState:
    """Per-episode state: latent intent, revealed record, and turn counter.

    ``obs_counts[j]`` holds (#zeros, #ones) observed for attribute j; these
    counts are a sufficient statistic for the exact intent posterior under
    independent bit-flip noise.
    """

    task: HiddenIntentTask
    intent: int
    revealed: tuple[int, ...]
    obs_counts: tuple[tuple[int, int], ...]
    turn: int = 0
    done: bool = False
    final_guess: int | None = None

    def __post_init__(self) -> None:
        if self.done and self.final_guess is None and self.turn < self.task.horizon:
            raise ValueError("done state needs a final guess or an exhausted horizon")


def reset(task: HiddenIntentTask, rng: np.random.Generator) -> EnvState:
    """Start an episode, drawing the hidden intent unless the task pins it."""
    intent = task.intent if task.intent is not None else int(rng.integers(task.n_intents))
    return EnvState(
        task=task,
        intent=intent,
        revealed=(UNKNOWN,) * task.n_attributes,
        obs_counts=((0, 0),) * task.n_attributes,
    )


def encode_action(spec: ActionSpec, vocab: Vocab) -> tuple[Token, Token]:
    """Deterministic, injective 2-token encoding: verb token then argument."""
    if spec.verb is Verb.QUERY:
        if not 0 <= spec.argument < vocab.n_attributes:
            raise ValueError(f"attribute index {spec.argument} out of range")
        return (vocab.QUERY, vocab.arg(spec.argument))
    if not 0 <= spec.argument < vocab.n_intents:
        raise ValueError(f"intent index {spec.argument} out of range")
    return (vocab.ANSWER, vocab.arg(spec.argument))


def decode_action(tokens: tuple[Token, ...], vocab: Vocab) -> ActionSpec:
    """Inverse of :func:`encode_action`."""
    if len(tokens) != 2:
        raise ValueError(f"actions are 2 tokens, got {len(tokens)}")
    verb_token, arg_token = tokens
    arg = vocab.arg_index(arg_token)
    if verb_token == vocab.QUERY:
        if arg >= vocab.n_attributes:
            raise ValueError(f"attribute index {arg} out of range")
        return ActionSpec(Verb.QUERY, arg)
    if verb_token == vocab.ANSWER:
        if arg >= vocab.n_intents:
            raise ValueError(f"intent index {arg} out of range")
        return ActionSpec(Verb.ANSWER, arg)
    raise ValueError(f"token {verb_token} is not a verb token")


def bit_observation_prob(task: HiddenIntentTask, intent: int, attribute: int, bit: int) -> float:
    """P(observe ``bit`` | Z=intent, QUERY attribute): the noisy-channel law."""
    true_bit = task.attribute_table[intent][attribute]
    return 1.0 - task.noise if bit == true_bit else task.noise


def _fold_observation(
    revealed: tuple[int, ...], attribute: int, bit: int
) -> tuple[int, ...]:
    out = list(revealed)
    out[attribute] = SEEN_ONE if bit else SEEN_ZERO
    return tuple(out)


def step(
    state: EnvState, action: ActionSpec, rng: np.random.Generator
) -> tuple[EnvState, tuple[Token, ...] | None, float | None]:
    """Advance one turn.

    QUERY(j) observes attribute j's bit through the noise channel and records
    it; ANSWER(z) ends the episode with reward I[z == Z] and no observation.
    Hitting the horizon without answering ends the episode with reward 0 (the
    final query still receives its observation).
    """
    if state.done:
        raise RuntimeError("cannot step a finished episode")
    task = state.task
    turn = state.turn + 1

    if action.verb is Verb.ANSWER:
        if not 0 <= action.argument < task.n_intents:
            raise ValueError(f"intent index {action.argument} out of range")
        reward = 1.0 if action.argument == state.intent else 0.0
        next_state = replace(
            state, turn=turn, done=True, final_guess=action.argument
        )
        return next_state, None, reward

    j = action.argument
    if not 0 <= j < task.n_attributes:
        raise ValueError(f"attribute index {j} out of range")
    true_bit = task.attribute_table[state.intent][j]
    flip = rng.random() < task.noise
    bit = true_bit ^ int(flip)
    counts = list(state.obs_counts)
    n0, n1 = counts[j]
    counts[j] = (n0 + (bit == 0), n1 + (bit == 1))
    timed_out = turn >= task.horizon
    next_state = replace(
        state,
        revealed=_fold_observation(state.revealed, j, bit),
        obs_counts=tuple(counts),
        turn=turn,
        done=timed_out,
    )
    obs = (task.vocab.bit(bit),)
    reward = 0.0 if timed_out else None
    return next_state, obs, reward


def intent_posterior(
    task: HiddenIntentTask, obs_counts: tuple[tuple[int, int], ...]
) -> np.ndarray:
    """Exact posterior over intents given per-attribute observation counts.

    Likelihood of (n0, n1) observations on attribute j is
    (1-eta)^matches * eta^mismatches against the intent's true bit; counts are
    sufficient because bit flips are independent across observations.
    """
    eta = task.noise
    post = np.ones(task.n_intents, dtype=np.float64)
    for z in range(task.n_intents):
        for j, (n0, n1) in enumerate(obs_counts):
            if n0 == 0 and n1 == 0:
                continue
            if task.attribute_table[z][j] == 0:
                match, mismatch = n0, n1
            else:
                match, mismatch = n1, n0
            post[z] *= (1.0 - eta) ** match * eta**mismatch
    total = post.sum()
    if total == 0.0:
        # Inconsistent noiseless transcript; cannot arise from env stepping.
        raise ValueError("observation counts are inconsistent with every intent")
    return post / total


def observation_distribution(
    state: EnvState, action: ActionSpec
) -> dict[tuple[Token, ...], float]:
    """Z-marginalized observation distribution for a QUERY, given the history.

    Marginalizes the per-intent channel over the exact posterior implied by
    the state's observation counts (uniform over consistent intents when
    noise == 0). The per-intent conditional is :func:`bit_observation_prob`.
    """
    if action.verb is not Verb.QUERY:
        raise ValueError("observation_distribution is defined for QUERY actions")
    post = intent_posterior(state.task, state.obs_counts)
    return observation_distribution_from_posterior(state.task, post, action.argument)


def observation_distribution_from_posterior(
    task: HiddenIntentTask, posterior: np.ndarray, attribute: int
) -> dict[tuple[Token, ...], float]:
    """Observation distribution for QUERY(attribute) under a given posterior."""
    if not 0 <= attribute < task.n_attributes:
        raise ValueError(f"attribute index {attribute} out of range")
    vocab = task.vocab
    p1 = 0.0
    for z, w in enumerate(posterior):
        p1 += float(w) * bit_observation_prob(task, z, attribute, 1)
    p1 = min(max(p1, 0.0), 1.0)
    return {(vocab.bit(0),): 1.0 - p1, (vocab.bit(1),): p1}


def legal_actions(task: HiddenIntentTask) -> tuple[ActionSpec, ...]:
    """All grammar-legal actions, in a fixed deterministic order."""
    queries = tuple(ActionSpec(Verb.QUERY, j) for j in range(task.n_attributes))
    answers = tuple(ActionSpec(Verb.ANSWER, z) for z in range(task.n_intents))
    return queries + answers


def enumerate_trajectories(
    task: HiddenIntentTask,
    action_distribution,
    depth: int | None = None,
    leaf_limit: int = ENUMERATION_LEAF_LIMIT,
) -> list[tuple[Trajectory, float]]:
    """Enumerate all observable trajectories with their exact probabilities.

    ``action_distribution(turn_records)`` must return the policy's
    distribution over legal actions given the realized prefix, as a mapping
    ActionSpec -> probability. Weights combine the uniform intent prior,
    policy probabilities, and observation probabilities; they sum to 1.
    Raises :class:`EnumerationLimitError` past ``leaf_limit`` leaves.
    """
    horizon = task.horizon if depth is None else min(depth, task.horizon)
    vocab = task.vocab
    prior = 1.0 / task.n_intents
    leaves: list[tuple[Trajectory, float]] = []

    def recurse(
        turns: list[TurnRecord],
        lik: np.ndarray,
        policy_mass: float,
        turn: int,
    ) -> None:
        dist = action_distribution(tuple(turns))
        for action in legal_actions(task):
            p_act = float(dist.get(action, 0.0))
            if p_act == 0.0:
                continue
            mass = policy_mass * p_act
            tokens = encode_action(action, vocab)
            if action.verb is Verb.ANSWER:
                record = TurnRecord(tokens, None, turn)
                prob = mass * prior * float(lik.sum())
                _emit(turns + [record], prob, terminal=True)
                continue
            j = action.argument
            for bit in (0, 1):
                chan = np.array(
                    [bit_observation_prob(task, z, j, bit) for z in range(task.n_intents)]
                )
                new_lik = lik * chan
                total = float(new_lik.sum())
                if total == 0.0:
                    continue
                record = TurnRecord(tokens, (vocab.bit(bit),), turn)
                if turn >= horizon:
                    _emit(turns + [record], mass * prior * total, terminal=True)
                else:
                    recurse(turns + [record], new_lik, mass, turn + 1)

    def _emit(turns: list[TurnRecord], prob: float, terminal: bool) -> None:
        if len(leaves) >= leaf_limit:
            raise EnumerationLimitError(
                f"interaction tree exceeds {leaf_limit} leaves"
            )
        traj = Trajectory.from_turns(task.task_id, turns, terminal=terminal)
        leaves.append((traj, prob))

    recurse([], np.ones(task.n_intents, dtype=np.float64), 1.0, 1)
    return leaves
