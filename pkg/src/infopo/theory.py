"""Exact verifiers: info gain vs conditional mutual information, Fano bound.

Two independent computation routes back every check. The mutual-information
route walks the interaction forward over *information states* — (policy
context, attribute behind the observation slot, per-intent observation
likelihood) — which is exact because both the policy and the observation
channel factor through that tuple, and histories sharing it can be merged.
The expected-info-gain route enumerates whole observable trajectories and
scores each with the production exact-marginal reward, then averages under
the trajectory distribution. Agreement between the routes is the first
theorem; the Fano bound on the directed-information sum is the second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Token, Vocab
from .env import (
    ActionSpec,
    EnumerationLimitError,
    HiddenIntentTask,
    Verb,
    bit_observation_prob,
    enumerate_trajectories,
    legal_actions,
)
from .infogain import info_gain_exact_marginal
from .policy import ContextState, PolicySpace, token_log_dist
from .rollout import ContextTracker, fold_observation, valid_turn_flags

WALK_NODE_LIMIT = 10**6


@dataclass(frozen=True)
class TheoryCase:
    """A (task, policy) pair small enough for exact enumeration."""

    task: HiddenIntentTask
    policy: object
    horizon: int | None = None
    delta_target: float | None = None

    @property
    def effective_horizon(self) -> int:
        return self.task.horizon if self.horizon is None else min(self.horizon, self.task.horizon)


@dataclass(frozen=True)
class MIResult:
    """Exact per-turn conditional MI, its sum, and the dual-route expectation."""

    per_turn_mi: tuple[float, ...]
    directed_info: float
    expected_info_gain: float | None
    per_turn_expected: tuple[float, ...] | None
    success_prob: float
    total_mass: float


@dataclass(frozen=True)
class TheoremReport:
    name: str
    passed: bool
    max_abs_err: float
    detail: dict


def action_sequence_dist(policy, ctx: ContextState) -> dict[ActionSpec, float]:
    """Exact distribution over full 2-token actions at a context."""
    space: PolicySpace = policy.space
    vocab = space.vocab
    verbs, verb_logp = token_log_dist(policy, ctx)
    dist: dict[ActionSpec, float] = {}
    for verb_token, lp_v in zip(verbs, verb_logp):
        pending = space.advance(ctx, int(verb_token))
        args, arg_logp = token_log_dist(policy, pending)
        verb = Verb.QUERY if verb_token == vocab.QUERY else Verb.ANSWER
        for arg_token, lp_a in zip(args, arg_logp):
            spec = ActionSpec(verb, vocab.arg_index(int(arg_token)))
            dist[spec] = float(np.exp(lp_v + lp_a))
    return dist


def _advance_context(
    space: PolicySpace,
    ctx: ContextState,
    slot_attr: int | None,
    queried_attr: int,
    bit_token: Token,
) -> ContextState:
    revealed = ctx.revealed
    if slot_attr is not None and ctx.obs_slot is not None:
        revealed = fold_observation(revealed, slot_attr, ctx.obs_slot, space)
    return ContextState(
        revealed=revealed,
        pending_verb=None,
        turn=min(ctx.turn + 1, space.horizon),
        obs_slot=bit_token,
    )


def conditional_mi(
    case: TheoryCase,
    include_expected: bool = True,
    node_limit: int = WALK_NODE_LIMIT,
) -> MIResult:
    """Enumerate the interaction exactly and compute per-turn MI.

    Per turn t the contribution at a pre-observation node is
    sum_o P(o) sum_a pi(a|o) log(pi(a|o) / sum_o' P(o') pi(a|o')), weighted by
    the node's reach probability: the conditional MI between the incoming
    observation and the next full action. ``include_expected`` additionally
    runs the trajectory-enumeration route through the production reward.
    """
    task = case.task
    policy = case.policy
    space: PolicySpace = policy.space
    horizon = case.effective_horizon
    prior = 1.0 / task.n_intents
    per_turn = np.zeros(horizon, dtype=np.float64)
    success = 0.0
    leaf_mass = 0.0
    nodes_seen = 0

    Key = tuple  # (ctx, slot_attr, lik tuple)
    level: dict[Key, float] = {
        (space.initial_state(), None, (1.0,) * task.n_intents): 1.0
    }

    for t in range(1, horizon + 1):
        next_level: dict[Key, float] = {}
        for (ctx, slot_attr, lik_t), mass in level.items():
            nodes_seen += 1
            if nodes_seen > node_limit:
                raise EnumerationLimitError(
                    f"information-state walk exceeds {node_limit} nodes"
                )
            lik = np.asarray(lik_t)
            zmass = prior * float(lik.sum())
            dist = action_sequence_dist(policy, ctx)
            for action, p_act in dist.items():
                if p_act == 0.0:
                    continue
                if action.verb is Verb.ANSWER:
                    success += mass * p_act * prior * float(lik[action.argument])
                    leaf_mass += mass * p_act * zmass
                    continue
                j = action.argument
                chan = np.array(
                    [
                        bit_observation_prob(task, z, j, 1)
                        for z in range(task.n_intents)
                    ]
                )
                post = lik / lik.sum()
                p_one = float(post @ chan)
                p_bits = (1.0 - p_one, p_one)
                bit_tokens = (space.vocab.bit(0), space.vocab.bit(1))
                if t < horizon:
                    next_ctxs = [
                        _advance_context(space, ctx, slot_attr, j, bt)
                        for bt in bit_tokens
                    ]
                    branch_dists = [action_sequence_dist(policy, c) for c in next_ctxs]
                    actions = list(branch_dists[0].keys())
                    probs = np.array(
                        [[d[a] for a in actions] for d in branch_dists]
                    )
                    weights = np.array(p_bits)
                    marg = weights @ probs
                    node_mi = 0.0
                    for b in range(2):
                        if weights[b] == 0.0:
                            continue
                        sel = probs[b] > 0.0
                        node_mi += weights[b] * float(
                            np.sum(probs[b][sel] * np.log(probs[b][sel] / marg[sel]))
                        )
                    per_turn[t - 1] += mass * p_act * prior * float(lik.sum()) * node_mi
                for bit, bt in enumerate(bit_tokens):
                    flip = np.array(
                        [
                            bit_observation_prob(task, z, j, bit)
                            for z in range(task.n_intents)
                        ]
                    )
                    new_lik = lik * flip
                    total = float(new_lik.sum())
                    if total == 0.0:
                        continue
                    if t >= horizon:
                        leaf_mass += mass * p_act * prior * total
                        continue
                    key = (
                        _advance_context(space, ctx, slot_attr, j, bt),
                        j,
                        tuple(new_lik),
                    )
                    next_level[key] = next_level.get(key, 0.0) + mass * p_act
        level = next_level

    expected_total = None
    per_turn_expected = None
    if include_expected:
        per_turn_expected_arr = expected_info_gain_per_turn(case)
        per_turn_expected = tuple(float(v) for v in per_turn_expected_arr)
        expected_total = float(per_turn_expected_arr.sum())

    return MIResult(
        per_turn_mi=tuple(float(v) for v in per_turn),
        directed_info=float(per_turn.sum()),
        expected_info_gain=expected_total,
        per_turn_expected=per_turn_expected,
        success_prob=success,
        total_mass=leaf_mass,
    )


def trajectory_action_callback(policy):
    """Adapter giving the trajectory enumerator the policy's action law.

    Replays the prefix through the same context tracking the rollout engine
    uses, so enumeration and rollout agree on conditioning.
    """
    space: PolicySpace = policy.space
    vocab = space.vocab

    def callback(turns) -> dict[ActionSpec, float]:
        tracker = ContextTracker(space)
        for turn in turns:
            if turn.observation_tokens is not None:
                verb, arg = turn.action_tokens
                tracker.observe(vocab.arg_index(arg), turn.observation_tokens[-1])
        return action_sequence_dist(policy, tracker.context)

    return callback


def expected_info_gain_per_turn(
    case: TheoryCase, obs_dist_fn=None
) -> np.ndarray:
    """E[r_info_t] per turn via full trajectory enumeration.

    Each enumerated trajectory is scored with the production exact-marginal
    reward and weighted by its exact probability.
    """
    task = case.task
    policy = case.policy
    horizon = case.effective_horizon
    out = np.zeros(horizon, dtype=np.float64)
    leaves = enumerate_trajectories(
        task, trajectory_action_callback(policy), depth=horizon
    )
    for traj, prob in leaves:
        flags = valid_turn_flags(traj)
        values = info_gain_exact_marginal(
            traj, policy, task, flags, obs_dist_fn=obs_dist_fn
        )
        for t, (value, ok) in enumerate(zip(values, flags)):
            if ok and t < horizon:
                out[t] += prob * float(value)
    return out


def verify_theorem1(
    case: TheoryCase, tol: float = 1e-10, obs_dist_fn=None
) -> TheoremReport:
    """Check E[r_info_t] == I(O_t; A_{t+1} | H_t) per turn and in total.

    ``obs_dist_fn`` lets negative controls corrupt the marginal used by the
    reward route; the check must then fail.
    """
    mi = conditional_mi(case, include_expected=obs_dist_fn is None)
    if obs_dist_fn is None:
        expected = np.asarray(mi.per_turn_expected)
    else:
        expected = expected_info_gain_per_turn(case, obs_dist_fn=obs_dist_fn)
    per_turn = np.asarray(mi.per_turn_mi)
    errs = np.abs(expected - per_turn)
    total_err = abs(float(expected.sum()) - mi.directed_info)
    max_err = float(max(errs.max(), total_err))
    return TheoremReport(
        name="info-gain equals conditional mutual information",
        passed=bool(max_err <= tol),
        max_abs_err=max_err,
        detail={
            "per_turn_mi": [float(v) for v in per_turn],
            "per_turn_expected": [float(v) for v in expected],
            "directed_info": mi.directed_info,
            "expected_total": float(expected.sum()),
            "tolerance": tol,
        },
    )


def binary_entropy(delta: float) -> float:
    """h(delta) in nats, continuous at 0 and 1."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if delta in (0.0, 1.0):
        return 0.0
    return -delta * math.log(delta) - (1.0 - delta) * math.log(1.0 - delta)


def fano_bound(n_intents: int, delta: float) -> float:
    """Minimum accumulated information (nats) for error probability delta."""
    if n_intents < 2:
        raise ValueError("need at least 2 intents")
    return (
        math.log(n_intents)
        - binary_entropy(delta)
        - delta * math.log(n_intents - 1)
    )


def verify_theorem2(case: TheoryCase, slack: float = 1e-9) -> TheoremReport:
    """Check directed information >= the Fano bound at the exact success rate.

    Episodes that time out without answering count as failures; that choice
    only raises delta, which weakens the bound, so the inequality is still
    the one the theorem demands.
    """
    mi = conditional_mi(case, include_expected=False)
    delta = 1.0 - mi.success_prob
    delta = min(max(delta, 0.0), 1.0)
    bound = fano_bound(case.task.n_intents, delta)
    passed = mi.directed_info >= bound - slack
    return TheoremReport(
        name="directed information dominates the Fano bound",
        passed=bool(passed),
        max_abs_err=float(max(0.0, bound - mi.directed_info)),
        detail={
            "directed_info": mi.directed_info,
            "success_prob": mi.success_prob,
            "delta": delta,
            "fano_bound": bound,
            "slack": slack,
            "total_mass": mi.total_mass,
        },
    )
