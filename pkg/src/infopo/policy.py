"""Log-linear softmax policy over enumerable context states.

The context a policy conditions on is deliberately small: the ternary
revealed-attribute record (lagging one observation behind the environment),
the mid-action pending verb, the turn counter, and the single most recent
observation token (or a placeholder standing in for it). That keeps the state
space finite so log-probs, gradients, and KL divergences are all exact, and
the whole policy is one weight matrix [state x vocabulary].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import Token, Vocab
from .env import ActionSpec, Verb

_CKPT_MAGIC = b"IPO1"


@dataclass(frozen=True)
class ContextState:
    """What the policy sees when emitting a token.

    ``revealed`` folds in observations up to the previous turn only; the
    current turn's observation is visible through ``obs_slot`` alone, so a
    counterfactual context differs from the factual one in exactly that slot.
    ``pending_verb`` is set between an action's first and second token.
    """

    revealed: tuple[int, ...]
    pending_verb: Token | None
    turn: int
    obs_slot: Token | None


@dataclass(frozen=True)
class PolicySpace:
    """Indexing scheme mapping ContextState to a weight-matrix row."""

    vocab: Vocab
    horizon: int

    @property
    def n_attributes(self) -> int:
        return self.vocab.n_attributes

    @property
    def n_states(self) -> int:
        return (
            3**self.n_attributes * 3 * (self.horizon + 1) * (self.vocab.size + 1)
        )

    def initial_state(self) -> ContextState:
        return ContextState(
            revealed=(0,) * self.n_attributes, pending_verb=None, turn=0, obs_slot=None
        )

    def state_index(self, state: ContextState) -> int:
        if len(state.revealed) != self.n_attributes:
            raise ValueError("revealed record has the wrong arity")
        rev = 0
        for code in reversed(state.revealed):
            if code not in (0, 1, 2):
                raise ValueError(f"revealed codes must be ternary, got {code}")
            rev = rev * 3 + code
        if state.pending_verb is None:
            pending = 0
        elif state.pending_verb == self.vocab.QUERY:
            pending = 1
        elif state.pending_verb == self.vocab.ANSWER:
            pending = 2
        else:
            raise ValueError(f"token {state.pending_verb} is not a verb")
        if not 0 <= state.turn <= self.horizon:
            raise ValueError(f"turn {state.turn} outside [0, {self.horizon}]")
        if state.obs_slot is None:
            obs = 0
        elif 0 <= state.obs_slot < self.vocab.size:
            obs = 1 + state.obs_slot
        else:
            raise ValueError(f"unknown token id {state.obs_slot}")
        idx = ((rev * 3 + pending) * (self.horizon + 1) + state.turn) * (
            self.vocab.size + 1
        ) + obs
        return idx

    def legal_tokens(self, state: ContextState) -> np.ndarray:
        """Grammar-legal next tokens: verbs first, then the verb's arguments."""
        v = self.vocab
        if state.pending_verb is None:
            return np.array([v.QUERY, v.ANSWER], dtype=np.int64)
        if state.pending_verb == v.QUERY:
            return np.arange(2, 2 + v.n_attributes, dtype=np.int64)
        if state.pending_verb == v.ANSWER:
            return np.arange(2, 2 + v.n_intents, dtype=np.int64)
        raise ValueError(f"token {state.pending_verb} is not a verb")

    def advance(self, state: ContextState, token: Token) -> ContextState:
        """State transition within an action: the verb becomes pending."""
        if state.pending_verb is None:
            if token not in (self.vocab.QUERY, self.vocab.ANSWER):
                raise ValueError(f"token {token} is not a legal verb")
            return ContextState(state.revealed, token, state.turn, state.obs_slot)
        # The argument token completes the action; turn-level transitions are
        # the rollout engine's job.
        return state


@dataclass
class PolicyParams:
    """Mutable policy weights; updates bump ``version``."""

    space: PolicySpace
    weights: np.ndarray
    version: int = 0

    def __post_init__(self) -> None:
        expected = (self.space.n_states, self.space.vocab.size)
        if self.weights.shape != expected:
            raise ValueError(f"weights must have shape {expected}, got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def apply_update(self, delta: np.ndarray) -> None:
        self.weights += delta
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weight update produced non-finite values")
        self.version += 1


@dataclass(frozen=True)
class PolicySnapshot:
    """Immutable copy of policy weights (rollout / reference policies)."""

    space: PolicySpace
    weights: np.ndarray
    version: int


def init_params(
    space: PolicySpace,
    rng: np.random.Generator,
    scale: float = 0.5,
    query_bias: float = 0.0,
) -> PolicyParams:
    """Gaussian weight init; ``query_bias`` lowers every ANSWER-verb logit."""
    weights = rng.normal(0.0, scale, size=(space.n_states, space.vocab.size))
    if query_bias:
        weights[:, space.vocab.ANSWER] -= query_bias
    return PolicyParams(space=space, weights=weights)


def snapshot(params: PolicyParams) -> PolicySnapshot:
    frozen = params.weights.copy()
    frozen.setflags(write=False)
    return PolicySnapshot(space=params.space, weights=frozen, version=params.version)


def _log_softmax_legal(
    weights: np.ndarray, row: int, legal: np.ndarray
) -> np.ndarray:
    logits = weights[row, legal]
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def token_log_dist(policy, state: ContextState) -> tuple[np.ndarray, np.ndarray]:
    """(legal tokens, their log-probabilities) at a context state."""
    space = policy.space
    legal = space.legal_tokens(state)
    row = space.state_index(state)
    return legal, _log_softmax_legal(policy.weights, row, legal)


def action_log_prob(policy, state: ContextState, tokens) -> np.ndarray:
    """Per-token log-probs of an action sequence under teacher forcing."""
    out = np.empty(len(tokens), dtype=np.float64)
    current = state
    for k, token in enumerate(tokens):
        legal, log_probs = token_log_dist(policy, current)
        hits = np.nonzero(legal == token)[0]
        if hits.size == 0:
            raise ValueError(f"token {token} is not legal at this state")
        out[k] = log_probs[hits[0]]
        current = policy.space.advance(current, token)
    return out


def sample_action(
    policy, state: ContextState, rng: np.random.Generator
) -> tuple[ActionSpec, np.ndarray]:
    """Sample a grammar-legal 2-token action autoregressively.

    The returned log-probs equal :func:`action_log_prob` on the sampled
    tokens exactly (same code path).
    """
    space = policy.space
    tokens: list[Token] = []
    current = state
    for _ in range(2):
        legal, log_probs = token_log_dist(policy, current)
        cdf = np.cumsum(np.exp(log_probs))
        draw = rng.random()
        pick = int(np.searchsorted(cdf, draw * cdf[-1], side="right"))
        pick = min(pick, len(legal) - 1)
        token = int(legal[pick])
        tokens.append(token)
        current = space.advance(current, token)
    verb = Verb.QUERY if tokens[0] == space.vocab.QUERY else Verb.ANSWER
    spec = ActionSpec(verb, space.vocab.arg_index(tokens[1]))
    return spec, action_log_prob(policy, state, tokens)


def grad_log_prob(policy, state: ContextState, tokens) -> dict[int, np.ndarray]:
    """Analytic grad of sum-of-token log-probs, sparse over weight rows.

    Per generated token: +1 on (state, token), minus the softmax probabilities
    over the grammar-legal vocabulary at that state. Rows therefore sum to 0.
    """
    space = policy.space
    grads: dict[int, np.ndarray] = {}
    current = state
    for token in tokens:
        legal, log_probs = token_log_dist(policy, current)
        hits = np.nonzero(legal == token)[0]
        if hits.size == 0:
            raise ValueError(f"token {token} is not legal at this state")
        row = space.state_index(current)
        vec = grads.setdefault(row, np.zeros(space.vocab.size))
        vec[legal] -= np.exp(log_probs)
        vec[token] += 1.0
        current = space.advance(current, token)
    return grads


def exact_kl(policy, ref, state: ContextState) -> float:
    """Exact KL(policy || ref) over the legal token set at one state."""
    legal, log_p = token_log_dist(policy, state)
    _, log_q = token_log_dist(ref, state)
    p = np.exp(log_p)
    return float(np.sum(p * (log_p - log_q)))


def exact_kl_grad(policy, ref, state: ContextState) -> tuple[int, np.ndarray]:
    """(row index, dKL/dlogits) for the KL at one state.

    dKL/dlogit_b = p_b * ((log p_b - log q_b) - KL) on legal tokens.
    """
    space = policy.space
    legal, log_p = token_log_dist(policy, state)
    _, log_q = token_log_dist(ref, state)
    p = np.exp(log_p)
    ratio = log_p - log_q
    kl = float(np.sum(p * ratio))
    grad = np.zeros(space.vocab.size)
    grad[legal] = p * (ratio - kl)
    return space.state_index(state), grad


def sequence_log_prob(policy, state: ContextState, tokens) -> float:
    return float(action_log_prob(policy, state, tokens).sum())


def marginal_action_log_prob(
    policy, state: ContextState, obs_dist: dict[tuple[Token, ...], float], tokens
) -> float:
    """Sequence-level log-prob under the observation-marginalized policy.

    Computes log sum_o P(o) * prod_k pi(y_k | state with obs_slot=o, y_<k)
    via log-sum-exp. ``state`` supplies everything but the observation slot,
    which is overridden per outcome (using the outcome's last token, matching
    the most-recent-observation convention).
    """
    if not obs_dist:
        raise ValueError("observation distribution is empty")
    terms = []
    for obs_tokens, prob in obs_dist.items():
        if prob < 0:
            raise ValueError("observation probabilities must be nonnegative")
        if prob == 0.0:
            continue
        ctx = ContextState(
            revealed=state.revealed,
            pending_verb=state.pending_verb,
            turn=state.turn,
            obs_slot=obs_tokens[-1] if obs_tokens else None,
        )
        terms.append(np.log(prob) + sequence_log_prob(policy, ctx, tokens))
    if not terms:
        raise ValueError("observation distribution has no support")
    arr = np.asarray(terms)
    peak = arr.max()
    return float(peak + np.log(np.exp(arr - peak).sum()))


def save_checkpoint(policy, path) -> None:
    """Write a bit-exact binary checkpoint: header + row-major float64 weights."""
    space = policy.space
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(
            struct.pack("<QQQ", space.vocab.size, space.n_states, policy.version)
        )
        fh.write(np.ascontiguousarray(policy.weights, dtype=np.float64).tobytes())


def load_checkpoint(path, space: PolicySpace) -> PolicyParams:
    """Read a checkpoint written by :func:`save_checkpoint`; shape-checked."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a policy checkpoint: bad magic {magic!r}")
        vocab_size, n_states, version = struct.unpack("<QQQ", fh.read(24))
        if vocab_size != space.vocab.size or n_states != space.n_states:
            raise ValueError(
                f"checkpoint shape ({n_states}, {vocab_size}) does not match "
                f"space ({space.n_states}, {space.vocab.size})"
            )
        data = np.frombuffer(fh.read(), dtype=np.float64).reshape(
            (n_states, vocab_size)
        )
    return PolicyParams(space=space, weights=data.copy(), version=int(version))
