"""Block Markov coding over the energy-harvesting relay.

Each battery level ``u`` has its own superposition codebook: a relay layer
indexed by the previous message, and a transmitter layer indexed by
``(m_u, m_prev)`` drawn symbol-by-symbol conditionally on the relay layer.
The current battery level selects which codebook feeds the next slot.  The
relay decodes per-state sub-messages from the positions where it sat in
that state; the receiver decodes backwards, regenerating the relay output
for every candidate previous message without knowing the states.

Codewords are never stored in bulk.  Entry ``(u, index)`` is derived from a
counter-based stream keyed by ``(seed, layer, u, index)``, so codebooks with
``2**1000`` entries are representable.  Decoders run in one of two modes:

* exhaustive: every candidate is regenerated and compared (needs message
  counts at or below ``cap``);
* sampled: the entry named by ``probe`` is regenerated and compared, and the
  number of *other* entries consistent with the observation is drawn from
  its exact binomial law.  Other entries are i.i.d. given what the decoder
  conditions on, so this reproduces the random-coding ensemble's error
  events without enumerating it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, PolicyPmf, transition_table
from .errors import InfeasibleTransmission, PaddingExhausted, PlanError
from .markov import binary_entropy, bsc_mutual_information, _entropy_bits
from . import streams

DEFAULT_CAP = 4096
TRACE_COLUMNS = ("slot", "state", "x1", "x2", "y3")


# --------------------------------------------------------------------------
# plan

@dataclass(frozen=True)
class BlockPlan:
    n: int
    B: int
    epsilon: float
    n_u: tuple
    delta: int
    R_u: tuple
    K_u: tuple
    R_relay: float
    M_count: int
    clamped: bool = False
    within_packing_limit: bool = True

    @property
    def lengths(self) -> tuple:
        """Codeword length per state: information symbols plus padding."""
        return tuple(k + self.delta for k in self.n_u)

    @property
    def message_space(self) -> int:
        return math.prod(self.K_u)

    @property
    def rate(self) -> float:
        """Transmitter rate ``log2(prod K_u) / n`` in bits per slot."""
        return sum(_log2_int(k) for k in self.K_u) / self.n

    @property
    def relay_rate(self) -> float:
        return _log2_int(self.M_count) / self.n


def _log2_int(k: int) -> float:
    return math.log2(k) if k > 0 else float("-inf")


def _floor_pow2(bits: float) -> int:
    """floor(2 ** bits) for possibly huge ``bits``."""
    if bits < 52:
        return int(math.floor(2.0**bits + 1e-9))
    whole = int(math.floor(bits))
    return int(2.0 ** (bits - whole) * 2**52) << (whole - 52)


def conditional_entropies(policy: PolicyPmf) -> np.ndarray:
    """``H(X1 | X2)`` per battery level, in bits."""
    joint = policy.joint.reshape(len(policy), 4)
    x2 = joint[:, [0, 1]] + joint[:, [2, 3]]
    return np.maximum(_entropy_bits(joint) - _entropy_bits(x2), 0.0)


def make_plan(
    policy: PolicyPmf,
    pi,
    n: int,
    B: int,
    epsilon: float,
    rate_fraction: float,
    *,
    relay_rate_fraction: float | None = None,
    crossover: float = 0.0,
) -> BlockPlan:
    """Codebook sizes for block length ``n``.

    Per-state rates are ``rate_fraction * H(X1|X2, u)`` and the relay-layer
    rate is ``relay_rate_fraction`` (default ``rate_fraction``) times the
    receiver bound.  ``M_count`` is clamped to ``prod K_u`` when it would not
    fit in the transmitter's message vector.
    """
    pi = np.asarray(pi, dtype=float)
    if n < 1 or B < 2:
        raise PlanError("need n >= 1 and B >= 2")
    # fractions above 1 are allowed for threshold experiments; the packing
    # condition is then reported through ``within_packing_limit``
    if not 0 < rate_fraction:
        raise PlanError("rate_fraction must be positive")
    relay_fraction = rate_fraction if relay_rate_fraction is None else relay_rate_fraction
    if not 0 < relay_fraction:
        raise PlanError("relay_rate_fraction must be positive")
    positive = pi[pi > 0]
    if not 0 < epsilon < positive.min():
        raise PlanError(f"epsilon={epsilon} must lie in (0, min positive pi = {positive.min():.6g})")

    n_u = tuple(max(0, int(math.floor(n * (p - epsilon) + 1e-9))) for p in pi)
    delta = n - min(k for k, p in zip(n_u, pi) if p > 0)

    H = conditional_entropies(policy)
    R_u = tuple(float(rate_fraction * h) for h in H)
    K_u = tuple(max(1, _floor_pow2(k * r)) for k, r in zip(n_u, R_u))
    within = all(r < h - epsilon for r, h, k in zip(R_u, H, K_u) if k > 1)

    a = np.array([s.p_x2_one for s in policy.per_state])
    per_state = bsc_mutual_information(a, crossover) if crossover > 0 else binary_entropy(a)
    R_relay = float(relay_fraction * np.dot(pi, per_state))
    M_count = max(1, _floor_pow2(n * R_relay))
    clamped = False
    if M_count > math.prod(K_u):
        M_count, clamped = math.prod(K_u), True
    return BlockPlan(n, B, float(epsilon), n_u, delta, R_u, K_u, R_relay, M_count, clamped, within)


# --------------------------------------------------------------------------
# message vectors

def to_message_vector(message: int, K_u) -> tuple:
    """Mixed-radix split of ``message`` in ``[1, prod K_u]`` into per-state indices (1-based)."""
    total = math.prod(K_u)
    if not 1 <= message <= total:
        raise ValueError(f"message {message} outside [1, {total}]")
    rest, out = message - 1, []
    for k in K_u:
        rest, digit = divmod(rest, k)
        out.append(digit + 1)
    return tuple(out)


def from_message_vector(vector, K_u) -> int:
    value, scale = 0, 1
    for digit, k in zip(vector, K_u):
        if not 1 <= digit <= k:
            raise ValueError(f"component {digit} outside [1, {k}]")
        value += (digit - 1) * scale
        scale *= k
    return value + 1


# --------------------------------------------------------------------------
# codebooks

class CodebookSet:
    """Lazily materialized per-state superposition codebooks for one block.

    All entries are pure functions of ``(seed, plan, policy)``; the internal
    cache only memoizes them.
    """

    def __init__(self, plan: BlockPlan, policy: PolicyPmf, pi, seed: int):
        self.plan = plan
        self.policy = policy
        self.pi = np.asarray(pi, dtype=float)
        self.seed = int(seed)
        joint = policy.joint
        self.p_x2 = joint[:, :, 1].sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            # P(x1 = 1 | x2, u); zero where x2 itself has zero probability
            marg = joint.sum(axis=1)
            self.p_x1_given_x2 = np.where(marg > 0, joint[:, 1, :] / np.where(marg > 0, marg, 1), 0.0)
        self._relay = {}
        self._tx = {}

    def relay_codeword(self, u: int, m_prev: int) -> np.ndarray:
        key = (u, m_prev)
        word = self._relay.get(key)
        if word is None:
            L = self.plan.lengths[u]
            draws = streams.stream(self.seed, streams.RELAY_LAYER, u, m_prev).random(L)
            word = (draws < self.p_x2[u]).astype(np.int8)
            self._relay[key] = word
        return word

    def tx_codeword(self, u: int, m_u: int, m_prev: int) -> np.ndarray:
        key = (u, m_u, m_prev)
        word = self._tx.get(key)
        if word is None:
            x2 = self.relay_codeword(u, m_prev)
            draws = streams.stream(self.seed, streams.TX_LAYER, u, m_u, m_prev).random(x2.size)
            word = (draws < self.p_x1_given_x2[u][x2]).astype(np.int8)
            self._tx[key] = word
        return word

    def initial_state(self, m_prev: int) -> int:
        gen = streams.stream(self.seed, streams.INITIAL_STATE, m_prev)
        return int(gen.choice(self.pi.size, p=self.pi / self.pi.sum()))


def generate_codebooks(plan: BlockPlan, policy: PolicyPmf, seed: int, pi) -> CodebookSet:
    """Codebooks for one block; ``pi`` is the steady state used for initial-state draws."""
    return CodebookSet(plan, policy, pi, seed)


# --------------------------------------------------------------------------
# encoding

@dataclass(frozen=True)
class BlockTrace:
    x1: np.ndarray
    x2: np.ndarray
    states: np.ndarray
    end_state: int

    def __iter__(self):
        return iter((self.x1, self.x2, self.states))


def run_block(m_b, m_prev_tx, m_prev_relay, books: CodebookSet, plan: BlockPlan, cfg: ChannelConfig, start_state: int) -> BlockTrace:
    """One block of ``n`` slots.

    In each slot both nodes read the next unread symbol of the codeword for
    the current battery level; the battery then moves by the channel rule.
    """
    if not 0 <= start_state <= cfg.battery_capacity:
        raise ValueError(f"start_state {start_state} outside [0, {cfg.battery_capacity}]")
    vec = to_message_vector(m_b, plan.K_u)
    S = cfg.n_states
    tx = [books.tx_codeword(u, vec[u], m_prev_tx).tolist() for u in range(S)]
    rl = [books.relay_codeword(u, m_prev_relay).tolist() for u in range(S)]
    lengths = plan.lengths
    table = transition_table(cfg).tolist()
    ptr = [0] * S
    x1s, x2s, us = [], [], []
    u = start_state
    for _ in range(plan.n):
        k = ptr[u]
        if k >= lengths[u]:
            raise PaddingExhausted(u, k + 1, lengths[u])
        x1, x2 = tx[u][k], rl[u][k]
        v = table[u][x1][x2]
        if v < 0:
            raise InfeasibleTransmission(f"relay sent '1' from state {u}")
        ptr[u] = k + 1
        x1s.append(x1)
        x2s.append(x2)
        us.append(u)
        u = v
    return BlockTrace(np.array(x1s, dtype=np.int8), np.array(x2s, dtype=np.int8), np.array(us, dtype=np.int64), u)


def preamble(from_state: int, to_state: int, cfg: ChannelConfig) -> list:
    """Slots ``(x1, x2)`` that steer the battery from ``from_state`` to ``to_state``.

    Lowering sends "1" (cost m) while u >= m; raising receives "1" one unit at a time.
    """
    u, slots = from_state, []
    while u != to_state:
        if u > to_state and u >= cfg.energy_cost:
            slots.append((0, 1))
            u -= cfg.energy_cost
        else:
            slots.append((1, 0))
            u += 1
    return slots


# --------------------------------------------------------------------------
# ensemble sampling helpers

def _impostor_count(log_q: float, others: int, rng) -> int:
    """Sample ``min(N, 2)`` for ``N ~ Binomial(others, q)`` given ``log q`` (natural log)."""
    if others <= 0 or log_q == float("-inf"):
        return 0
    log_others = math.log(others)
    if log_q < -30:
        lam_log = log_others + log_q
        if lam_log > 700:
            return 2
        lam = math.exp(lam_log)
        # q is tiny: Poisson(lam) is exact to within O(q)
        p0 = math.exp(-lam)
        p1 = lam * p0
    else:
        q = math.exp(log_q)
        if q >= 1.0:
            return 2 if others >= 2 else 1
        if log_others > 700:
            return 2
        nn = float(others)
        log_p0 = nn * math.log1p(-q)
        p0 = math.exp(log_p0)
        p1 = math.exp(math.log(nn) + log_q + (nn - 1) * math.log1p(-q))
    r = rng.random()
    if r < p0:
        return 0
    if r < p0 + p1:
        return 1
    return 2


def _other_index(exclude: int, size: int, rng) -> int:
    """Uniform index in ``[1, size]`` other than ``exclude``."""
    k = random_message(size - 1, rng)
    return k if k < exclude else k + 1


def random_message(upper: int, rng) -> int:
    """Uniform integer in ``[1, upper]``; ``upper`` may exceed 64 bits."""
    if upper < 2**62:
        return int(rng.integers(1, upper + 1))
    # 64 surplus bits keep the modulo bias below 2**-64
    nbytes = (upper.bit_length() + 7) // 8 + 8
    raw = int.from_bytes(rng.bytes(nbytes), "little")
    return raw % upper + 1


def _x2_weights(policy: PolicyPmf, cfg: ChannelConfig) -> np.ndarray:
    """``W[u, v, x2]`` = P(relay emits x2 and battery moves u -> v)."""
    table = transition_table(cfg)
    S = cfg.n_states
    W = np.zeros((S, S, 2))
    joint = policy.joint
    for u in range(S):
        for x1 in (0, 1):
            for x2 in (0, 1):
                v = table[u, x1, x2]
                if v >= 0:
                    W[u, v, x2] += joint[u, x1, x2]
    return W


def sequence_log_prob(y, policy: PolicyPmf, cfg: ChannelConfig, pi) -> float:
    """Natural-log probability that a fresh codebook entry regenerates exactly ``y``.

    A fresh entry starts from a battery level drawn from ``pi`` and emits,
    slot by slot, unused symbols drawn from the state pmf, so its relay
    output is the hidden-Markov process driven by the battery chain.
    """
    W = _x2_weights(policy, cfg)
    alpha = np.asarray(pi, dtype=float).copy()
    total = 0.0
    for sym in np.asarray(y, dtype=np.int64):
        alpha = alpha @ W[:, :, sym]
        s = alpha.sum()
        if s <= 0:
            return float("-inf")
        total += math.log(s)
        alpha /= s
    return total


def distance_log_law(y, policy: PolicyPmf, cfg: ChannelConfig, pi, max_distance: int) -> np.ndarray:
    """Natural-log probabilities ``log P(d(X2, y) = d)`` for ``d = 0..max_distance``
    where X2 is a fresh entry's relay output."""
    W = _x2_weights(policy, cfg)
    D = max_distance + 1
    alpha = np.zeros((cfg.n_states, D))
    alpha[:, 0] = pi
    log_scale = 0.0
    for sym in np.asarray(y, dtype=np.int64):
        same = W[:, :, sym].T @ alpha
        diff = W[:, :, 1 - sym].T @ alpha
        alpha = same
        alpha[:, 1:] += diff[:, :-1]
        peak = alpha.max()
        if peak <= 0:
            return np.full(D, -np.inf)
        alpha /= peak
        log_scale += math.log(peak)
    law = alpha.sum(axis=0)
    with np.errstate(divide="ignore"):
        return np.log(law) + log_scale


def _logsumexp(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("-inf")
    top = values.max()
    if top == -np.inf:
        return float("-inf")
    return float(top + np.log(np.exp(values - top).sum()))


# --------------------------------------------------------------------------
# relay decoding

@dataclass(frozen=True)
class Decoded:
    """Decoder outcome.  ``reason`` is ``"ok"`` when ``message`` is set."""

    message: int | None
    reason: str
    state: int | None = None

    @property
    def ok(self) -> bool:
        return self.reason == "ok"


def relay_decode(y2, states, m_prev_relay, books: CodebookSet, plan: BlockPlan, *, probe=None, rng=None, cap=DEFAULT_CAP) -> Decoded:
    """Decode the transmitter's block message from the relay's received symbols.

    For each battery level the first ``n_u`` symbols received while in that
    level are matched against every transmitter-layer codeword superposed on
    the relay's own previous message.  Failure reasons: ``incomplete`` (a
    level was visited fewer than ``n_u`` times), ``no_match``, ``collision``
    (two or more codewords fit) and ``out_of_range``.

    With ``probe`` (the message actually sent) decoding is sampled; see the
    module docstring.
    """
    y2 = np.asarray(y2)
    states = np.asarray(states)
    if y2.shape != states.shape:
        raise ValueError("y2 and states must have equal length")
    positions = []
    for u, need in enumerate(plan.n_u):
        where = np.flatnonzero(states == u)
        if need > 0 and where.size < need:
            return Decoded(None, "incomplete", u)
        positions.append(where[:need])

    probe_vec = to_message_vector(probe, plan.K_u) if probe is not None else None
    comps = []
    for u, (pos, K) in enumerate(zip(positions, plan.K_u)):
        if K == 1:
            comps.append(1)
            continue
        received = y2[pos].astype(np.int8)
        need = plan.n_u[u]
        if probe_vec is None:
            if K > cap:
                raise ValueError(f"K_{u}={K} exceeds the exhaustive cap {cap}; pass probe= for sampled decoding")
            words = np.array([books.tx_codeword(u, k, m_prev_relay)[:need] for k in range(1, K + 1)])
            hits = np.flatnonzero(np.all(words == received, axis=1))
            if hits.size == 0:
                return Decoded(None, "no_match", u)
            if hits.size > 1:
                return Decoded(None, "collision", u)
            comps.append(int(hits[0]) + 1)
            continue
        own = probe_vec[u]
        own_hit = np.array_equal(books.tx_codeword(u, own, m_prev_relay)[:need], received)
        x2 = books.relay_codeword(u, m_prev_relay)[:need]
        p1 = books.p_x1_given_x2[u][x2]
        with np.errstate(divide="ignore"):
            log_q = float(np.sum(np.log(np.where(received == 1, p1, 1.0 - p1))))
        extra = _impostor_count(log_q, K - 1, rng)
        if own_hit and extra == 0:
            comps.append(own)
        elif own_hit or extra >= 2:
            return Decoded(None, "collision", u)
        elif extra == 0:
            return Decoded(None, "no_match", u)
        else:
            comps.append(_other_index(own, K, rng))
    message = from_message_vector(comps, plan.K_u)
    if message > plan.M_count:
        return Decoded(None, "out_of_range")
    return Decoded(message, "ok")


# --------------------------------------------------------------------------
# receiver

def receiver_reconstruct(m_b_known, m_prev_candidate, books: CodebookSet, plan: BlockPlan, cfg: ChannelConfig) -> np.ndarray:
    """Relay output the receiver expects if the relay sent ``m_prev_candidate``."""
    start = books.initial_state(m_prev_candidate)
    return run_block(m_b_known, m_prev_candidate, m_prev_candidate, books, plan, cfg, start).x2


def reconstruct_all(m_b_known, candidates, books: CodebookSet, plan: BlockPlan, cfg: ChannelConfig):
    """Vectorized :func:`receiver_reconstruct` over many candidates.

    Returns ``(X2, ok)``; ``ok`` is False where a candidate exhausted a codeword.
    """
    cands = list(candidates)
    M, S, n = len(cands), cfg.n_states, plan.n
    vec = to_message_vector(m_b_known, plan.K_u)
    Lmax = max(plan.lengths)
    relay = np.full((S, M, Lmax + 1), -1, dtype=np.int8)
    tx = np.full((S, M, Lmax + 1), -1, dtype=np.int8)
    for u in range(S):
        L = plan.lengths[u]
        for i, c in enumerate(cands):
            relay[u, i, :L] = books.relay_codeword(u, c)
            tx[u, i, :L] = books.tx_codeword(u, vec[u], c)
    table = transition_table(cfg)
    state = np.array([books.initial_state(c) for c in cands], dtype=np.int64)
    ptr = np.zeros((M, S), dtype=np.int64)
    ok = np.ones(M, dtype=bool)
    rows = np.arange(M)
    out = np.zeros((M, n), dtype=np.int8)
    for t in range(n):
        k = np.minimum(ptr[rows, state], Lmax)
        x1 = tx[state, rows, k]
        x2 = relay[state, rows, k]
        ok &= x2 >= 0
        x1c, x2c = np.clip(x1, 0, 1), np.clip(x2, 0, 1)
        out[:, t] = x2c
        ptr[rows, state] += 1
        nxt = table[state, x1c, x2c]
        ok &= nxt >= 0
        state = np.where(nxt >= 0, nxt, state)
    return out, ok


def typicality_band(n: int, p: float, eps_typ: float | None = None) -> tuple:
    """Accepted Hamming-distance range ``[lo, hi]`` for ``|d/n - p| <= eps_typ``."""
    if eps_typ is None:
        eps_typ = 3.0 * math.sqrt(p * (1 - p) / n)
    lo = max(0, math.ceil(n * (p - eps_typ) - 1e-9))
    hi = min(n, math.floor(n * (p + eps_typ) + 1e-9))
    return lo, hi


def receiver_decode_noiseless(y3, m_b_known, books: CodebookSet, plan: BlockPlan, cfg: ChannelConfig, *, probe=None, rng=None, cap=DEFAULT_CAP) -> Decoded:
    """Find the unique previous message whose regenerated relay output equals ``y3``.

    Failures: ``no_match``, ``ambiguous``.  No state sequence is used.
    """
    y3 = np.asarray(y3, dtype=np.int8)
    M = plan.M_count
    if M == 1:
        return Decoded(1, "ok")
    if probe is None:
        if M > cap:
            raise ValueError(f"M_count={M} exceeds the exhaustive cap {cap}; pass probe= for sampled decoding")
        X2, ok = reconstruct_all(m_b_known, range(1, M + 1), books, plan, cfg)
        hits = np.flatnonzero(ok & np.all(X2 == y3, axis=1))
        if hits.size == 0:
            return Decoded(None, "no_match")
        if hits.size > 1:
            return Decoded(None, "ambiguous")
        return Decoded(int(hits[0]) + 1, "ok")
    try:
        own_hit = np.array_equal(receiver_reconstruct(m_b_known, probe, books, plan, cfg), y3)
    except PaddingExhausted:
        own_hit = False
    log_q = sequence_log_prob(y3, books.policy, cfg, books.pi)
    extra = _impostor_count(log_q, M - 1, rng)
    if own_hit and extra == 0:
        return Decoded(probe, "ok")
    if own_hit or extra >= 2:
        return Decoded(None, "ambiguous")
    if extra == 0:
        return Decoded(None, "no_match")
    return Decoded(_other_index(probe, M, rng), "ok")


def receiver_decode_noisy(y3, m_b_known, books: CodebookSet, plan: BlockPlan, cfg: ChannelConfig, *, eps_typ=None, probe=None, rng=None, cap=DEFAULT_CAP) -> Decoded:
    """Typicality decoding through the BSC.

    Candidates whose Hamming distance to ``y3`` lies in the band around
    ``n*p`` are accepted; the closest one wins and a tie at the minimum is
    reported as ``ambiguous``.
    """
    p = cfg.crossover
    if not 0 < p < 0.5:
        raise ValueError("noisy decoding needs 0 < crossover < 0.5")
    y3 = np.asarray(y3, dtype=np.int8)
    n, M = plan.n, plan.M_count
    lo, hi = typicality_band(n, p, eps_typ)
    if probe is None:
        if M > cap:
            raise ValueError(f"M_count={M} exceeds the exhaustive cap {cap}; pass probe= for sampled decoding")
        X2, ok = reconstruct_all(m_b_known, range(1, M + 1), books, plan, cfg)
        dist = np.where(ok, np.count_nonzero(X2 != y3, axis=1), n + 1)
        accepted = np.flatnonzero((dist >= lo) & (dist <= hi))
        if accepted.size == 0:
            return Decoded(None, "no_match")
        best = dist[accepted].min()
        winners = accepted[dist[accepted] == best]
        if winners.size > 1:
            return Decoded(None, "ambiguous")
        return Decoded(int(winners[0]) + 1, "ok")

    try:
        own = int(np.count_nonzero(receiver_reconstruct(m_b_known, probe, books, plan, cfg) != y3))
    except PaddingExhausted:
        own = n + 1
    law = distance_log_law(y3, books.policy, cfg, books.pi, hi)
    others = M - 1
    if lo <= own <= hi:
        log_lt = _logsumexp(law[lo:own])
        if _impostor_count(log_lt, others, rng):
            # some other entry is strictly closer: wrong message (or a tie
            # among closer entries, which fails just the same)
            return Decoded(_other_index(probe, M, rng), "ok")
        # given no closer entry, each other entry sits at the probe's distance
        # with probability q_eq / (1 - q_lt)
        log_rest = math.log1p(-min(math.exp(log_lt), 1.0 - 1e-300)) if log_lt > -700 else 0.0
        if _impostor_count(float(law[own]) - log_rest, others, rng):
            return Decoded(None, "ambiguous")
        return Decoded(probe, "ok")
    if _impostor_count(_logsumexp(law[lo : hi + 1]), others, rng):
        return Decoded(_other_index(probe, M, rng), "ok")
    return Decoded(None, "no_match")


# --------------------------------------------------------------------------
# full chain

@dataclass(frozen=True)
class SimResult:
    """Error statistics of one run of ``B`` blocks.

    ``receiver_block_errors`` counts receiver failures over the
    ``receiver_blocks_clean`` blocks in which the receiver's side information
    was correct (known block message and relay-correct cloud centre); other
    failures are attributed to the relay.  ``collision_events`` likewise
    counts only the ``relay_blocks_clean`` blocks in which the relay knew the
    previous message, since later blocks fail by propagation.
    """

    relay_block_errors: int
    receiver_block_errors: int
    incomplete_codeword_events: int
    collision_events: int
    blocks_run: int
    per_state_visit_counts: tuple
    receiver_blocks_clean: int = 0
    relay_blocks: int = 0
    end_to_end_errors: int = 0
    ambiguity_events: int = 0
    energy_violations: int = 0
    preamble_slots: int = 0
    aborted: bool = False
    relay_blocks_clean: int = 0


@dataclass
class ChainTrace:
    """Per-block traces collected by :func:`run_chain` when requested."""

    blocks: list = field(default_factory=list)

    def append(self, trace: BlockTrace, y3: np.ndarray):
        self.blocks.append((trace, y3))

    def x2_stream(self) -> np.ndarray:
        return np.concatenate([t.x2 for t, _ in self.blocks]) if self.blocks else np.zeros(0, np.int8)

    def write_csv(self, fh):
        """Write one row per payload slot in :data:`TRACE_COLUMNS` order."""
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(TRACE_COLUMNS)
        slot = 0
        for trace, y3 in self.blocks:
            for u, a, b, c in zip(trace.states.tolist(), trace.x1.tolist(), trace.x2.tolist(), y3.tolist()):
                writer.writerow((slot, u, a, b, c))
                slot += 1


def apply_bsc(x, p: float, seed: int, offset: int = 0) -> np.ndarray:
    """Flip each symbol independently with probability ``p``.

    Flip decision ``i`` uses draw ``offset + i`` of the counter-based stream
    keyed by ``seed``.
    """
    if not 0.0 <= p <= 0.5:
        raise ValueError(f"crossover must lie in [0, 0.5], got {p}")
    x = np.asarray(x, dtype=np.int8)
    if p == 0.0:
        return x.copy()
    flips = streams.uniforms_at(seed, offset, x.size) < p
    return (x ^ flips).astype(np.int8)


def _decoder_mode(plan: BlockPlan, decoder: str, cap: int) -> str:
    if decoder == "auto":
        return "exhaustive" if max(plan.K_u) <= cap and plan.M_count <= cap else "sampled"
    if decoder not in ("exhaustive", "sampled"):
        raise ValueError(f"unknown decoder mode {decoder!r}")
    return decoder


def run_chain(
    plan: BlockPlan,
    policy: PolicyPmf,
    cfg: ChannelConfig,
    seed: int,
    messages,
    *,
    pi,
    decoder: str = "auto",
    reset: str = "genie",
    eps_typ: float | None = None,
    cap: int = DEFAULT_CAP,
    trace: ChainTrace | None = None,
) -> SimResult:
    """Send ``B - 1`` messages over ``B`` blocks and decode them.

    The relay forwards in block ``b`` what it decoded in block ``b - 1``
    (message 1 in the first block); the transmitter sends message 1 in the
    last block.  The receiver decodes backwards from block ``B``.

    ``reset="genie"`` sets the battery to the block's initial state directly;
    ``reset="preamble"`` steers it there with extra slots that are not part
    of the block and are counted in ``preamble_slots``.
    """
    messages = list(messages)
    B = plan.B
    if len(messages) != B - 1:
        raise ValueError(f"need {B - 1} messages, got {len(messages)}")
    if reset not in ("genie", "preamble"):
        raise ValueError(f"unknown reset mode {reset!r}")
    mode = _decoder_mode(plan, decoder, cap)
    noisy = cfg.crossover > 0
    m = cfg.energy_cost

    tx_msgs = [1] + messages + [1]  # tx_msgs[b] for b = 0..B
    relay_msgs = [1]                # relay_msgs[b] = relay's decode of block b
    books, received = {}, {}
    visits = np.zeros(cfg.n_states, dtype=np.int64)
    eps1 = eps2 = relay_err = relay_clean = violations = preamble_slots = 0
    battery = 0
    aborted_at = None

    for b in range(1, B + 1):
        book = CodebookSet(plan, policy, pi, streams.child_seed(seed, streams.CODEBOOK, b))
        books[b] = book
        target = book.initial_state(relay_msgs[b - 1])
        if reset == "preamble":
            pre = preamble(battery, target, cfg)
            preamble_slots += len(pre)
            u = battery
            for x1, x2 in pre:
                if x2 == 1 and u < m:
                    violations += 1
                u = min(u + x1 - m * x2, cfg.battery_capacity)
        try:
            blk = run_block(tx_msgs[b], tx_msgs[b - 1], relay_msgs[b - 1], book, plan, cfg, target)
        except PaddingExhausted:
            eps1 += 1
            relay_err += 1
            aborted_at = b
            break
        battery = blk.end_state
        visits += np.bincount(blk.states, minlength=cfg.n_states)
        violations += int(np.count_nonzero((blk.x2 == 1) & (blk.states < m)))
        y3 = apply_bsc(blk.x2, cfg.crossover, streams.child_seed(seed, streams.NOISE, b))
        received[b] = y3
        if trace is not None:
            trace.append(blk, y3)
        if b == B:
            break
        rng = streams.stream(seed, streams.ENSEMBLE, b, 0)
        probe = tx_msgs[b] if mode == "sampled" else None
        # noiseless first hop: the relay hears x1 exactly
        res = relay_decode(blk.x1, blk.states, relay_msgs[b - 1], book, plan, probe=probe, rng=rng, cap=cap)
        prev_ok = relay_msgs[b - 1] == tx_msgs[b - 1]
        relay_clean += prev_ok
        if res.reason == "incomplete":
            eps1 += 1
        elif res.reason == "collision" and prev_ok:
            eps2 += 1
        decoded = res.message if res.ok else 1
        if decoded != tx_msgs[b]:
            relay_err += 1
        relay_msgs.append(decoded)

    rx_err = rx_clean = ambiguous = e2e = 0
    if aborted_at is not None:
        e2e = B - 1
    else:
        known = 1
        for b in range(B, 1, -1):
            clean = known == tx_msgs[b] and relay_msgs[b - 1] == tx_msgs[b - 1]
            est = None
            if known is not None:
                rng = streams.stream(seed, streams.ENSEMBLE, b, 1)
                probe = relay_msgs[b - 1] if mode == "sampled" else None
                if noisy:
                    res = receiver_decode_noisy(received[b], known, books[b], plan, cfg, eps_typ=eps_typ, probe=probe, rng=rng, cap=cap)
                else:
                    res = receiver_decode_noiseless(received[b], known, books[b], plan, cfg, probe=probe, rng=rng, cap=cap)
                est = res.message if res.ok else None
                ambiguous += res.reason == "ambiguous"
            if clean:
                rx_clean += 1
                rx_err += est != relay_msgs[b - 1]
            e2e += est != tx_msgs[b - 1]
            known = est

    return SimResult(
        relay_block_errors=relay_err,
        receiver_block_errors=int(rx_err),
        incomplete_codeword_events=eps1,
        collision_events=eps2,
        blocks_run=B if aborted_at is None else aborted_at,
        per_state_visit_counts=tuple(int(v) for v in visits),
        receiver_blocks_clean=rx_clean,
        relay_blocks=B - 1,
        end_to_end_errors=int(e2e),
        ambiguity_events=int(ambiguous),
        energy_violations=violations,
        preamble_slots=preamble_slots,
        aborted=aborted_at is not None,
        relay_blocks_clean=int(relay_clean),
    )
