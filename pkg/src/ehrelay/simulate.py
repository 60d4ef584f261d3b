"""Monte Carlo harness and brute-force checks.

Trials are independent: trial ``t`` draws everything from streams keyed by
``child_seed(base_seed, TRIAL, t)``, so results are identical for any
thread count.  Per-trial statistics are plain counts merged by addition.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.stats import binomtest

from . import streams
from .channel import ATOMS, ChannelConfig, PolicyPmf, next_state, transition_table
from .codec import BlockPlan, ChainTrace, apply_bsc, make_plan, random_message, run_chain
from .errors import BudgetExceeded, NoSteadyState
from .markov import (
    EDGE_TOL,
    binary_entropy,
    bsc_mutual_information,
    build_transition_matrix,
    steady_state,
    steady_state_condition,
)

__all__ = [
    "TrialSpec",
    "EmpiricalStats",
    "apply_bsc",
    "simulate_chain",
    "empirical_state_frequencies",
    "ngram_counts",
    "entropy_rate_from_counts",
    "empirical_entropy_rate",
    "wilson_interval",
    "run_trial",
    "run_trials",
    "grid_oracle_values",
    "brute_force_grid_oracle",
]

ENTROPY_ORDER = 2
ORACLE_BUDGET = 10**7
_CHUNK = 250_000
_KIRCHHOFF_TOL = 1e-12


# --------------------------------------------------------------------------
# plain chain simulation

def simulate_chain(policy: PolicyPmf, cfg: ChannelConfig, steps: int, seed: int, start: int = 0):
    """Run the battery chain with i.i.d. symbols drawn from the state pmfs.

    Returns ``(states, x1, x2)`` arrays of length ``steps``; ``states[t]`` is
    the level before slot ``t``.
    """
    table = transition_table(cfg)
    probs = np.array([s.probs for s in policy.per_state])
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    draws = streams.stream(seed, streams.CHAIN).random(steps)
    # choose the atom for every (state, slot) up front; the loop only walks
    picks = [np.searchsorted(cum[u], draws, side="right").tolist() for u in range(cfg.n_states)]
    nxt = [[int(table[u, x1, x2]) for x1, x2 in ATOMS] for u in range(cfg.n_states)]
    states = [0] * steps
    atoms = [0] * steps
    u = start
    for t in range(steps):
        a = picks[u][t]
        states[t] = u
        atoms[t] = a
        u = nxt[u][a]
    atoms = np.array(atoms)
    x = np.array(ATOMS)[atoms]
    return np.array(states), x[:, 0].astype(np.int8), x[:, 1].astype(np.int8)


def empirical_state_frequencies(policy: PolicyPmf, cfg: ChannelConfig, steps: int, seed: int) -> np.ndarray:
    """Fraction of ``steps`` slots spent in each battery level."""
    if not steady_state_condition(build_transition_matrix(policy, cfg)):
        raise NoSteadyState("policy's battery chain has no unique steady state")
    states, _, _ = simulate_chain(policy, cfg, steps, seed)
    return np.bincount(states, minlength=cfg.n_states) / steps


# --------------------------------------------------------------------------
# entropy rate

def ngram_counts(x, order: int = ENTROPY_ORDER) -> np.ndarray:
    """Counts of every binary ``(order+1)``-gram in ``x``, indexed by its integer code."""
    x = np.asarray(x, dtype=np.int64)
    k = order + 1
    if x.size < k:
        return np.zeros(2**k, dtype=np.int64)
    codes = np.zeros(x.size - order, dtype=np.int64)
    for j in range(k):
        codes = (codes << 1) | x[j : x.size - order + j]
    return np.bincount(codes, minlength=2**k)


def entropy_rate_from_counts(counts, order: int = ENTROPY_ORDER) -> float:
    """Plug-in ``H(X_k | X_{k-order} .. X_{k-1})`` from merged n-gram counts."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return float("nan")
    joint = counts / total
    # the context is the leading ``order`` symbols, i.e. the code without its last bit
    context = joint.reshape(-1, 2).sum(axis=1)

    def h(p):
        p = p[p > 0]
        return float(-(p * np.log2(p)).sum())

    return max(h(joint) - h(context), 0.0)


def empirical_entropy_rate(x, order: int = ENTROPY_ORDER) -> float:
    x = np.asarray(x)
    if order < 0:
        raise ValueError("order must be >= 0")
    if x.size < 100 * 2**order:
        raise ValueError(f"need at least {100 * 2**order} symbols for order {order}, got {x.size}")
    return entropy_rate_from_counts(ngram_counts(x, order), order)


# --------------------------------------------------------------------------
# trials

def wilson_interval(k: int, n: int, confidence: float = 0.95) -> tuple:
    """Wilson score interval for a binomial proportion; ``(0, 1)`` when ``n == 0``."""
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(k), int(n)).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


@dataclass(frozen=True)
class TrialSpec:
    cfg: ChannelConfig
    policy: PolicyPmf
    n: int
    B: int
    epsilon: float
    rate_fraction: float
    trials: int = 1
    base_seed: int = 0
    relay_rate_fraction: float | None = None
    decoder: str = "auto"
    reset: str = "genie"
    eps_typ: float | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @property
    def steady_state(self) -> np.ndarray:
        return steady_state(build_transition_matrix(self.policy, self.cfg))

    def plan(self) -> BlockPlan:
        return make_plan(
            self.policy,
            self.steady_state,
            self.n,
            self.B,
            self.epsilon,
            self.rate_fraction,
            relay_rate_fraction=self.relay_rate_fraction,
            crossover=self.cfg.crossover,
        )


def _rate(k, n):
    return k / n if n else 0.0


@dataclass(frozen=True)
class EmpiricalStats:
    """Merged counts over a batch of trials.

    Adding two instances merges their counts, so batches can be reduced in
    any grouping.
    """

    trials: int = 0
    relay_blocks: int = 0
    relay_errors: int = 0
    relay_clean_blocks: int = 0
    receiver_clean_blocks: int = 0
    receiver_errors: int = 0
    end_to_end_errors: int = 0
    incomplete_events: int = 0
    collision_events: int = 0
    ambiguity_events: int = 0
    energy_violations: int = 0
    aborted_trials: int = 0
    visit_counts: tuple = ()
    x2_ngrams: tuple = ()

    def __add__(self, other: "EmpiricalStats") -> "EmpiricalStats":
        def vec_add(a, b):
            if not a:
                return b
            if not b:
                return a
            return tuple(int(x + y) for x, y in zip(a, b))

        values = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            values[f.name] = vec_add(a, b) if isinstance(a, tuple) else a + b
        return EmpiricalStats(**values)

    @property
    def state_frequencies(self) -> np.ndarray:
        v = np.array(self.visit_counts, dtype=float)
        return v / v.sum() if v.size and v.sum() > 0 else v

    @property
    def entropy_rate_estimate(self) -> float:
        return entropy_rate_from_counts(self.x2_ngrams) if self.x2_ngrams else float("nan")

    def error_rates(self) -> dict:
        """Each rate with its 95% Wilson interval and half-width."""
        pairs = {
            "relay": (self.relay_errors, self.relay_blocks),
            "receiver": (self.receiver_errors, self.receiver_clean_blocks),
            "end_to_end": (self.end_to_end_errors, self.relay_blocks),
            "incomplete": (self.incomplete_events, self.relay_blocks),
            "collision": (self.collision_events, self.relay_clean_blocks),
            "ambiguity": (self.ambiguity_events, self.relay_blocks),
        }
        out = {}
        for name, (k, n) in pairs.items():
            lo, hi = wilson_interval(k, n)
            out[name] = {"count": k, "blocks": n, "rate": _rate(k, n), "ci_low": lo, "ci_high": hi, "half_width": (hi - lo) / 2}
        return out

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "blocks": self.relay_blocks,
            "state_frequencies": self.state_frequencies.tolist(),
            "entropy_rate_estimate": self.entropy_rate_estimate,
            "energy_violations": self.energy_violations,
            "aborted_trials": self.aborted_trials,
            "error_rates": self.error_rates(),
        }


def trial_seed(base_seed: int, t: int) -> int:
    return streams.child_seed(base_seed, streams.TRIAL, t)


def run_trial(spec: TrialSpec, t: int, plan: BlockPlan | None = None, pi=None, trace: ChainTrace | None = None) -> EmpiricalStats:
    plan = spec.plan() if plan is None else plan
    pi = spec.steady_state if pi is None else pi
    seed = trial_seed(spec.base_seed, t)
    rng = streams.stream(seed, streams.MESSAGES)
    messages = [random_message(plan.M_count, rng) for _ in range(plan.B - 1)]
    keep = ChainTrace() if trace is None else trace
    res = run_chain(
        plan, spec.policy, spec.cfg, seed, messages,
        pi=pi, decoder=spec.decoder, reset=spec.reset, eps_typ=spec.eps_typ, trace=keep,
    )
    grams = np.zeros(2 ** (ENTROPY_ORDER + 1), dtype=np.int64)
    for blk, _ in keep.blocks:
        grams += ngram_counts(blk.x2)
    return EmpiricalStats(
        trials=1,
        relay_blocks=res.relay_blocks,
        relay_errors=res.relay_block_errors,
        relay_clean_blocks=res.relay_blocks_clean,
        receiver_clean_blocks=res.receiver_blocks_clean,
        receiver_errors=res.receiver_block_errors,
        end_to_end_errors=res.end_to_end_errors,
        incomplete_events=res.incomplete_codeword_events,
        collision_events=res.collision_events,
        ambiguity_events=res.ambiguity_events,
        energy_violations=res.energy_violations,
        aborted_trials=int(res.aborted),
        visit_counts=res.per_state_visit_counts,
        x2_ngrams=tuple(int(v) for v in grams),
    )


def run_trials(spec: TrialSpec, threads: int = 1) -> EmpiricalStats:
    """Run ``spec.trials`` independent chains and merge their statistics."""
    plan, pi = spec.plan(), spec.steady_state
    work = lambda t: run_trial(spec, t, plan, pi)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(spec.trials)))
    else:
        parts = [work(t) for t in range(spec.trials)]
    total = EmpiricalStats()
    for p in parts:
        total = total + p
    return total


# --------------------------------------------------------------------------
# brute-force grid oracle
#
# Independent of the optimizer: per-state quantities come from the scalar
# channel primitives, and stationary laws from the Markov chain tree
# theorem (pi_i proportional to the principal minor of I - P without i)
# rather than a linear solve.  A state is reachable from every state iff
# its minor is positive, which gives the steady-state test as well.

@dataclass(frozen=True)
class _StateTable:
    params: np.ndarray      # (k, width) grid coordinates
    rows: np.ndarray        # (k, S) transition probabilities out of this state
    relay: np.ndarray       # (k,) H(X1 | X2)
    receiver: np.ndarray    # (k,) receiver-side term
    pmfs: list = field(repr=False)


def _simplex_points(resolution: int, width: int) -> np.ndarray:
    """Integer grid coordinates (in units of ``1 / (resolution - 1)``)."""
    step = resolution - 1
    if width == 1:
        return np.arange(resolution)[:, None]
    return np.array([c for c in itertools.product(range(resolution), repeat=width) if sum(c) <= step])


def _state_table(u: int, cfg: ChannelConfig, resolution: int) -> _StateTable:
    width = 1 if u < cfg.energy_cost else 3
    pts = _simplex_points(resolution, width)
    step = resolution - 1
    S = cfg.n_states
    rows = np.zeros((len(pts), S))
    relay = np.zeros(len(pts))
    recv = np.zeros(len(pts))
    pmfs = []
    for k, c in enumerate(pts):
        # the remainder is exact in integer units, so zero atoms stay zero
        if width == 1:
            pmf = ((step - c[0]) / step, 0.0, c[0] / step, 0.0)
        else:
            pmf = (c[0] / step, c[1] / step, c[2] / step, (step - c.sum()) / step)
        pmfs.append(pmf)
        for (x1, x2), prob in zip(ATOMS, pmf):
            if prob > 0:
                rows[k, next_state(u, x1, x2, cfg)] += prob
        p_x2 = pmf[1] + pmf[3]
        # H(X1 | X2) = sum over x2 of P(x2) h(P(x1 = 1 | x2))
        h = 0.0
        for px2, p1 in ((1 - p_x2, pmf[2]), (p_x2, pmf[3])):
            if px2 > 0:
                h += px2 * binary_entropy(min(p1 / px2, 1.0))
        relay[k] = h
        recv[k] = bsc_mutual_information(p_x2, cfg.crossover) if cfg.crossover > 0 else binary_entropy(p_x2)
    return _StateTable(pts / step, rows, relay, recv, pmfs)


def _minor_dets(M):
    """Determinants of every principal ``(S-1)``-minor of ``M`` (shape ``(..., S, S)``)."""
    S = M.shape[-1]
    out = []
    for i in range(S):
        keep = [j for j in range(S) if j != i]
        sub = M[..., keep, :][..., :, keep]
        if S == 2:
            out.append(sub[..., 0, 0])
        elif S == 3:
            out.append(sub[..., 0, 0] * sub[..., 1, 1] - sub[..., 0, 1] * sub[..., 1, 0])
        else:
            out.append(np.linalg.det(sub))
    return np.stack(out, axis=-1)


def _evaluate_block(tables, fixed, lo, hi, cfg):
    """Rates for every grid point with the leading states fixed to ``fixed``,
    state ``S-2`` in ``[lo, hi)`` and state ``S-1`` free."""
    S = cfg.n_states
    a, b = tables[-2], tables[-1]
    na, nb = hi - lo, len(b.rows)
    P = np.empty((na, nb, S, S))
    relay_terms = np.empty((na, nb, S))
    recv_terms = np.empty((na, nb, S))
    for u, k in enumerate(fixed):
        P[:, :, u, :] = tables[u].rows[k]
        relay_terms[:, :, u] = tables[u].relay[k]
        recv_terms[:, :, u] = tables[u].receiver[k]
    P[:, :, S - 2, :] = a.rows[lo:hi, None, :]
    relay_terms[:, :, S - 2] = a.relay[lo:hi, None]
    recv_terms[:, :, S - 2] = a.receiver[lo:hi, None]
    P[:, :, S - 1, :] = b.rows[None, :, :]
    relay_terms[:, :, S - 1] = b.relay[None, :]
    recv_terms[:, :, S - 1] = b.receiver[None, :]

    w = _minor_dets(np.eye(S) - P)
    reach_all = w > _KIRCHHOFF_TOL
    loops = np.diagonal(P, axis1=-2, axis2=-1) > EDGE_TOL
    valid = np.any(reach_all & loops, axis=-1)
    total = w.sum(axis=-1)
    pi = np.where(valid[..., None], w / np.where(valid, total, 1.0)[..., None], 0.0)
    relay = (pi * relay_terms).sum(axis=-1)
    recv = (pi * recv_terms).sum(axis=-1)
    rate = np.where(valid, np.minimum(relay, recv), 0.0)
    return rate.reshape(-1), relay.reshape(-1), recv.reshape(-1), valid.reshape(-1)


def _oracle_setup(cfg: ChannelConfig, resolution: int, budget: int):
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    dim = sum(1 if u < cfg.energy_cost else 3 for u in range(cfg.n_states))
    if resolution**dim > budget:
        raise BudgetExceeded(f"resolution {resolution} in dimension {dim} gives {resolution**dim} points, over the budget of {budget}")
    return [_state_table(u, cfg, resolution) for u in range(cfg.n_states)]


def _blocks(tables, chunk):
    """Yield ``(fixed, lo, hi)`` in lexicographic grid order."""
    na, nb = len(tables[-2].rows), len(tables[-1].rows)
    step = max(1, chunk // nb)
    for fixed in itertools.product(*(range(len(t.rows)) for t in tables[:-2])):
        for lo in range(0, na, step):
            yield fixed, lo, min(lo + step, na)


def _pad_two_states(cfg):
    if cfg.n_states < 2:
        raise ValueError("the oracle needs at least two battery levels")


def grid_oracle_values(cfg: ChannelConfig, resolution: int, budget: int = ORACLE_BUDGET):
    """Every grid point's ``(params, achievable, relay, receiver, valid)``, in lexicographic order.

    Only for grids small enough to hold in memory; see :func:`brute_force_grid_oracle`.
    """
    _pad_two_states(cfg)
    tables = _oracle_setup(cfg, resolution, budget)
    out = [[], [], [], [], []]
    for fixed, lo, hi in _blocks(tables, _CHUNK):
        rate, relay, recv, valid = _evaluate_block(tables, fixed, lo, hi, cfg)
        nb = len(tables[-1].rows)
        lead = [np.repeat(tables[u].params[k][None, :], (hi - lo) * nb, axis=0) for u, k in enumerate(fixed)]
        a = np.repeat(tables[-2].params[lo:hi], nb, axis=0)
        b = np.tile(tables[-1].params, (hi - lo, 1))
        out[0].append(np.concatenate(lead + [a, b], axis=1))
        for j, arr in enumerate((rate, relay, recv, valid), start=1):
            out[j].append(arr)
    return tuple(np.concatenate(o) for o in out)


def brute_force_grid_oracle(cfg: ChannelConfig, resolution: int, budget: int = ORACLE_BUDGET):
    """Best achievable rate over the full grid and the policy attaining it.

    Ties go to the lexicographically first grid point.  Memory use is
    bounded by streaming the grid in chunks.
    """
    _pad_two_states(cfg)
    tables = _oracle_setup(cfg, resolution, budget)
    best_rate, best = -1.0, None
    for fixed, lo, hi in _blocks(tables, _CHUNK):
        rate = _evaluate_block(tables, fixed, lo, hi, cfg)[0]
        k = int(np.argmax(rate))
        if rate[k] > best_rate:
            nb = len(tables[-1].rows)
            best_rate, best = float(rate[k]), fixed + (lo + k // nb, k % nb)
    policy = PolicyPmf(tuple(tables[u].pmfs[k] for u, k in enumerate(best)))
    return best_rate, policy
