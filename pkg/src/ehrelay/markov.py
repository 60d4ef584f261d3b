"""Battery-level Markov chain, its steady state, and the achievable-rate functionals.

Two evaluation routes are provided.  The scalar route (``build_transition_matrix``,
``steady_state_condition``, ``steady_state``, ``rate_report``) works on one policy
and uses a strongly-connected-component test.  :func:`batch_rates` evaluates
many policies at once with a transitive-closure test and a batched linear
solve; it backs the grid searches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import xlogy

from .channel import ATOMS, ChannelConfig, PolicyPmf, transition_table, validate_policy
from .errors import InvalidPolicy, NoSteadyState

ROW_TOL = 1e-12
STEADY_TOL = 1e-10
# transitions at or below this are treated as absent when testing the graph;
# smaller ones are rounding residue and make the balance equations singular
EDGE_TOL = 1e-12
_LN2 = np.log(2.0)


def binary_entropy(p):
    """h(p) in bits with h(0) = h(1) = 0.  Accepts scalars or arrays."""
    p = np.asarray(p, dtype=float)
    q = np.clip(p, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -q * np.log2(q) - (1 - q) * np.log2(1 - q)
    out = np.where((q <= 0.0) | (q >= 1.0), 0.0, out)
    return out if out.ndim else float(out)


def _entropy_bits(probs, axis=-1):
    probs = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    return -xlogy(probs, probs).sum(axis=axis) / _LN2


def bsc_mutual_information(a, p):
    """I(X;Y) for X ~ Bern(a) through a BSC with crossover p."""
    a = np.asarray(a, dtype=float)
    out = binary_entropy(a * (1 - p) + (1 - a) * p) - binary_entropy(p)
    return np.maximum(out, 0.0)


def _require_valid(pmf: PolicyPmf, cfg: ChannelConfig):
    problems = validate_policy(pmf, cfg)
    if problems:
        raise InvalidPolicy("; ".join(problems))


def build_transition_matrix(pmf: PolicyPmf, cfg: ChannelConfig) -> np.ndarray:
    """``P[u, v]`` = probability of moving from battery level u to v in one slot."""
    _require_valid(pmf, cfg)
    table = transition_table(cfg)
    S = cfg.n_states
    P = np.zeros((S, S))
    for u in range(S):
        for (x1, x2), prob in zip(ATOMS, pmf[u].probs):
            if prob > 0:
                P[u, table[u, x1, x2]] += prob
    return P


def _check_stochastic(P):
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("transition matrix must be square")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > ROW_TOL:
        raise ValueError("transition matrix is not row-stochastic")
    return P


def steady_state_condition(P) -> bool:
    """True iff the positive-edge graph has exactly one closed class, reachable
    from every state, and some state of that class has a self-loop.

    Edges of probability at most ``EDGE_TOL`` do not count.
    """
    P = _check_stochastic(P)
    adj = P > EDGE_TOL
    n_comp, labels = connected_components(csr_matrix(adj), directed=True, connection="strong")
    leaves = np.zeros(n_comp, dtype=bool)
    for c in range(n_comp):
        members = labels == c
        leaves[c] = not np.any(adj[np.ix_(members, ~members)])
    closed = np.flatnonzero(leaves)
    if closed.size != 1:
        return False
    in_closed = labels == closed[0]
    # every state reaches some closed class in a finite chain, so uniqueness
    # of the closed class already gives reachability; check the self-loop
    return bool(np.any(np.diag(P)[in_closed] > EDGE_TOL))


def steady_state(P) -> np.ndarray:
    """Stationary law via a direct solve of ``pi (P - I) = 0`` with one balance
    equation replaced by ``sum(pi) = 1``.
    """
    P = _check_stochastic(P)
    if not steady_state_condition(P):
        raise NoSteadyState("chain is decomposable or its closed class has no self-loop")
    S = P.shape[0]
    A = P.T - np.eye(S)
    A[-1, :] = 1.0
    b = np.zeros(S)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    pi = np.where(np.abs(pi) < 1e-15, 0.0, pi)
    resid = np.max(np.abs(pi @ P - pi))
    if resid > STEADY_TOL or np.any(pi < -STEADY_TOL):
        raise NoSteadyState(f"steady-state solve residual {resid:.3g}")
    return np.clip(pi, 0.0, None)


def steady_state_power(P, tol=1e-14, max_iter=1_000_000) -> np.ndarray:
    """Power-iteration cross-check for :func:`steady_state`."""
    P = _check_stochastic(P)
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = pi @ P
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    return pi


def relay_bound(pmf: PolicyPmf, pi) -> float:
    """Sum over states of ``pi_u * H(X1 | X2)`` under the state pmf."""
    joint = pmf.joint.reshape(len(pmf), 4)
    x2_marg = joint[:, [0, 1]] + joint[:, [2, 3]]
    cond = _entropy_bits(joint) - _entropy_bits(x2_marg)
    return float(np.dot(pi, np.maximum(cond, 0.0)))


def receiver_bound_noiseless(pmf: PolicyPmf, pi) -> float:
    a = np.array([s.p_x2_one for s in pmf.per_state])
    return float(np.dot(pi, binary_entropy(a)))


def receiver_bound_noisy(pmf: PolicyPmf, pi, p: float) -> float:
    if not 0.0 <= p <= 0.5:
        raise ValueError(f"crossover must lie in [0, 0.5], got {p}")
    a = np.array([s.p_x2_one for s in pmf.per_state])
    return float(np.dot(pi, bsc_mutual_information(a, p)))


@dataclass(frozen=True)
class RateReport:
    relay_bound: float
    receiver_bound: float
    achievable: float
    steady_state_valid: bool
    steady_state: tuple = ()

    def as_dict(self) -> dict:
        return {
            "relay_bound": self.relay_bound,
            "receiver_bound": self.receiver_bound,
            "achievable": self.achievable,
            "steady_state_valid": self.steady_state_valid,
            "steady_state": list(self.steady_state),
        }


def rate_report(pmf: PolicyPmf, cfg: ChannelConfig) -> RateReport:
    P = build_transition_matrix(pmf, cfg)
    if not steady_state_condition(P):
        return RateReport(0.0, 0.0, 0.0, False)
    try:
        pi = steady_state(P)
    except NoSteadyState:
        return RateReport(0.0, 0.0, 0.0, False)
    relay = relay_bound(pmf, pi)
    if cfg.crossover > 0:
        recv = receiver_bound_noisy(pmf, pi, cfg.crossover)
    else:
        recv = receiver_bound_noiseless(pmf, pi)
    return RateReport(relay, recv, min(relay, recv), True, tuple(float(v) for v in pi))


@dataclass(frozen=True)
class PairChain:
    """Lifted chain on consecutive battery pairs ``(u_i, u_{i+1})``.

    ``outputs[k]`` lists the relay symbols that can produce pair ``pairs[k]``.
    """

    pairs: tuple
    matrix: np.ndarray
    outputs: tuple

    @property
    def output_is_function_of_pair(self) -> bool:
        return all(len(o) == 1 for o in self.outputs)


def pair_chain(pmf: PolicyPmf, cfg: ChannelConfig) -> PairChain:
    P = build_transition_matrix(pmf, cfg)
    table = transition_table(cfg)
    pairs = [(u, v) for u in range(cfg.n_states) for v in range(cfg.n_states) if P[u, v] > 0]
    index = {pair: k for k, pair in enumerate(pairs)}
    Q = np.zeros((len(pairs), len(pairs)))
    for (u, v), k in index.items():
        for w in range(cfg.n_states):
            if P[v, w] > 0:
                Q[k, index[(v, w)]] = P[v, w]
    outputs = []
    for u, v in pairs:
        outs = {x2 for (x1, x2), prob in zip(ATOMS, pmf[u].probs) if prob > 0 and table[u, x1, x2] == v}
        outputs.append(frozenset(outs))
    return PairChain(tuple(pairs), Q, tuple(outputs))


def batch_rates(joint, cfg: ChannelConfig):
    """Evaluate many policies at once.

    ``joint`` has shape ``(N, U+1, 2, 2)`` indexed ``[k, u, x1, x2]`` and must
    already satisfy the support rule.  Returns ``(relay, receiver, valid)``
    arrays; invalid chains get zero bounds.
    """
    joint = np.asarray(joint, dtype=float)
    N, S = joint.shape[0], cfg.n_states
    table = transition_table(cfg)
    P = np.zeros((N, S, S))
    for u in range(S):
        for x1, x2 in ATOMS:
            v = table[u, x1, x2]
            if v >= 0:
                P[:, u, v] += joint[:, u, x1, x2]

    reach = (P > EDGE_TOL) | np.eye(S, dtype=bool)
    steps = 1
    while steps < S:
        nxt = np.zeros_like(reach)
        for j in range(S):
            nxt |= reach[:, :, j, None] & reach[:, None, j, :]
        reach = nxt
        steps *= 2
    # states reachable from every state form the unique closed class, if any
    sink = reach.all(axis=1)
    loops = np.diagonal(P, axis1=1, axis2=2) > EDGE_TOL
    valid = (sink & loops).any(axis=1)

    A = np.swapaxes(P, 1, 2) - np.eye(S)
    A[:, -1, :] = 1.0
    A[~valid] = np.eye(S)
    b = np.zeros((N, S, 1))
    b[:, -1, 0] = 1.0
    try:
        pi = np.linalg.solve(A, b)[..., 0]
    except np.linalg.LinAlgError:
        # numerically singular despite a valid graph (transition mass near
        # 1e-16); solve one by one and score the singular ones as invalid
        pi = np.zeros((N, S))
        for k in np.flatnonzero(valid):
            try:
                pi[k] = np.linalg.solve(A[k], b[k])[:, 0]
            except np.linalg.LinAlgError:
                valid[k] = False
    pi = np.where(valid[:, None], np.clip(pi, 0.0, None), 0.0)

    flat = joint.reshape(N, S, 4)
    x2_marg = flat[..., [0, 1]] + flat[..., [2, 3]]
    cond = np.maximum(_entropy_bits(flat) - _entropy_bits(x2_marg), 0.0)
    relay = (pi * cond).sum(axis=1)
    a = x2_marg[..., 1]
    if cfg.crossover > 0:
        per_state = bsc_mutual_information(a, cfg.crossover)
    else:
        per_state = binary_entropy(a)
    receiver = (pi * per_state).sum(axis=1)
    return relay, receiver, valid
