"""Search for the per-state pmf that maximizes the achievable rate.

Parameterization: a battery level below the energy cost has one free
parameter, ``P(x1=1)`` (``x2`` is forced to 0).  Every other level has three
free coordinates, the probabilities of ``(0,0), (0,1), (1,0)``; ``(1,1)``
takes the remainder.

The search is a coarse grid followed by derivative-free pattern search
with shrinking steps from several starting points.  Points whose battery
chain lacks a steady state score zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, PolicyPmf
from .errors import BudgetExceeded
from .markov import RateReport, batch_rates, rate_report
from .streams import stream

DEFAULT_BUDGET = 10**7
_FEAS_TOL = 1e-12


@dataclass(frozen=True)
class ParameterSpace:
    cfg: ChannelConfig

    @property
    def widths(self) -> tuple:
        m = self.cfg.energy_cost
        return tuple(1 if u < m else 3 for u in range(self.cfg.n_states))

    @property
    def dimension(self) -> int:
        return sum(self.widths)

    @property
    def offsets(self) -> tuple:
        return tuple(np.cumsum((0,) + self.widths[:-1]).tolist())

    def to_joint(self, params):
        """Map ``(N, dim)`` parameters to ``(N, U+1, 2, 2)`` pmfs plus a feasibility mask."""
        params = np.atleast_2d(np.asarray(params, dtype=float))
        N = params.shape[0]
        joint = np.zeros((N, self.cfg.n_states, 2, 2))
        ok = np.all((params >= -_FEAS_TOL) & (params <= 1 + _FEAS_TOL), axis=1)
        for u, (off, w) in enumerate(zip(self.offsets, self.widths)):
            if w == 1:
                t = params[:, off]
                joint[:, u, 0, 0] = 1 - t
                joint[:, u, 1, 0] = t
            else:
                p00, p01, p10 = params[:, off], params[:, off + 1], params[:, off + 2]
                rest = 1 - p00 - p01 - p10
                ok &= rest >= -_FEAS_TOL
                # rounding residue would otherwise create spurious transitions
                rest = np.where(np.abs(rest) <= _FEAS_TOL, 0.0, rest)
                joint[:, u, 0, 0] = p00
                joint[:, u, 0, 1] = p01
                joint[:, u, 1, 0] = p10
                joint[:, u, 1, 1] = rest
        joint = np.clip(joint, 0.0, 1.0)
        joint /= joint.sum(axis=(2, 3), keepdims=True)
        return joint, ok

    def policy(self, params) -> PolicyPmf:
        joint, ok = self.to_joint(params)
        if not ok[0]:
            raise ValueError("parameter vector lies outside the simplex")
        return PolicyPmf.from_array(joint[0])

    def from_policy(self, pmf: PolicyPmf) -> np.ndarray:
        out = []
        for u, w in enumerate(self.widths):
            s = pmf[u]
            out.extend([s.p_x1_one] if w == 1 else [s[(0, 0)], s[(0, 1)], s[(1, 0)]])
        return np.array(out)


def parameterize(cfg: ChannelConfig) -> ParameterSpace:
    return ParameterSpace(cfg)


@dataclass(frozen=True)
class OptimizerOptions:
    grid_resolution: int = 6
    refine_iters: int = 300
    refine_shrink: float = 0.5
    seed: int = 0
    restarts: int = 4
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be >= 2")
        if self.refine_iters < 1 or self.restarts < 1 or self.budget < 1:
            raise ValueError("refine_iters, restarts and budget must be positive")
        if not 0 < self.refine_shrink < 1:
            raise ValueError("refine_shrink must lie in (0, 1)")


@dataclass(frozen=True)
class OptimizationResult:
    best_policy: PolicyPmf
    best_report: RateReport
    best_params: tuple
    evaluations: int
    stage_trace: tuple
    feasible: bool = True


def _achievable(space: ParameterSpace, params):
    joint, ok = space.to_joint(params)
    relay, recv, valid = batch_rates(joint, space.cfg)
    rate = np.minimum(relay, recv)
    return np.where(ok & valid, rate, 0.0), relay, recv, ok & valid


def _better(rate, params, best_rate, best_params) -> bool:
    if best_params is None or rate > best_rate:
        return True
    return rate == best_rate and tuple(params) < tuple(best_params)


def _pick(rates, params):
    """Index of the best rate, ties broken by the lexicographically smallest params."""
    top = np.flatnonzero(rates == rates.max())
    if top.size == 1:
        return int(top[0])
    order = np.lexsort(params[top].T[::-1])
    return int(top[order[0]])


@dataclass
class GridEvaluation:
    """Full-factorial grid over the parameter space.

    ``candidates`` counts every grid point (``resolution ** dim``); only points
    with a non-negative simplex remainder are kept in ``params``.  Indexing
    yields ``(policy, RateReport)`` pairs built from the batched rates.
    """

    space: ParameterSpace
    resolution: int
    candidates: int
    params: np.ndarray
    relay: np.ndarray
    receiver: np.ndarray
    valid: np.ndarray
    achievable: np.ndarray = field(init=False)

    def __post_init__(self):
        self.achievable = np.where(self.valid, np.minimum(self.relay, self.receiver), 0.0)

    def __len__(self):
        return self.params.shape[0]

    def __getitem__(self, i):
        valid = bool(self.valid[i])
        report = RateReport(
            float(self.relay[i]) if valid else 0.0,
            float(self.receiver[i]) if valid else 0.0,
            float(self.achievable[i]),
            valid,
        )
        return self.space.policy(self.params[i]), report

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def best_index(self) -> int:
        return _pick(self.achievable, self.params)


def _state_grid(width: int, resolution: int) -> np.ndarray:
    axis = np.linspace(0.0, 1.0, resolution)
    if width == 1:
        return axis[:, None]
    steps = resolution - 1
    pts = [(i, j, k) for i, j, k in itertools.product(range(resolution), repeat=3) if i + j + k <= steps]
    return axis[np.array(pts)]


def evaluate_grid(cfg: ChannelConfig, resolution: int, budget: int = DEFAULT_BUDGET) -> GridEvaluation:
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    space = parameterize(cfg)
    candidates = resolution**space.dimension
    if candidates > budget:
        raise BudgetExceeded(
            f"resolution {resolution} gives {candidates} grid points in dimension "
            f"{space.dimension}, over the budget of {budget}; lower the resolution"
        )
    per_state = [_state_grid(w, resolution) for w in space.widths]
    sizes = [g.shape[0] for g in per_state]
    idx = np.indices(sizes).reshape(len(sizes), -1)
    params = np.concatenate([g[i] for g, i in zip(per_state, idx)], axis=1)
    relay, recv, valid = batch_rates(space.to_joint(params)[0], cfg)
    return GridEvaluation(space, resolution, candidates, params, relay, recv, valid)


def _moves(space: ParameterSpace) -> np.ndarray:
    """Unit search directions: +/- along 1-parameter states, and mass transfers
    between every ordered pair of atoms in simplex states."""
    dim = space.dimension
    moves = []
    for off, w in zip(space.offsets, space.widths):
        if w == 1:
            for sign in (1.0, -1.0):
                d = np.zeros(dim)
                d[off] = sign
                moves.append(d)
            continue
        # atom 3 is the remainder: moving mass into it is a negative step on a free coordinate
        for src, dst in itertools.permutations(range(4), 2):
            d = np.zeros(dim)
            if src < 3:
                d[off + src] -= 1.0
            if dst < 3:
                d[off + dst] += 1.0
            moves.append(d)
    return np.array(moves)


def _random_start(space: ParameterSpace, rng) -> np.ndarray:
    out = []
    for w in space.widths:
        out.extend([rng.random()] if w == 1 else rng.dirichlet(np.ones(4))[:3])
    return np.array(out)


def _pattern_search(space, start, opts, rng, counter):
    moves = _moves(space)
    x = np.array(start, dtype=float)
    fx = float(_achievable(space, x[None, :])[0][0])
    counter[0] += 1
    max_step = step = 1.0 / (opts.grid_resolution - 1)
    n_random = 8 * space.dimension
    for _ in range(opts.refine_iters):
        if step < 1e-10:
            break
        # axis moves first; a fresh batch of random directions handles the
        # kink where the two bounds cross and no single axis move improves both
        improved = False
        for dirs in (moves, None):
            if dirs is None:
                dirs = rng.normal(size=(n_random, space.dimension))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            cand = x + step * dirs
            rates = _achievable(space, cand)[0]
            counter[0] += cand.shape[0]
            k = _pick(rates, cand)
            if rates[k] > fx:
                x, fx = cand[k], float(rates[k])
                improved = True
                break
        if improved:
            step = min(step / opts.refine_shrink, max_step)
        else:
            step *= opts.refine_shrink
    return x, fx


def optimize(cfg: ChannelConfig, opts: OptimizerOptions = OptimizerOptions(), starts=()) -> OptimizationResult:
    """Maximize ``min(relay bound, receiver bound)`` over valid policies.

    ``starts`` optionally adds policies (e.g. optima of neighbouring
    configurations) to the set of refinement starting points.
    """
    space = parameterize(cfg)
    grid = evaluate_grid(cfg, opts.grid_resolution, opts.budget)
    counter = [len(grid)]
    k = grid.best_index()
    best_params, best_rate = grid.params[k], float(grid.achievable[k])
    trace = [("grid", best_rate)]

    rng = stream(opts.seed, 0xC0FFEE)
    order = np.lexsort(np.vstack([grid.params.T[::-1], -grid.achievable]))
    seeds = [grid.params[i] for i in order[: opts.restarts]]
    seeds += [space.from_policy(p) for p in starts]
    seeds += [_random_start(space, rng) for _ in range(opts.restarts)]

    for i, s in enumerate(seeds):
        x, fx = _pattern_search(space, s, opts, rng, counter)
        if _better(fx, x, best_rate, best_params):
            best_params, best_rate = x, fx
        trace.append((f"refine[{i}]", best_rate))

    policy = space.policy(best_params)
    report = rate_report(policy, cfg)
    return OptimizationResult(
        best_policy=policy,
        best_report=report,
        best_params=tuple(float(v) for v in best_params),
        evaluations=counter[0],
        stage_trace=tuple(trace),
        feasible=bool(np.any(grid.valid)) or report.steady_state_valid,
    )


def optimize_over_crossover(cfg: ChannelConfig, crossovers, opts: OptimizerOptions = OptimizerOptions()) -> list:
    """Optimize at each crossover probability, sharing optima as warm starts.

    For a fixed policy the rate cannot grow with the crossover, so the optimum
    found at a noisier point is also offered as a start at every quieter one.
    Results come back in the order of ``crossovers``.
    """
    ps = [float(p) for p in crossovers]
    order = sorted(range(len(ps)), key=lambda i: ps[i], reverse=True)
    results = {}
    found = []
    for i in order:
        point = ChannelConfig(cfg.battery_capacity, cfg.energy_cost, ps[i])
        res = optimize(point, opts, starts=tuple(found))
        results[i] = res
        found.append(res.best_policy)
    return [results[i] for i in range(len(ps))]
