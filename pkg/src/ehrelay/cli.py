"""Command-line front end.

Subcommands ``analyze``, ``optimize``, ``simulate`` and ``sweep`` read one
JSON config and write JSON or CSV.  Exit codes:

0
    success
2
    invalid config or arguments (including an unknown sweep parameter)
3
    optimizer grid over budget
4
    infeasible plan (epsilon too large, or no steady state)

``EHRELAY_OUTPUT_DIR``, when set, is prepended to relative output paths.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import ChannelConfig, PolicyPmf, validate_policy
from .errors import BudgetExceeded, InvalidPolicy, NoSteadyState, PlanError
from .markov import build_transition_matrix, rate_report, steady_state_condition
from .optimize import OptimizerOptions, optimize, optimize_over_crossover
from .simulate import TrialSpec, run_trials

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_INFEASIBLE = 0, 2, 3, 4
OUTPUT_DIR_ENV = "EHRELAY_OUTPUT_DIR"
SWEEP_PARAMETERS = ("p", "U", "m", "rate_fraction", "n")
SWEEP_COLUMNS = (
    "mode", "parameter", "value", "achievable", "relay_bound", "receiver_bound",
    "trials", "relay_error_rate", "relay_error_half_width", "receiver_error_rate",
    "receiver_error_half_width", "end_to_end_error_rate", "incomplete_rate", "collision_rate",
)


class ConfigError(ValueError):
    """Invalid experiment config; ``line`` points into the JSON source when known."""

    def __init__(self, message, line=None, source="<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)


# --------------------------------------------------------------------------
# config

@dataclass(frozen=True)
class PlanSection:
    n: int = 2000
    B: int = 5
    epsilon: float = 0.02
    rate_fraction: float = 0.5
    relay_rate_fraction: float | None = None
    decoder: str = "auto"
    reset: str = "genie"
    eps_typ: float | None = None


@dataclass(frozen=True)
class SweepSection:
    parameter: str
    values: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig
    policy: PolicyPmf | None = None
    plan: PlanSection = PlanSection()
    optimizer: OptimizerOptions = OptimizerOptions()
    trials: int = 1
    base_seed: int = 0
    output_path: str | None = None
    output_format: str = "json"
    sweep: SweepSection | None = None

    def to_dict(self) -> dict:
        out = {
            "channel": {
                "battery_capacity": self.channel.battery_capacity,
                "energy_cost": self.channel.energy_cost,
                "crossover": self.channel.crossover,
            },
            "plan": asdict(self.plan),
            "optimizer": asdict(self.optimizer),
            "trials": self.trials,
            "base_seed": self.base_seed,
            "output": {"path": self.output_path, "format": self.output_format},
        }
        if self.policy is not None:
            out["policy"] = self.policy.to_lists()
        if self.sweep is not None:
            out["sweep"] = {"parameter": self.sweep.parameter, "values": list(self.sweep.values)}
        return out


_SECTIONS = {
    "channel": {"battery_capacity", "energy_cost", "crossover"},
    "plan": set(PlanSection.__dataclass_fields__),
    "optimizer": set(OptimizerOptions.__dataclass_fields__),
    "output": {"path", "format"},
    "sweep": {"parameter", "values"},
}
_TOP = set(_SECTIONS) | {"policy", "trials", "base_seed"}


def _line_of(text: str, key: str, after: int = 1):
    """1-based line of the first ``"key"`` at or after line ``after``."""
    pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for i, line in enumerate(text.splitlines()[after - 1 :], start=after):
        if pattern.search(line):
            return i
    return None


def _int(value, name, fail, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        fail(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        fail(f"{name} must be >= {minimum}, got {value}")
    return value


def _num(value, name, fail, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        fail(f"{name} must be a number, got {value!r}")
    return float(value)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate a JSON experiment config.

    Unknown keys are rejected; every error names the offending line when it
    can be located.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", 1, source)

    def fail_at(key, section=None):
        def fail(msg):
            start = _line_of(text, section) or 1 if section else 1
            raise ConfigError(msg, _line_of(text, key, start) if key else None, source)

        return fail

    for key in doc:
        if key not in _TOP:
            fail_at(key)(f"unknown key {key!r}")
    sections = {}
    for name, allowed in _SECTIONS.items():
        body = doc.get(name, {})
        if name == "sweep" and name not in doc:
            continue
        if not isinstance(body, dict):
            fail_at(name)(f"section {name!r} must be an object")
        for key in body:
            if key not in allowed:
                fail_at(key, name)(f"unknown key {key!r} in section {name!r}")
        sections[name] = body

    ch = sections["channel"]
    f = lambda k: fail_at(k, "channel")  # noqa: E731
    if "battery_capacity" not in ch or "energy_cost" not in ch:
        fail_at("channel")("channel needs battery_capacity and energy_cost")
    U = _int(ch["battery_capacity"], "battery_capacity", f("battery_capacity"), 1)
    m = _int(ch["energy_cost"], "energy_cost", f("energy_cost"), 1)
    p = _num(ch.get("crossover", 0.0), "crossover", f("crossover"))
    try:
        channel = ChannelConfig(U, m, p)
    except ValueError as exc:
        fail_at("channel")(str(exc))

    policy = None
    if "policy" in doc:
        raw = doc["policy"]
        fp = fail_at("policy")
        if not isinstance(raw, list) or not all(isinstance(r, list) and len(r) == 4 for r in raw):
            fp("policy must be a list of [p00, p01, p10, p11] rows, one per battery level")
        for row in raw:
            for v in row:
                _num(v, "policy entry", fp)
        policy = PolicyPmf(tuple(tuple(float(v) for v in r) for r in raw))
        problems = validate_policy(policy, channel)
        if problems:
            fp("invalid policy: " + "; ".join(problems))

    pl = sections["plan"]
    f = lambda k: fail_at(k, "plan")  # noqa: E731
    plan = PlanSection(
        n=_int(pl.get("n", PlanSection.n), "n", f("n"), 1),
        B=_int(pl.get("B", PlanSection.B), "B", f("B"), 2),
        epsilon=_num(pl.get("epsilon", PlanSection.epsilon), "epsilon", f("epsilon")),
        rate_fraction=_num(pl.get("rate_fraction", PlanSection.rate_fraction), "rate_fraction", f("rate_fraction")),
        relay_rate_fraction=_num(pl.get("relay_rate_fraction"), "relay_rate_fraction", f("relay_rate_fraction"), True),
        decoder=pl.get("decoder", PlanSection.decoder),
        reset=pl.get("reset", PlanSection.reset),
        eps_typ=_num(pl.get("eps_typ"), "eps_typ", f("eps_typ"), True),
    )
    if plan.decoder not in ("auto", "exhaustive", "sampled"):
        f("decoder")(f"decoder must be auto, exhaustive or sampled, got {plan.decoder!r}")
    if plan.reset not in ("genie", "preamble"):
        f("reset")(f"reset must be genie or preamble, got {plan.reset!r}")
    if plan.epsilon <= 0 or plan.rate_fraction <= 0:
        fail_at("plan")("epsilon and rate_fraction must be positive")

    op = sections["optimizer"]
    f = lambda k: fail_at(k, "optimizer")  # noqa: E731
    defaults = OptimizerOptions()
    kwargs = {}
    for key in op:
        if key == "refine_shrink":
            kwargs[key] = _num(op[key], key, f(key))
        else:
            kwargs[key] = _int(op[key], key, f(key))
    try:
        optimizer = replace(defaults, **kwargs)
    except ValueError as exc:
        fail_at("optimizer")(str(exc))

    trials = _int(doc.get("trials", 1), "trials", fail_at("trials"), 0)
    base_seed = _int(doc.get("base_seed", 0), "base_seed", fail_at("base_seed"), 0)

    out = sections["output"]
    path = out.get("path")
    if path is not None and not isinstance(path, str):
        fail_at("path", "output")("output path must be a string")
    fmt = out.get("format", "json")
    if fmt not in ("json", "csv"):
        fail_at("format", "output")(f"format must be json or csv, got {fmt!r}")

    sweep = None
    if "sweep" in sections:
        sw = sections["sweep"]
        param, values = sw.get("parameter"), sw.get("values")
        if param not in SWEEP_PARAMETERS:
            fail_at("parameter", "sweep")(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMETERS)}")
        if not isinstance(values, list) or not values:
            fail_at("values", "sweep")("sweep values must be a non-empty list")
        for v in values:
            _num(v, "sweep value", fail_at("values", "sweep"))
        sweep = SweepSection(param, tuple(values))

    return ExperimentConfig(channel, policy, plan, optimizer, trials, base_seed, path, fmt, sweep)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path)


# --------------------------------------------------------------------------
# output

def _clean(value):
    """Round floats to 12 significant digits and make the tree JSON-safe."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    return value


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _flatten(prefix, value, out):
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _flatten(f"{prefix}[{i}]", v, out)
    else:
        out.append((prefix, value))


def render(record, fmt: str) -> str:
    """Serialize a result.  Lists of dicts become CSV tables; a single dict
    becomes a two-column ``field,value`` CSV."""
    record = _clean(record)
    if fmt == "json":
        return json.dumps(record, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    if isinstance(record, dict) and "rows" in record:
        writer.writerow(SWEEP_COLUMNS)
        for row in record["rows"]:
            writer.writerow([_fmt(row.get(c)) for c in SWEEP_COLUMNS])
    else:
        writer.writerow(("field", "value"))
        flat = []
        _flatten("", record, flat)
        for k, v in flat:
            writer.writerow((k, _fmt(v)))
    return buf.getvalue()


def _resolve_output(path):
    if path is None or path == "-":
        return None
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    return path


def _write(text: str, path):
    path = _resolve_output(path)
    if path is None:
        sys.stdout.write(text)
        return
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# commands

def _resolve_policy(cfg: ExperimentConfig):
    """Explicit policy if given, otherwise the optimizer's best."""
    if cfg.policy is not None:
        return cfg.policy, "fixed"
    return optimize(cfg.channel, cfg.optimizer).best_policy, "optimized"


def cmd_analyze(cfg: ExperimentConfig) -> dict:
    if cfg.policy is None:
        raise ConfigError("analyze needs an explicit policy")
    P = build_transition_matrix(cfg.policy, cfg.channel)
    report = rate_report(cfg.policy, cfg.channel)
    return {
        "command": "analyze",
        "channel": cfg.to_dict()["channel"],
        "policy": cfg.policy.to_lists(),
        "transition_matrix": P.tolist(),
        "steady_state_valid": steady_state_condition(P),
        "steady_state": list(report.steady_state),
        "relay_bound": report.relay_bound,
        "receiver_bound": report.receiver_bound,
        "achievable": report.achievable,
    }


def cmd_optimize(cfg: ExperimentConfig) -> dict:
    res = optimize(cfg.channel, cfg.optimizer)
    return {
        "command": "optimize",
        "channel": cfg.to_dict()["channel"],
        "optimizer": asdict(cfg.optimizer),
        "policy": res.best_policy.to_lists(),
        "achievable": res.best_report.achievable,
        "relay_bound": res.best_report.relay_bound,
        "receiver_bound": res.best_report.receiver_bound,
        "steady_state": list(res.best_report.steady_state),
        "evaluations": res.evaluations,
        "stage_trace": [{"stage": s, "best": r} for s, r in res.stage_trace],
    }


def _trial_spec(cfg: ExperimentConfig, channel, policy, plan: PlanSection, trials: int) -> TrialSpec:
    return TrialSpec(
        cfg=channel, policy=policy, n=plan.n, B=plan.B, epsilon=plan.epsilon,
        rate_fraction=plan.rate_fraction, trials=max(trials, 1), base_seed=cfg.base_seed,
        relay_rate_fraction=plan.relay_rate_fraction, decoder=plan.decoder,
        reset=plan.reset, eps_typ=plan.eps_typ,
    )


def cmd_simulate(cfg: ExperimentConfig, threads: int = 1) -> dict:
    policy, mode = _resolve_policy(cfg)
    if cfg.trials < 1:
        raise ConfigError("simulate needs trials >= 1")
    spec = _trial_spec(cfg, cfg.channel, policy, cfg.plan, cfg.trials)
    plan = spec.plan()
    stats = run_trials(spec, threads)
    report = rate_report(policy, cfg.channel)
    return {
        "command": "simulate",
        "mode": mode,
        "channel": cfg.to_dict()["channel"],
        "policy": policy.to_lists(),
        "plan": {
            "n": plan.n, "B": plan.B, "epsilon": plan.epsilon, "n_u": list(plan.n_u),
            "delta": plan.delta, "R_u": list(plan.R_u),
            "log2_K_u": [math.log2(k) for k in plan.K_u],
            "R_relay": plan.R_relay, "log2_M_count": math.log2(plan.M_count),
            "rate": plan.rate, "clamped": plan.clamped,
            "within_packing_limit": plan.within_packing_limit,
        },
        "base_seed": cfg.base_seed,
        "steady_state": list(report.steady_state),
        "achievable": report.achievable,
        "stats": stats.as_dict(),
    }


def _sweep_point(cfg: ExperimentConfig, parameter: str, value):
    """Config with one parameter replaced."""
    ch, plan = cfg.channel, cfg.plan
    if parameter == "p":
        return replace(cfg, channel=ChannelConfig(ch.battery_capacity, ch.energy_cost, float(value))), plan
    if parameter == "U":
        return replace(cfg, channel=ChannelConfig(int(value), ch.energy_cost, ch.crossover)), plan
    if parameter == "m":
        return replace(cfg, channel=ChannelConfig(ch.battery_capacity, int(value), ch.crossover)), plan
    if parameter == "rate_fraction":
        return cfg, replace(plan, rate_fraction=float(value))
    if parameter == "n":
        return cfg, replace(plan, n=int(value))
    raise ConfigError(f"unknown sweep parameter {parameter!r}")


def cmd_sweep(cfg: ExperimentConfig, threads: int = 1, parameter=None, values=None) -> dict:
    """One row per value.  With an explicit policy that fits every point the
    rows use it (mode ``fixed``); otherwise each point is re-optimized."""
    if parameter is None:
        if cfg.sweep is None:
            raise ConfigError("sweep needs a 'sweep' section or --parameter/--values")
        parameter, values = cfg.sweep.parameter, cfg.sweep.values
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; expected one of {', '.join(SWEEP_PARAMETERS)}")
    if cfg.policy is not None and parameter in ("U", "m"):
        raise ConfigError(f"an explicit policy cannot be swept over {parameter}; drop the policy to re-optimize")
    mode = "fixed" if cfg.policy is not None else "optimized"
    points = []
    for value in values:
        try:
            points.append(_sweep_point(cfg, parameter, value))
        except ValueError as exc:
            raise ConfigError(f"sweep value {value!r}: {exc}") from None
    if mode == "optimized" and parameter == "p":
        # warm starts across noise levels keep the optimized rate monotone in p
        policies = [r.best_policy for r in optimize_over_crossover(cfg.channel, values, cfg.optimizer)]
    else:
        policies = [_resolve_policy(point)[0] for point, _ in points]
    rows = []
    for value, (point, plan), policy in zip(values, points, policies):
        report = rate_report(policy, point.channel)
        row = {
            "mode": mode, "parameter": parameter, "value": float(value),
            "achievable": report.achievable, "relay_bound": report.relay_bound,
            "receiver_bound": report.receiver_bound, "trials": cfg.trials,
        }
        if cfg.trials > 0 and report.achievable > 0:
            stats = run_trials(_trial_spec(cfg, point.channel, policy, plan, cfg.trials), threads)
            er = stats.error_rates()
            row.update(
                relay_error_rate=er["relay"]["rate"],
                relay_error_half_width=er["relay"]["half_width"],
                receiver_error_rate=er["receiver"]["rate"],
                receiver_error_half_width=er["receiver"]["half_width"],
                end_to_end_error_rate=er["end_to_end"]["rate"],
                incomplete_rate=er["incomplete"]["rate"],
                collision_rate=er["collision"]["rate"],
            )
        rows.append(row)
    return {"command": "sweep", "mode": mode, "parameter": parameter, "columns": list(SWEEP_COLUMNS), "rows": rows}


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrelay", description="Energy-harvesting relay channel: rates, optimization and coding simulations.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("analyze", "steady state and rate bounds of an explicit policy"),
        ("optimize", "search for the rate-maximizing policy"),
        ("simulate", "Monte Carlo run of the block Markov coding scheme"),
        ("sweep", "repeat analyze/simulate over one parameter"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output file (default: config output.path, else stdout)")
        p.add_argument("--format", choices=("json", "csv"), help="output format (default: config output.format)")
        p.add_argument("--seed", type=int, help="override base_seed (and the optimizer seed)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for independent trials")
        if name == "sweep":
            p.add_argument("--parameter", choices=None, help="parameter to sweep; overrides the config")
            p.add_argument("--values", help="comma-separated values; overrides the config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg = replace(cfg, base_seed=args.seed, optimizer=replace(cfg.optimizer, seed=args.seed))
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        fmt = args.format or cfg.output_format
        if args.command == "analyze":
            record = cmd_analyze(cfg)
        elif args.command == "optimize":
            record = cmd_optimize(cfg)
        elif args.command == "simulate":
            record = cmd_simulate(cfg, args.threads)
        else:
            parameter = values = None
            if args.parameter is not None or args.values is not None:
                if args.parameter is None or args.values is None:
                    raise ConfigError("--parameter and --values go together")
                parameter = args.parameter
                try:
                    values = [float(v) for v in args.values.split(",")]
                except ValueError:
                    raise ConfigError(f"--values must be comma-separated numbers, got {args.values!r}") from None
            record = cmd_sweep(cfg, args.threads, parameter, values)
        _write(render(record, fmt), args.out or cfg.output_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidPolicy as exc:
        print(f"error: invalid policy: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (PlanError, NoSteadyState) as exc:
        print(f"error: infeasible plan: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
