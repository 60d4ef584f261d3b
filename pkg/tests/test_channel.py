import numpy as np
import pytest
from hypothesis import given, strategies as st

from ehrelay.channel import (
    ATOMS,
    ChannelConfig,
    PolicyPmf,
    StatePmf,
    feasible_relay_outputs,
    next_state,
    transition_table,
    validate_policy,
)
from ehrelay.errors import InfeasibleTransmission

from conftest import configs


@pytest.mark.parametrize(
    "u, U, m, expected",
    [(1, 2, 2, {0}), (2, 2, 2, {0, 1}), (0, 1, 1, {0})],
)
def test_feasible_relay_outputs(u, U, m, expected):
    assert feasible_relay_outputs(u, ChannelConfig(U, m)) == expected


@pytest.mark.parametrize(
    "u, x1, x2, U, m, expected",
    [
        (2, 1, 0, 4, 2, 3),  # charge
        (4, 1, 0, 4, 2, 4),  # charge while full is lost
        (2, 0, 1, 4, 2, 0),  # send
        (2, 1, 1, 4, 2, 1),  # charge and send together
        (3, 0, 0, 4, 2, 3),  # idle
    ],
)
def test_next_state_cases(u, x1, x2, U, m, expected):
    assert next_state(u, x1, x2, ChannelConfig(U, m)) == expected


def test_send_below_cost_rejected_even_when_charging():
    cfg = ChannelConfig(3, 2)
    with pytest.raises(InfeasibleTransmission):
        next_state(1, 1, 1, cfg)
    with pytest.raises(InfeasibleTransmission):
        next_state(0, 0, 1, cfg)


@pytest.mark.parametrize("args", [(-1, 0, 0), (3, 0, 0), (0, 2, 0), (0, 0, -1), (True, 0, 0)])
def test_next_state_bad_arguments(args):
    with pytest.raises(ValueError):
        next_state(*args, ChannelConfig(2, 1))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(battery_capacity=0, energy_cost=1),
        dict(battery_capacity=1, energy_cost=2),
        dict(battery_capacity=2, energy_cost=0),
        dict(battery_capacity=2, energy_cost=1, crossover=0.6),
        dict(battery_capacity=2, energy_cost=1, crossover=-0.1),
        dict(battery_capacity=1.5, energy_cost=1),
    ],
)
def test_channel_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ChannelConfig(**kwargs)


def test_channel_config_defaults():
    cfg = ChannelConfig(3, 2)
    assert cfg.crossover == 0.0 and cfg.noiseless and cfg.n_states == 4


@given(configs(max_U=6, max_m=6))
def test_next_state_properties(cfg):
    m, U = cfg.energy_cost, cfg.battery_capacity
    for u in range(cfg.n_states):
        assert next_state(u, 0, 0, cfg) == u
        for x1, x2 in ATOMS:
            if x2 not in feasible_relay_outputs(u, cfg):
                continue
            assert u + x1 - m * x2 >= 0
            v = next_state(u, x1, x2, cfg)
            assert 0 <= v <= U
            assert v == next_state(u, x1, x2, cfg)


@given(configs(max_U=6, max_m=6))
def test_transition_table_matches_next_state(cfg):
    table = transition_table(cfg)
    for u in range(cfg.n_states):
        for x1, x2 in ATOMS:
            if x2 == 1 and u < cfg.energy_cost:
                assert table[u, x1, x2] == -1
            else:
                assert table[u, x1, x2] == next_state(u, x1, x2, cfg)


def test_validate_policy_examples():
    cfg = ChannelConfig(1, 1)
    bad_support = PolicyPmf(([0.4, 0.1, 0.5, 0.0], [0.25] * 4))
    assert any("u=0" in p for p in validate_policy(bad_support, cfg))
    idle = PolicyPmf(([1, 0, 0, 0], [1, 0, 0, 0]))
    assert validate_policy(idle, cfg) == []
    short = PolicyPmf(([0.5, 0, 0.49, 0], [0.25] * 4))
    assert any("sum" in p for p in validate_policy(short, cfg))
    negative = PolicyPmf(([1.1, 0, -0.1, 0], [0.25] * 4))
    assert any("negative" in p for p in validate_policy(negative, cfg))
    assert validate_policy(PolicyPmf(([1, 0, 0, 0],)), cfg)


def test_state_pmf_renormalizes_within_tolerance():
    s = StatePmf([0.5 + 4e-13, 0.0, 0.5, 0.0])
    assert abs(sum(s.probs) - 1.0) < 1e-15
    raw = StatePmf([0.5, 0.0, 0.49, 0.0])
    assert raw.probs == (0.5, 0.0, 0.49, 0.0) and not raw.is_distribution


def test_state_pmf_accessors():
    s = StatePmf({(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
    assert s[(1, 0)] == 0.3
    assert s.p_x2_one == pytest.approx(0.6) and s.p_x1_one == pytest.approx(0.7)
    assert np.allclose(s.joint, [[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(ValueError):
        StatePmf([0.5, 0.5])


@given(st.lists(st.lists(st.floats(0, 1), min_size=4, max_size=4), min_size=1, max_size=4))
def test_policy_round_trip(rows):
    pol = PolicyPmf(tuple(rows))
    again = PolicyPmf.from_array(pol.joint)
    assert again.to_lists() == pol.to_lists()
