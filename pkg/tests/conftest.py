import numpy as np
import pytest
from hypothesis import strategies as st

from ehrelay.channel import ChannelConfig, PolicyPmf

# U=1, m=1: x1 uniform with x2 = 0 when empty, all four pairs uniform when charged
REFERENCE_POLICY = PolicyPmf(([0.5, 0.0, 0.5, 0.0], [0.25, 0.25, 0.25, 0.25]))
REFERENCE_CFG = ChannelConfig(1, 1)


def threshold_policy(a=0.1):
    """U=1, m=1 policy whose battery level is a function of the relay's past outputs:
    an empty battery always charges, a full one sends "1" with probability a and
    never charges and sends in the same slot."""
    return PolicyPmf(([0.0, 0.0, 1.0, 0.0], [(1 - a) / 2, a, (1 - a) / 2, 0.0]))


def random_policy(cfg, rng, zero_prob=0.0):
    """Random valid policy; each atom is zeroed with probability ``zero_prob``."""
    rows = []
    for u in range(cfg.n_states):
        w = rng.dirichlet(np.ones(4))
        if u < cfg.energy_cost:
            w[[1, 3]] = 0.0
        w[rng.random(4) < zero_prob] = 0.0
        if w.sum() == 0:
            w[0] = 1.0
        rows.append(w / w.sum())
    return PolicyPmf.from_array(np.array(rows))


@st.composite
def configs(draw, max_U=3, max_m=2, crossover=False):
    U = draw(st.integers(1, max_U))
    m = draw(st.integers(1, min(max_m, U)))
    p = draw(st.floats(0.0, 0.5)) if crossover else 0.0
    return ChannelConfig(U, m, p)


@st.composite
def config_and_policy(draw, max_U=3, max_m=2, zero_prob=0.0):
    cfg = draw(configs(max_U, max_m))
    seed = draw(st.integers(0, 2**32 - 1))
    return cfg, random_policy(cfg, np.random.default_rng(seed), zero_prob)


# acceptance summary: one line per criterion at the end of the run
_ACCEPTANCE = {}


@pytest.fixture
def acceptance_line():
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (passed, detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
