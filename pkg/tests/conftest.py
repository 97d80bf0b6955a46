import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from polyserial.model import Dataset, ParamVector

THETA_MAIN = ParamVector(0.5, 0.0, 1.0, (-1.5, -0.5, 0.5, 1.5))


@st.composite
def params(draw, max_r=6, max_abs_rho=0.9):
    r = draw(st.integers(2, max_r))
    rho = draw(st.floats(-max_abs_rho, max_abs_rho))
    mu = draw(st.floats(-3, 3))
    sigma2 = draw(st.floats(0.25, 4))
    start = draw(st.floats(-2, 0.5))
    gaps = draw(st.lists(st.floats(0.2, 1.5), min_size=r - 2, max_size=r - 2))
    tau = tuple(start + np.concatenate(([0.0], np.cumsum(gaps))))
    return ParamVector(rho, mu, sigma2, tau)


@st.composite
def param_point(draw, **kw):
    th = draw(params(**kw))
    z = draw(st.floats(-3, 3))
    y = draw(st.integers(1, th.r))
    return th, th.mu + th.sigma * z, y


def draw_dataset(theta: ParamVector, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    z1 = rng.standard_normal(n)
    eta = theta.rho * z1 + np.sqrt(1 - theta.rho ** 2) * rng.standard_normal(n)
    y = 1 + np.searchsorted(np.asarray(theta.tau), eta)
    return Dataset(theta.mu + theta.sigma * z1, y, theta.r)


@pytest.fixture(scope="session")
def theta_main():
    return THETA_MAIN


@pytest.fixture(scope="session")
def data_main():
    return draw_dataset(THETA_MAIN, 500, 11)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
