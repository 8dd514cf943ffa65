import sys

import numpy as np
import pytest

from dssm.data import EventRecord, Trajectory


def random_trajectory(rng, pid, T, obs_dim, int_dim, events, mask_prob=0.8):
    x = rng.standard_normal((T, obs_dim))
    u = rng.standard_normal((T, int_dim))
    mask = (rng.uniform(size=(T, obs_dim)) < mask_prob).astype(float)
    recs = {}
    for e in events:
        t = int(rng.integers(1, T + 1))
        recs[e] = EventRecord(t, int(rng.integers(0, 2)))
    return Trajectory(pid, x, u, mask, recs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
