import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_params(model, seed=0, scale=0.5):
    """Replace every parameter with random values (biases included) so no
    ReLU sits exactly on its kink and no path is dead."""
    r = np.random.default_rng(seed)
    for name, t in model.params.items():
        v = r.standard_normal(t.shape) * scale
        if name.endswith("gamma"):
            v = 1.0 + 0.2 * v
        t.data = v.astype(t.dtype)
    return model


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
