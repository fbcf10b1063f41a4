import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spare_lab.blocks import DOMAIN, SceneConfig, generate_dataset
from spare_lab.relational import ActionInstance, Experience, ProblemInstance, State

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_state(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float64)
    ids = ids or tuple(f"b{i}" for i in range(len(rows)))
    inst = ProblemInstance(DOMAIN, tuple(ids), "t")
    return State(inst, rows)


def stack_rows(n=3, size=0.06, x=0.0, y=0.0):
    """n equal cubes stacked exactly on top of each other, bottom first."""
    return [[size, size, size, x, y, k * size] for k in range(n)]


def make_exp(rows, next_rows, target=0, alpha=(-0.1, 0.0, 0.0, 0.05)):
    s = make_state(rows)
    return Experience(s, ActionInstance("push", alpha, (target,)), State(s.instance, next_rows), "t")


@pytest.fixture(scope="session")
def stack3():
    return generate_dataset(SceneConfig(stack_height=3, seed=11), 160)


@pytest.fixture(scope="session")
def mixed():
    return generate_dataset(SceneConfig(seed=12), 150, {2: 1, 3: 1, 4: 1})
