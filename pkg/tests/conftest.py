import numpy as np
import pytest
import torch

from corl_tsn.bench import generate_expert_dataset, make_gridkey_task, make_pointreach_task

torch.set_num_threads(1)


@pytest.fixture
def grid_env():
    return make_gridkey_task(layout_seed=3, theta=0.0, task_id="g0", seed=5)


@pytest.fixture
def grid_dataset(grid_env):
    return generate_expert_dataset(grid_env, 12, seed=0)


@pytest.fixture
def reach_env():
    return make_pointreach_task(2, dynamics_seed=4, task_id="r0", seed=1, max_horizon=12)


@pytest.fixture
def reach_dataset(reach_env):
    return generate_expert_dataset(reach_env, 6, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def _record(number, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number:>2}] {name}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
