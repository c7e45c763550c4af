import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from navpretrain.envgraph import make_graph
from navpretrain.synthdata import GenParams, generate_environment

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def env25():
    return generate_environment(GenParams(seed=7), "e25")


@pytest.fixture(scope="session")
def small_world():
    """A few default-sized environments keyed by id."""
    envs = [generate_environment(GenParams(seed=100 + i), f"w{i}") for i in range(4)]
    return {e.env_id: e for e in envs}


@pytest.fixture
def line_graph():
    return make_graph("line", {"a": (0, 0), "b": (0, 1), "c": (0, 2)}, [("a", "b"), ("b", "c")])


@pytest.fixture
def rng():
    return np.random.default_rng(0)


TINY_RUN = {
    "data": {"n_train_envs": 3, "n_unseen_envs": 1, "n_paths_per_env": 3, "n_paths_unseen": 3,
             "instructions_per_path": 2, "min_count": 1},
    "model": {"d_emb": 8, "d_x": 8, "d_v": 16, "d_att": 8, "d_act": 8},
    "tasks": {"steps": 40, "eval_every": 20},
    "agent": {"steps": 5, "bc_steps": 20},
    "eval": {"ranking_bc_steps": 10},
}


@pytest.fixture(scope="session")
def tiny_cfg():
    from navpretrain.config import RunConfig
    return RunConfig.from_dict(TINY_RUN)


@pytest.fixture(scope="session")
def tiny_ds(tiny_cfg):
    from navpretrain.pipeline import generate_dataset
    return generate_dataset(tiny_cfg)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
