import numpy as np
import pytest
from hypothesis import settings

from hintlab.config import TrainerConfig
from hintlab.policy import PolicyParams
from hintlab.tasks import generate_task_set

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    """Append ``(criterion, passed, detail)``; printed in the terminal summary."""
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def small_tasks():
    return generate_task_set(3, 12, (3, 4), 0.5)


@pytest.fixture
def random_params():
    def make(seed, n_questions=4, length=3, vocab=4, scale=1.0, sharing="separate"):
        rng = np.random.default_rng(seed)
        p = PolicyParams.zeros(n_questions, length, vocab, sharing)
        return p.replace(rng.normal(0.0, scale, p.shape))
    return make


@pytest.fixture
def cfg():
    return TrainerConfig()
