import numpy as np
import pytest
import torch

from dualmim.synthdata import DEFAULT_PRESETS, generate_corpus, generate_tiles


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def preset_a():
    return DEFAULT_PRESETS["brackwater"]


@pytest.fixture(scope="session")
def small_corpus():
    """Nine 16x16 tiles over all three default cities."""
    return generate_corpus(DEFAULT_PRESETS.values(), 3, 16, seed=5, patch_size=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> one-line verdict, echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(ACCEPTANCE, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        terminalreporter.write_line(log[n])
