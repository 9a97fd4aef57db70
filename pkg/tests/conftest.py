import numpy as np
import pytest

from mdfusion import autodiff as ad
from mdfusion.data import SynthConfig, synth_generate


@pytest.fixture(autouse=True)
def _clean_faults():
    yield
    ad.inject_fault(None)
    ad.set_debug(False)


@pytest.fixture(scope="session")
def default_ds():
    return synth_generate(SynthConfig())


@pytest.fixture(scope="session")
def small_ds():
    return synth_generate(SynthConfig(n_patients=40, dim_c=6, dim_t=4, latent_dim=3, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
