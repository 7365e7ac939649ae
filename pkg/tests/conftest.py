import numpy as np
import pytest

from stalab.synthbench import SyntheticTaskSpec, generate


@pytest.fixture(scope="session")
def small_ds():
    """A quick benchmark: same task mix as the default, fewer examples."""
    return generate(SyntheticTaskSpec(n_train=256, n_eval=128), seed=3)


@pytest.fixture(scope="session")
def default_ds():
    return generate(SyntheticTaskSpec(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
