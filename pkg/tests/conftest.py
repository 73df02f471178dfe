import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hmskm.sis import SISParams, build_sis, simulate_sis

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sis_params():
    return SISParams()


@pytest.fixture(scope="session")
def sis(sis_params):
    return build_sis(sis_params)


@pytest.fixture(scope="session")
def default_reference_path(sis_params):
    """The seeded default-parameter path with one mid-season high period used by the experiments."""
    from hmskm.reproduce import reference_path

    path, _ = reference_path(sis_params, seed=0)
    return path


@pytest.fixture(scope="session")
def short_path(sis_params):
    return simulate_sis(sis_params.with_(T=5.0), seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one pass/fail line for an acceptance criterion and return the verdict."""
    def _report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return passed
    return _report
