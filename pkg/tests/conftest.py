import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def mnist_available():
    from condlr.data import load_mnist
    from condlr.errors import DataError

    try:
        load_mnist("test", limit=1)
    except DataError:
        return False
    return True


requires_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST IDX files not found")


ACCEPTANCE_LINES = {}


class CriterionRecorder:
    def report(self, number, title, passed, detail):
        line = f"[{number}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
