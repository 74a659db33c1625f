import numpy as np
import pytest
from hypothesis import settings

from capsattn import tensor as T

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: list[str] = []


class Criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            line = f"PASS  {self.name}: {self.detail}"
        else:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            line = f"FAIL  {self.name}: {self.detail} {msg}".rstrip()
        _criteria.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion("name") as c: ...`` records one pass/fail line."""
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
