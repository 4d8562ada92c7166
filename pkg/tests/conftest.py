import numpy as np
import pytest

from fbsdeplab.randmeasures import MarkSpace, empty_mark_space, make_time_grid
from fbsdeplab.specs import load_spec


@pytest.fixture(scope="session")
def lq_default():
    return load_spec("lq_default").lq()


@pytest.fixture(scope="session")
def linear_bench():
    return load_spec("linear_benchmark").linear()


@pytest.fixture
def ms_pair():
    return MarkSpace([1.0, 2.0], [0.6, 0.4]), MarkSpace([1.0, 2.0, 3.0], [0.5, 0.5, 1.0])


@pytest.fixture
def no_marks():
    return empty_mark_space(), empty_mark_space()


@pytest.fixture
def grid50():
    return make_time_grid(1.0, 50)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
