import numpy as np
import pytest
from hypothesis import settings

from cadet.attention import HAVE_COMPILED

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

BACKENDS = ["python"] + (["compiled"] if HAVE_COMPILED else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(".")[0].split()[-1])):
            terminalreporter.write_line(line)
