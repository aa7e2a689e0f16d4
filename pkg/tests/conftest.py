import os
import tempfile

import numpy as np
import pytest
from hypothesis import settings

from carnot.dsl import builtin

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

os.environ.setdefault("CARNOT_CACHE_DIR", tempfile.mkdtemp(prefix="carnot-cache-"))

H1_SPEC = """\
group heis1
step 2
layer 1: X Y
layer 2: T
bracket [X,Y] = T
"""

ENGEL_SPEC = """\
group engel
step 3
layer 1: X1 X2
layer 2: X3
layer 3: X4
bracket [X1,X2] = X3
bracket [X1,X3] = X4
"""


@pytest.fixture(scope="session")
def h1():
    return builtin("heis", [1])


@pytest.fixture(scope="session")
def h2():
    return builtin("heis", [2])


@pytest.fixture(scope="session")
def engel():
    return builtin("engel")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
