import numpy as np
import pytest
from hypothesis import settings

from fedmpq.codebook_service import CodebookSet, enforce_zero_codeword
from fedmpq.pq_codec import Codebook

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_codebook(rng, K, D, layer=0, index=0, zero=True):
    cb = Codebook(rng.normal(size=(K, D)), layer, index)
    return enforce_zero_codeword(cb) if zero else cb


def random_set(rng, M, K, D, layer=0):
    return CodebookSet(layer, tuple(random_codebook(rng, K, D, layer, n) for n in range(M)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the pytest summary
ACCEPTANCE_LINES: list = []


def report(criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
