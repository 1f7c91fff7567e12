import os
import sys

# single-core BLAS so timings and results match the benchmark setting
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from dynmlp import autograd as ag


@pytest.fixture(autouse=True)
def clean_tape():
    ag.reset_tape()
    prev = ag.get_default_dtype()
    yield
    ag.set_default_dtype(prev)
    ag.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
