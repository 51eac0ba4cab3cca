import os

# cap BLAS pools before numpy is first imported: the acceptance runtime
# budgets are stated for 4 CPU threads
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "4")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from lrgan import datasynth  # noqa: E402
from lrgan import diffcore as dc  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_graph():
    dc.reset_graph()
    yield
    dc.reset_graph()


@pytest.fixture(scope="session")
def digit_bank():
    return datasynth.builtin_digit_bank()


@pytest.fixture(scope="session")
def mnist_one_small(digit_bank):
    digits, labels = digit_bank
    return datasynth.synth_mnist_one(digits, labels, 256, seed=11)


def rand64(rng, *shape, requires_grad=False):
    return dc.Tensor(rng.normal(size=shape), requires_grad=requires_grad, dtype=np.float64)
