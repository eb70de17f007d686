import os

# single-core BLAS before numpy spins up its thread pool; the acceptance
# budget is stated for one core and results stay bit-reproducible
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import pytest  # noqa: E402

import conseq.diffcore as dc  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_tape():
    dc.tape().clear()
    yield
    dc.tape().clear()
