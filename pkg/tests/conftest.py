import numpy as np
import pytest

from catr.dataset import ConfounderSpec, generate_semisynthetic


@pytest.fixture(scope="session")
def small_data():
    """A 240-unit draw from the default generator with 8-dim embeddings."""
    spec = ConfounderSpec(embedding_dim=8, doc_length_range=(6, 10))
    ds, gt = generate_semisynthetic(spec, 240, seed=11)
    return ds, gt, spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
