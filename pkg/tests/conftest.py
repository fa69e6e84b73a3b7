import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from selattn.config import ModelConfig  # noqa: E402
from selattn.model import Model  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# acceptance criteria record their verdict here; printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(src_vocab=12, tgt_vocab=13, model_dim=8, ff_dim=12, layers=1, heads=2, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def well_conditioned(model: Model, seed: int = 0) -> Model:
    """Move every parameter to a generic random point.

    The default context initialisation feeds a near-constant vector into the
    last layer norm, which makes central differences at h=1e-4 inaccurate;
    random gains, biases and projections avoid that regime.
    """
    r = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.endswith(".g"):
            p.data[...] = 1.0 + r.normal(0.0, 0.3, p.shape)
        elif name.startswith(("ctx.", "gate.")) or name.endswith(".b"):
            p.data[...] = r.normal(0.0, 0.5, p.shape)
    return model


@pytest.fixture
def toy_doc():
    """Two-sentence parallel document in the tiny vocabularies (ids >= 4)."""
    return [[4, 5, 6], [7, 8]], [[4, 5], [6, 7, 8]]
