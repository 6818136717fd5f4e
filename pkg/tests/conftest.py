import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from streamkws.attention import AttentionProjections  # noqa: E402
from streamkws.model import ModelConfig  # noqa: E402


def random_projections(rng, d_model, n_heads, scale=None, dtype=np.float64):
    scale = scale or 1.0 / np.sqrt(d_model)
    ws = [rng.normal(scale=scale, size=(d_model, d_model)).astype(dtype) for _ in range(4)]
    return AttentionProjections(*ws, n_heads=n_heads)


@pytest.fixture
def toy_config():
    return ModelConfig(feature_dim=5, d_model=8, n_heads=2, n_layers=2, ffn_dim=12, vocab_size=4,
                       lstm_hidden=6, shift=3, precision="f64")


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail=""):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
