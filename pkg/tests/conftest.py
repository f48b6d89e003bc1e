import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from valence_patching.metric import load_anchor_set  # noqa: E402
from valence_patching.model import ModelConfig, make_toy_model  # noqa: E402
from valence_patching.text import resolve_anchors  # noqa: E402


def toy_config(**kw):
    base = dict(n_layers=4, d_model=64, n_heads=4, n_kv_heads=4, d_mlp=128, vocab_size=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy64():
    """Seeded 4-layer, d_model=64, vocab=64 model in full precision."""
    return make_toy_model(7, toy_config(), precision="float64")


@pytest.fixture(scope="session")
def toy32():
    return make_toy_model(7, toy_config(), precision="float32")


@pytest.fixture(scope="session")
def toy_anchors(toy64):
    return resolve_anchors(toy64, load_anchor_set("toy"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
