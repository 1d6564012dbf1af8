import numpy as np
import pytest

from coatcbm.synth import SynthConfig, generate
from coatcbm.tensorio import ConceptBank, Dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_bank():
    T = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=np.float32)
    return ConceptBank(["red", "round", "furry"], T, ["apple", "cat"], {0: [0, 1], 1: [2]})


@pytest.fixture(scope="session")
def small_synth():
    """Three-class problem that trains in well under a second."""
    cfg = SynthConfig(seed=3, n_classes=3, concepts_per_class=2, d=8, d_c=4, n_patches=6,
                      train_per_class=12, test_per_class=6)
    return cfg, generate(cfg)


def make_dataset(rng, m, n_patches, dim, n_classes):
    feats = rng.standard_normal((m, n_patches + 1, dim)).astype(np.float32)
    labels = rng.integers(0, n_classes, size=m)
    return Dataset(feats, labels, n_classes)
