import sys

import hypothesis
import numpy as np
import pytest

from parcelqc.nifti_io import LabelMap, Volume3D

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_labelmap(rng, shape=(12, 10, 9), n_labels=5, spacing=(1.0, 1.0, 1.0)):
    return LabelMap.from_array(rng.integers(0, n_labels + 1, size=shape), spacing)


def blocky_labelmap(rng, shape=(16, 16, 16), n_labels=4, block=4):
    """Label map made of constant blocks, so regions have real interiors."""
    coarse = rng.integers(0, n_labels + 1, size=tuple(-(-s // block) for s in shape))
    full = np.kron(coarse, np.ones((block,) * 3, dtype=coarse.dtype))
    return LabelMap.from_array(full[: shape[0], : shape[1], : shape[2]])


def random_volume(rng, shape=(12, 10, 9)):
    return Volume3D.from_array(rng.normal(100.0, 20.0, size=shape).astype(np.float32))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
