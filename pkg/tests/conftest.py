import numpy as np
import pytest
import torch

from xbld.decoygen import build_decoy_dataset, load_split
from xbld.modelzoo import ArchitectureSpec, ConvBlock, TrainConfig, build_model, fit_unrefined
from xbld.sources import synthetic_shapes

_ACCEPTANCE = []


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    status = "PASS" if call.excinfo is None else "FAIL"
    reason = "" if call.excinfo is None else str(call.excinfo.value).splitlines()[0][:160]
    _ACCEPTANCE.append((number, title, status, reason))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, reason in sorted(_ACCEPTANCE):
        line = f"[{status}] {number}. {title}"
        terminalreporter.write_line(line + (f" -- {reason}" if reason else ""))


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.fixture(scope="session")
def tiny_spec():
    return ArchitectureSpec((ConvBlock(8),), (32,), 4, (28, 28, 1), 1e-3)


@pytest.fixture(scope="session")
def synthetic_source():
    return synthetic_shapes(n_train=400, n_test=120, seed=11)


@pytest.fixture(scope="session")
def decoy_root(tmp_path_factory, synthetic_source):
    out = tmp_path_factory.mktemp("decoy")
    return build_decoy_dataset(synthetic_source, out, patch_size=4, strategy="threshold:0.1",
                               seed=5, name="shapes").root


@pytest.fixture(scope="session")
def train_split(decoy_root):
    return load_split(decoy_root, "train")


@pytest.fixture(scope="session")
def test_split(decoy_root):
    return load_split(decoy_root, "test")


@pytest.fixture(scope="session")
def trained(tiny_spec, train_split):
    return fit_unrefined(tiny_spec, train_split, TrainConfig(epochs=3, batch_size=32, seed=0))


@pytest.fixture
def toy_model():
    """Random float64 model small enough for finite differences."""
    spec = ArchitectureSpec((ConvBlock(4),), (3,), 2, (8, 8, 1), 1e-3)
    return build_model(spec, seed=0, device="cpu", dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
