"""Shared fixtures: cached desk models and datasets.

Models are trained once and cached under ``$ADVLATENT_DATA/models`` keyed
by their training config, so only the first run pays for training.
"""

import pytest
import torch

from advlatent import datasets
from advlatent.evalcli.experiments import MNIST_CNN, train_spec
from advlatent.evalcli.pipeline import dataset_for, resplit, trained_model


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow on first run)")


@pytest.fixture(scope="session")
def mnist_available():
    if not datasets.available("mnist"):
        try:
            datasets.fetch_mnist()
        except Exception as exc:  # no network
            pytest.skip(f"MNIST unavailable: {exc}")
    return True


@pytest.fixture(scope="session")
def mnist_cnn_model(mnist_available):
    """The MNIST CNN split after its 2nd conv layer, plus its package manifest."""
    torch.set_num_threads(1)
    base, manifest = trained_model(train_spec(MNIST_CNN))
    return resplit(base, 2), manifest


@pytest.fixture(scope="session")
def mnist_data(mnist_available):
    return dataset_for("mnist", (1, 28, 28))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
