from pathlib import Path

import numpy as np
import pytest

from snprune.evalharness import fit_inputs, load_dataset
from snprune.model import load_model

DIGITS = Path(__file__).parent / "fixtures" / "digits"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def digits_paths():
    return {
        "model": DIGITS / "mlp.snm",
        "train_images": DIGITS / "train-images-idx3-ubyte",
        "train_labels": DIGITS / "train-labels-idx1-ubyte",
        "test_images": DIGITS / "t10k-images-idx3-ubyte",
        "test_labels": DIGITS / "t10k-labels-idx1-ubyte",
    }


@pytest.fixture(scope="session")
def digits_net(digits_paths):
    return load_model(digits_paths["model"])


@pytest.fixture(scope="session")
def digits_train(digits_paths):
    return load_dataset(digits_paths["train_images"], labels_path=digits_paths["train_labels"],
                        num_classes=10, split="calibration")


@pytest.fixture(scope="session")
def digits_test(digits_paths):
    return load_dataset(digits_paths["test_images"], labels_path=digits_paths["test_labels"], num_classes=10)


@pytest.fixture(scope="session")
def digits_full_grams(digits_net, digits_train):
    from snprune.pruning import collect_grams

    return collect_grams(digits_net, fit_inputs(digits_train, digits_net))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
