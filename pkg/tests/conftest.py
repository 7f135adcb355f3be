import numpy as np
import pytest

from rotadv import data, nn, training


@pytest.fixture(scope="session")
def small_dataset():
    return data.gen_synthetic(per_class=20, test_per_class=6, points_per_cloud=64, seed=3)


@pytest.fixture(scope="session")
def small_trained(small_dataset):
    """A quickly trained model on the small dataset; good enough to be non-trivial."""
    params = nn.init_params(nn.Architecture(h1=32, h2=64, h3=32), seed=0)
    return training.train_clean(params, small_dataset.train, training.TrainConfig(epochs=15, lr=0.02, batch_size=16), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
