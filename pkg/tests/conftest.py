import numpy as np
import pytest

from conservattack import data, nn

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_donut():
    """2,000 events, min-max normalized and split 60/20/20."""
    ds = data.generate_donut(data.DonutConfig(n_signal=1000, n_background=1000, seed=7), normalization="minmax")
    return data.split(ds, seed=7)


@pytest.fixture(scope="session")
def donut_model(small_donut):
    tr, va = small_donut.split_subset("train"), small_donut.split_subset("val")
    model, _ = nn.train(nn.build("donut", seed=7), tr.features, tr.labels,
                        nn.TrainConfig(epochs=40, seed=7), va.features, va.labels)
    return model


@pytest.fixture(scope="session")
def tiny_model():
    """A small untrained stack; enough for gradient-direction and plumbing tests."""
    return nn.MlpModel(nn.stack_spec(3, hidden=(8, 4)), seed=1)


@pytest.fixture(scope="session")
def donut_attack(small_donut, donut_model):
    """The donut_test configuration over all 2,000 events (nc on, opt_af off)."""
    from conservattack import attack

    cfg = attack.preset("donut_test")
    return cfg, attack.attack(donut_model, small_donut, cfg)
