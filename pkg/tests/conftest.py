import numpy as np
import pytest

from l2d.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def f64():
    return t64


TINY_SCENE = dict(num_classes=4, height=16, width=16, mean_objects=1.8, cell=8)
TINY_MODEL = dict(input_size=[16, 16, 3], widths=[4, 8], embed_dim=8, num_heads=2, num_classes=4)


def tiny_config(**train):
    """Experiment config small enough for a few seconds of CPU."""
    t = dict(batch_size=8, epochs=2, max_lr=3e-3)
    t.update(train)
    return {
        "scene": TINY_SCENE,
        "n_train": 48,
        "n_test": 16,
        "teacher": dict(TINY_MODEL, widths=[8, 8]),
        "student": TINY_MODEL,
        "train": t,
    }


@pytest.fixture(scope="session")
def tiny_data():
    from l2d.data import SceneSpec, generate_dataset
    return generate_dataset(SceneSpec(**TINY_SCENE), 48, 16)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
