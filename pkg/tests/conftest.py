import numpy as np
import pytest

from artifactqc.synthetic import blob_dataset


class IndexedBase:
    """Base model whose "samples" are row indices into a fixed probability table."""

    def __init__(self, table, name="base"):
        self.table = np.asarray(table, dtype=np.float64)
        self.name = name

    def predict_proba(self, samples):
        idx = np.asarray(samples).astype(int).ravel()
        return self.table[idx]

    def fingerprint(self):
        return f"{self.name}:{hash(self.table.tobytes()) & 0xFFFFFFFF:x}"


def one_hot(labels, n_classes=3):
    return np.eye(n_classes)[np.asarray(labels)]


def noisy_base(labels, accuracy, rng, n_classes=3):
    """One-hot votes that equal the label with probability ``accuracy``, else a uniformly wrong class."""
    labels = np.asarray(labels)
    correct = rng.random(len(labels)) < accuracy
    wrong = (labels + rng.integers(1, n_classes, len(labels))) % n_classes
    return one_hot(np.where(correct, labels, wrong), n_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blob_tiles():
    return blob_dataset(8, size=64, seed=3)


# Overfit settings: one or two tiles per step so 200 epochs give enough updates
OVERFIT_BATCH = {"resunet_pp": 2, "double_unet": 1}


def train_overfit(architecture, images, masks):
    import time

    from artifactqc.core import PlateauConfig, RunConfig
    from artifactqc.segmentation.models import build_model
    from artifactqc.segmentation.training import train_segmenter

    config = RunConfig(
        seed=0,
        batch_size=OVERFIT_BATCH[architecture],
        epochs=200,
        learning_rate=1e-3,
        optimizer="rmsprop",
        loss="dice_coef_loss",
        plateau=PlateauConfig(0.1, 10),
        early_stop_patience=200,
        model=architecture,
        width_scale=0.125,
    )
    model = build_model(architecture, images.shape[1:], 0.125, seed=0)
    start = time.perf_counter()
    model, history = train_segmenter(model, (images, masks), (images, masks), config)
    return model, history, time.perf_counter() - start


@pytest.fixture(scope="session")
def overfit_data():
    return blob_dataset(8, size=64, seed=0)


@pytest.fixture(scope="session")
def overfit_resunet(overfit_data):
    return train_overfit("resunet_pp", *overfit_data)


@pytest.fixture(scope="session")
def overfit_double_unet(overfit_data):
    return train_overfit("double_unet", *overfit_data)


@pytest.fixture(scope="session")
def desk_stack():
    """Stack of three desk-substitute severity classifiers trained on 256-px tiles."""
    from artifactqc.severity import SeverityClassifier
    from artifactqc.stacking import StackedSeverityClassifier
    from artifactqc.synthetic import severity_dataset

    X, y = severity_dataset(40, size=256, seed=0)
    bases = [
        SeverityClassifier(b, "rmsprop", epochs=25, batch_size=16, learning_rate=1e-2).fit(X, y)
        for b in ("MobileNet", "VGG16", "Xception")
    ]
    return StackedSeverityClassifier(bases, "logistic_regression", cv=None).fit(X, y)


# Acceptance outcomes, filled by tests/test_acceptance.py and printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
