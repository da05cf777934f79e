import numpy as np
import pytest

from cfintro import cli
from cfintro.models import LinearClassifier

ACCEPTANCE_LINES: list[str] = []


def linear_fixture(seed: int, scale: float = 40.0):
    """Two-pixel linear classifier whose class-1 half-plane cuts the unit box,
    plus a query image clearly on the class-0 side."""
    rng = np.random.default_rng(seed)
    while True:
        n = rng.normal(size=2) * scale
        x0 = rng.uniform(0.3, 0.7, size=2)
        image = rng.uniform(0.1, 0.9, size=2)
        if n @ (image - x0) < -0.5:
            break
    W = np.array([[0.0, 0.0], n])
    b = np.array([0.0, -n @ x0])
    return LinearClassifier(W, b), image


def grid_oracle(clf: LinearClassifier, image, res: float = 1e-3) -> float:
    """Smallest L1 move inside [0, 1]^2 that makes class 1 the strict argmax,
    by brute force over a grid."""
    g = np.arange(0.0, 1.0 + res / 2, res)
    X, Y = np.meshgrid(g, g)
    logit = [clf.W[k, 0] * X + clf.W[k, 1] * Y + clf.b[k] for k in (0, 1)]
    d = np.abs(X - image[0]) + np.abs(Y - image[1])
    return float(d[logit[1] > logit[0]].min())


def train_glyph_models(seed: int = 0):
    """Train all four glyph models exactly as ``cfintro train`` does by default."""
    cfg = cli.resolve_config({"model": {"seed": seed}})
    train, test = cli.load_data(cfg)
    models = {}
    for kind in cli.MODEL_KINDS:
        models[kind] = cli.train_model(kind, train, test, cfg["model"][kind], seed,
                                       models.get("predictor"))
    return train, test, models


@pytest.fixture(scope="session")
def glyph_models():
    return train_glyph_models()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
