import numpy as np
import pytest

from eenn_avcs.backbone import TrainConfig, extract_features, train_backbone
from eenn_avcs.bayes import fit_exits
from eenn_avcs.data import gen_wiggle


@pytest.fixture(scope="session")
def small_wiggle():
    """A short training run shared by tests that only need plausible features."""
    ds = gen_wiggle(300, seed=3)
    model = train_backbone(ds, TrainConfig(exits=4, hidden=8, epochs=60, lr=1e-2, seed=3))
    x_tr, y_tr = ds.subset("train")
    x_te, y_te = ds.subset("test")
    f_tr = extract_features(model, x_tr, "train")
    f_te = extract_features(model, x_te, "test")
    prior = [model.head_weights(t)[:, 0] for t in range(model.exits)]
    posts, searches = fit_exits(f_tr, y_tr, prior, search_kwargs={"grid_size": 9, "refine_rounds": 1})
    return {"data": ds, "model": model, "train": (f_tr, y_tr), "test": (f_te, y_te), "posteriors": posts}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
