import numpy as np
import pytest

from aadit.attention import AttentionConfig
from aadit.synth import DatasetConfig, generate
from aadit.trainer import TrainConfig

TINY_DATA = DatasetConfig(r_x=6, n_classes=4, n_domains=3, train_per_domain=6, test_per_domain=3,
                          T=9, segment_mean=3.0, noise=0.5, shift=2.0, seed=11)


def tiny_config(mode="aadit", **kw):
    att = kw.pop("attention", AttentionConfig(2, 2, 8, "additive"))
    base = dict(mode=mode, lam=0.5, mu=0.05, split_depth=2, epochs=2, batch_size=3, seed=5,
                r_x=6, r_f=5, hidden=7, y_hidden=(6,), d_hidden=(6,), n_classes=4, n_domains=3,
                attention=att)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate(TINY_DATA)


def randomize(model, seed=0, scale=0.5):
    """Replace zero biases / small gates so every gradient path is exercised."""
    rng = np.random.default_rng(seed)
    for p in model.params():
        p.value[...] = rng.normal(scale=scale, size=p.shape)
    return model


# one line per acceptance criterion, repeated in the terminal summary
CRITERIA_LINES = []


def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    CRITERIA_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
