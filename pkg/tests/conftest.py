"""Shared fixtures: the desk-scale dataset and trained models.

Training happens once per session; everything downstream is deterministic,
so tests that freeze expected values stay stable across runs.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from gcmkit import TrainConfig, build_model, synthesize_dataset, train

# main desk fixture: low-amplitude templates + noise, so that L-inf 8/255
# gradient attacks genuinely break the vanilla model
DESK_SEED = 7
DESK_TRAIN_N = 12000
DESK_TEST_N = 10000


@pytest.fixture(scope="session")
def desk():
    train_ds = synthesize_dataset(DESK_TRAIN_N, seed=DESK_SEED)
    test_ds = synthesize_dataset(DESK_TEST_N, seed=DESK_SEED + 1)
    model = build_model({"arch": "smallcnn"}, seed=0)
    train(model, train_ds, TrainConfig(learning_rate=0.2, epochs=3, batch_size=64, seed=0))
    return SimpleNamespace(train=train_ds, test=test_ds, model=model)


@pytest.fixture(scope="session")
def desk_easy():
    """High-margin variant: the concealed model resists the full attack
    budget on every clean-correct sample, which is the regime the magnitude
    and frequency ablations run in."""
    train_ds = synthesize_dataset(6000, seed=DESK_SEED, amplitude=0.25, noise=0.02, max_shift=1)
    test_ds = synthesize_dataset(2000, seed=DESK_SEED + 1, amplitude=0.25, noise=0.02, max_shift=1)
    model = build_model({"arch": "smallcnn"}, seed=0)
    train(model, train_ds, TrainConfig(learning_rate=0.3, epochs=3, batch_size=64, seed=0))
    return SimpleNamespace(train=train_ds, test=test_ds, model=model)


def rel_err(a, b) -> float:
    """Max-norm relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
