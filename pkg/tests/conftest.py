import numpy as np
import pytest

from fmtd.data import LabeledDataset, SplitSpec, SyntheticSpec, make_synthetic, split
from fmtd.nncore import StopRule, TrainHyper, init_params, train
from fmtd.nncore.arch import ArchitectureSpec

TINY_ARCH = "input 12x12x1; conv 4 3x3 relu; pool 2x2; fc 16 relu; softmax 4"


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small 4-class corpus for fast end-to-end tests."""
    full = make_synthetic(SyntheticSpec(classes=4, per_class=60, image_side=12, seed=101))
    train_set, val_set = split(full, SplitSpec(validation_count=48, seed=2))
    test_set = make_synthetic(SyntheticSpec(classes=4, per_class=25, image_side=12, seed=707))
    return train_set, val_set, test_set


@pytest.fixture(scope="session")
def tiny_hyper():
    return TrainHyper(learning_rate=0.05, batch_size=64, max_epochs=25, plateau_patience=5)


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus, tiny_hyper):
    train_set, val_set, _ = tiny_corpus
    arch = ArchitectureSpec.parse(TINY_ARCH)
    model, history = train(
        init_params(arch, seed=9), train_set, val_set, tiny_hyper, StopRule("plateau"), seed=13
    )
    assert history.best_val_accuracy > 0.9, "tiny fixture model failed to train"
    return model


@pytest.fixture(scope="session")
def tiny_ensemble(tiny_model, tiny_corpus, tiny_hyper):
    from fmtd.forkgen import ForkConfig, generate_ensemble

    train_set, val_set, _ = tiny_corpus
    config = ForkConfig(n=3, w=0.2, master_seed=42, retrain_hyper=tiny_hyper)
    return generate_ensemble(tiny_model, config, train_set, val_set)
