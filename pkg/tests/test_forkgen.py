import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fmtd.forkgen import (
    ForkConfig,
    ForkGenerationError,
    generate_ensemble,
    load_ensemble,
    perturb_params,
    save_ensemble,
)
from fmtd.nncore import ModelParams, TrainHyper, init_params, model_hash
from fmtd.nncore.arch import ArchitectureSpec

ARCH = ArchitectureSpec.parse("input 6x6x1; conv 2 3x3 relu; fc 5 relu; softmax 3")


def test_zero_intensity_is_identity():
    model = init_params(ARCH, seed=1)
    out = perturb_params(model, 0.0, seed=99)
    for name in model.tensors:
        np.testing.assert_array_equal(out.tensors[name], model.tensors[name])


@settings(deadline=None, max_examples=25)
@given(w=st.floats(0.01, 2.0), seed=st.integers(0, 2**32 - 1))
def test_offsets_respect_bounds_inclusive(w, seed):
    model = init_params(ARCH, seed=3)
    out = perturb_params(model, w, seed)
    for name, before in model.tensors.items():
        lo = w * float(before.min())
        hi = w * float(before.max())
        diff = out.tensors[name].astype(np.float64) - before.astype(np.float64)
        assert diff.min() >= lo and diff.max() <= hi


def test_offsets_uniform_ks():
    # 10k-element tensor; offsets must pass a KS test against U[w*min, w*max]
    arch = ArchitectureSpec.parse("input 10x10x1; fc 100 relu; softmax 2")
    model = init_params(arch, seed=5)
    w = 0.1
    out = perturb_params(model, w, seed=11)
    before = model.tensors["fc1/w"]
    lo, hi = w * float(before.min()), w * float(before.max())
    diff = (out.tensors["fc1/w"].astype(np.float64) - before.astype(np.float64)).ravel()
    assert diff.size == 10_000
    result = stats.kstest(diff, stats.uniform(loc=lo, scale=hi - lo).cdf)
    assert result.pvalue > 0.01


def test_degenerate_tensor_gets_constant_offset():
    tensors = {
        "out/w": np.full((4, 2), 0.5, dtype=np.float32),
        "out/b": np.zeros(2, dtype=np.float32),
    }
    model = ModelParams(ArchitectureSpec.parse("input 2x2x1; softmax 2"), tensors)
    out = perturb_params(model, 0.2, seed=0)
    np.testing.assert_allclose(out.tensors["out/w"], 0.5 + 0.2 * 0.5, rtol=1e-6)
    np.testing.assert_array_equal(out.tensors["out/b"], np.zeros(2, dtype=np.float32))


def test_distinct_seeds_distinct_streams():
    model = init_params(ARCH, seed=1)
    a = perturb_params(model, 0.2, seed=100)
    b = perturb_params(model, 0.2, seed=101)
    assert any(
        not np.array_equal(a.tensors[n], b.tensors[n]) for n in model.tensors
    )
    config = ForkConfig(n=20, w=0.2, master_seed=7)
    seeds = [config.fork_seed(i) for i in range(20)]
    assert len(set(seeds)) == 20


def test_architecture_preserved_and_deterministic():
    model = init_params(ARCH, seed=2)
    a = perturb_params(model, 0.3, seed=8)
    b = perturb_params(model, 0.3, seed=8)
    assert a.arch == model.arch
    for name in model.tensors:
        np.testing.assert_array_equal(a.tensors[name], b.tensors[name])


def test_ensemble_models_distinct(tiny_ensemble):
    hashes = {model_hash(m) for m in tiny_ensemble.models}
    assert len(hashes) == 3
    assert len(tiny_ensemble.per_model_val_accuracy) == 3


def test_ensemble_deterministic(tiny_ensemble, tiny_model, tiny_corpus, tiny_hyper):
    train_set, val_set, _ = tiny_corpus
    again = generate_ensemble(
        tiny_model, ForkConfig(n=3, w=0.2, master_seed=42, retrain_hyper=tiny_hyper), train_set, val_set
    )
    for m1, m2 in zip(tiny_ensemble.models, again.models):
        assert model_hash(m1) == model_hash(m2)


def test_prefix_equals_smaller_generation(tiny_ensemble, tiny_model, tiny_corpus, tiny_hyper):
    train_set, val_set, _ = tiny_corpus
    two = generate_ensemble(
        tiny_model, ForkConfig(n=2, w=0.2, master_seed=42, retrain_hyper=tiny_hyper), train_set, val_set
    )
    prefix = tiny_ensemble.prefix(2)
    for m1, m2 in zip(two.models, prefix.models):
        assert model_hash(m1) == model_hash(m2)
    assert prefix.config.n == 2


def test_ensemble_round_trip(tiny_ensemble, tmp_path):
    ensemble = tiny_ensemble
    save_ensemble(ensemble, tmp_path / "ens")
    loaded = load_ensemble(tmp_path / "ens")
    assert loaded.base_hash == ensemble.base_hash
    assert loaded.config == ensemble.config
    assert loaded.per_model_val_accuracy == pytest.approx(ensemble.per_model_val_accuracy, abs=1e-6)
    for m1, m2 in zip(ensemble.models, loaded.models):
        assert model_hash(m1) == model_hash(m2)


def test_fork_failure_carries_index(tiny_corpus):
    train_set, val_set, _ = tiny_corpus
    base = init_params(ArchitectureSpec.parse("input 12x12x1; fc 8 relu; softmax 4"), seed=0)
    bad_hyper = TrainHyper(learning_rate=1e30, batch_size=32, max_epochs=3)
    with pytest.raises(ForkGenerationError) as err:
        with np.errstate(over="ignore", invalid="ignore"):
            generate_ensemble(
                base, ForkConfig(n=2, w=0.1, master_seed=1, retrain_hyper=bad_hyper), train_set, val_set
            )
    assert err.value.index == 0


def test_fork_config_validation():
    with pytest.raises(ValueError):
        ForkConfig(n=0)
    with pytest.raises(ValueError):
        ForkConfig(w=-0.1)
