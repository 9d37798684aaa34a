"""Fork-model generation: perturb the base model's parameters and retrain.

Each parameter tensor M gets independent per-element offsets drawn
uniformly from [w*min(M), w*max(M)], with min/max taken over the original
tensor.  The perturbed model is retrained to the validation-plateau rule;
N such forks with independently derived seeds form an ensemble.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .kvformat import read_kv, write_kv
from .nncore import (
    ModelParams,
    StopRule,
    TrainHistory,
    TrainHyper,
    load_model,
    model_hash,
    save_model,
    train,
)
from .rng import derive_seed, generator


class ForkGenerationError(RuntimeError):
    """A fork failed to train; carries the failing fork index."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"fork {index} failed: {cause}")
        self.index = index


@dataclass(frozen=True)
class ForkConfig:
    n: int = 20
    w: float = 0.2
    master_seed: int = 0
    retrain_hyper: TrainHyper = field(default_factory=TrainHyper)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.w < 0:
            raise ValueError("perturbation intensity must be >= 0")

    def fork_seed(self, index: int) -> int:
        return derive_seed(self.master_seed, "fork", index)


@dataclass
class Ensemble:
    models: list[ModelParams]
    base_hash: str
    config: ForkConfig
    per_model_val_accuracy: list[float]
    wall_time_s: float = 0.0

    def __post_init__(self) -> None:
        if len(self.models) != self.config.n:
            raise ValueError(f"{len(self.models)} models for n={self.config.n}")
        archs = {m.arch for m in self.models}
        if len(archs) > 1:
            raise ValueError("fork models disagree on architecture")

    @property
    def n(self) -> int:
        return len(self.models)

    def prefix(self, k: int) -> "Ensemble":
        """First k forks as their own ensemble.

        Fork seeds depend only on (master_seed, index), so this equals the
        ensemble that generate_ensemble would produce with n=k.
        """
        if not 1 <= k <= self.n:
            raise ValueError(f"prefix size {k} outside [1, {self.n}]")
        return Ensemble(
            self.models[:k],
            self.base_hash,
            replace(self.config, n=k),
            self.per_model_val_accuracy[:k],
            self.wall_time_s,
        )


def perturb_params(model: ModelParams, w: float, seed: int) -> ModelParams:
    """Additive uniform noise per tensor, offsets in [w*min(M), w*max(M)] inclusive."""
    if w < 0:
        raise ValueError("perturbation intensity must be >= 0")
    if w == 0.0:
        out = model.copy()
        out.provenance = model.provenance
        return out
    rng = generator(seed, "perturb")
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.tensors.items():
        lo = w * float(t.min())
        hi = w * float(t.max())
        offsets = rng.uniform(lo, hi, size=t.shape) if hi > lo else np.full(t.shape, lo)
        t64 = t.astype(np.float64)
        out = (t64 + offsets).astype(np.float32)
        # float32 rounding may push an offset epsilon outside the interval; nudge back
        for _ in range(3):
            diff = out.astype(np.float64) - t64
            high = diff > hi
            low = diff < lo
            if not (high.any() or low.any()):
                break
            out[high] = np.nextafter(out[high], np.float32(-np.inf))
            out[low] = np.nextafter(out[low], np.float32(np.inf))
        tensors[name] = out
    return ModelParams(model.arch, tensors, model.provenance)


def fork_model(
    base: ModelParams,
    w: float,
    seed: int,
    train_set,
    val_set,
    hyper: TrainHyper,
) -> tuple[ModelParams, TrainHistory]:
    """Perturb the base with intensity w, retrain to the plateau rule."""
    perturbed = perturb_params(base, w, seed)
    model, history = train(
        perturbed, train_set, val_set, hyper, StopRule("plateau"), seed=derive_seed(seed, "retrain")
    )
    model.provenance = f"fork of {model_hash(base)[:12]} w={w} seed={seed}"
    return model, history


def generate_ensemble(base: ModelParams, config: ForkConfig, train_set, val_set) -> Ensemble:
    """Generate config.n forks independently; all randomness derives from master_seed."""
    started = time.perf_counter()
    models: list[ModelParams] = []
    accuracies: list[float] = []
    for i in range(config.n):
        try:
            model, history = fork_model(
                base, config.w, config.fork_seed(i), train_set, val_set, config.retrain_hyper
            )
        except Exception as exc:
            raise ForkGenerationError(i, exc) from exc
        models.append(model)
        accuracies.append(history.best_val_accuracy)
    return Ensemble(
        models, model_hash(base), config, accuracies, wall_time_s=time.perf_counter() - started
    )


MANIFEST_NAME = "ensemble.manifest"


def save_ensemble(ensemble: Ensemble, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pairs: dict[str, object] = {
        "base_hash": ensemble.base_hash,
        "n": ensemble.config.n,
        "w": ensemble.config.w,
        "master_seed": ensemble.config.master_seed,
        "wall_time_s": f"{ensemble.wall_time_s:.3f}",
    }
    hyper = ensemble.config.retrain_hyper
    for key in (
        "learning_rate",
        "momentum",
        "lr_decay",
        "momentum_decay",
        "decay_interval_epochs",
        "dropout_rate",
        "batch_size",
        "max_epochs",
        "plateau_patience",
    ):
        pairs[f"hyper.{key}"] = getattr(hyper, key)
    for i, (model, acc) in enumerate(zip(ensemble.models, ensemble.per_model_val_accuracy)):
        filename = f"fork_{i:03d}.fmtd"
        save_model(model, d / filename)
        pairs[f"fork.{i}.file"] = filename
        pairs[f"fork.{i}.seed"] = ensemble.config.fork_seed(i)
        pairs[f"fork.{i}.val_accuracy"] = f"{acc:.6f}"
    write_kv(d / MANIFEST_NAME, pairs)


def load_ensemble(directory) -> Ensemble:
    d = Path(directory)
    kv = read_kv(d / MANIFEST_NAME)
    n = int(kv["n"])
    hyper = TrainHyper(
        learning_rate=float(kv["hyper.learning_rate"]),
        momentum=float(kv["hyper.momentum"]),
        lr_decay=float(kv["hyper.lr_decay"]),
        momentum_decay=float(kv["hyper.momentum_decay"]),
        decay_interval_epochs=int(kv["hyper.decay_interval_epochs"]),
        dropout_rate=float(kv["hyper.dropout_rate"]),
        batch_size=int(kv["hyper.batch_size"]),
        max_epochs=int(kv["hyper.max_epochs"]),
        plateau_patience=int(kv["hyper.plateau_patience"]),
    )
    config = ForkConfig(n=n, w=float(kv["w"]), master_seed=int(kv["master_seed"]), retrain_hyper=hyper)
    models = [load_model(d / kv[f"fork.{i}.file"]) for i in range(n)]
    accs = [float(kv[f"fork.{i}.val_accuracy"]) for i in range(n)]
    return Ensemble(models, kv["base_hash"], config, accs, float(kv.get("wall_time_s", 0.0)))
