"""Shared test scaffolding: ensembles with scripted outputs."""

import numpy as np

from fmtd.forkgen import Ensemble, ForkConfig
from fmtd.nncore import ModelParams, TrainHyper, param_names_and_shapes
from fmtd.nncore.arch import ArchitectureSpec


def constant_model(label: int, classes: int = 4, side: int = 6) -> ModelParams:
    """Zero weights, a large bias on one class: predicts `label` for every input."""
    arch = ArchitectureSpec.parse(f"input {side}x{side}x1; softmax {classes}")
    tensors = {k: np.zeros(s, dtype=np.float32) for k, s in param_names_and_shapes(arch).items()}
    tensors["out/b"][label] = 10.0
    return ModelParams(arch, tensors)


def constant_ensemble(labels: list[int], classes: int = 4, side: int = 6) -> Ensemble:
    models = [constant_model(k, classes, side) for k in labels]
    return Ensemble(
        models, "stub", ForkConfig(n=len(labels), retrain_hyper=TrainHyper()),
        [1.0] * len(labels),
    )
