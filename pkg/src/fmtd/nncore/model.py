"""Parameterized classifier: container type, inference, and gradients.

The classifier maps an image in ``[0, 1]^(h*w*c)`` to class logits (the
inputs of the final softmax) and probabilities.  Parameter and input
gradients come from manual backpropagation over the fixed layer set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arch import ArchitectureSpec, Conv, FullyConnected, MaxPool, Softmax
from . import layers as L
from ..rng import generator


class ShapeError(ValueError):
    """Input/parameter shape inconsistent with the architecture; names the layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class LabelError(ValueError):
    """Class index outside the architecture's class range."""


def param_names_and_shapes(arch: ArchitectureSpec) -> dict[str, tuple[int, ...]]:
    """Expected parameter tensors, in layer order: conv1/w, conv1/b, ..., out/w, out/b."""
    shapes: dict[str, tuple[int, ...]] = {}
    shape: tuple[int, ...] = (arch.input_h, arch.input_w, arch.input_c)
    n_conv = n_fc = 0
    for layer, out_shape in zip(arch.layers, arch.layer_shapes()):
        if isinstance(layer, Conv):
            n_conv += 1
            cin = shape[2]
            shapes[f"conv{n_conv}/w"] = (layer.kernel_h, layer.kernel_w, cin, layer.filters)
            shapes[f"conv{n_conv}/b"] = (layer.filters,)
        elif isinstance(layer, FullyConnected):
            n_fc += 1
            fan_in = int(np.prod(shape))
            shapes[f"fc{n_fc}/w"] = (fan_in, layer.units)
            shapes[f"fc{n_fc}/b"] = (layer.units,)
        elif isinstance(layer, Softmax):
            fan_in = int(np.prod(shape))
            shapes["out/w"] = (fan_in, layer.classes)
            shapes["out/b"] = (layer.classes,)
        shape = out_shape
    return shapes


@dataclass
class ModelParams:
    """Architecture plus named float32 parameter tensors and a lineage note."""

    arch: ArchitectureSpec
    tensors: dict[str, np.ndarray]
    provenance: str = ""

    def __post_init__(self) -> None:
        expected = param_names_and_shapes(self.arch)
        if list(self.tensors) != list(expected):
            raise ShapeError("model", f"tensor names {list(self.tensors)} != expected {list(expected)}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ShapeError(name, f"shape {t.shape} != expected {shape}")
            if t.dtype != np.float32:
                raise ShapeError(name, f"dtype {t.dtype} != float32")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()}, self.provenance)


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    probs: np.ndarray
    label: int


@dataclass(frozen=True)
class ObjectiveSpec:
    """Scalar objective of the logits, differentiable through the network.

    ``cross_entropy`` is the negative log-likelihood of ``label``;
    ``cw_margin`` is max(max_{j != label} z_j - z_label, -kappa), the
    clamped attack margin toward ``label``.
    """

    kind: str
    label: int
    kappa: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("cross_entropy", "cw_margin"):
            raise ValueError(f"unknown objective kind {self.kind!r}")


def init_params(arch: ArchitectureSpec, seed: int, provenance: str = "") -> ModelParams:
    """Uniform [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))] weights, zero biases."""
    rng = generator(seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_names_and_shapes(arch).items():
        if name.endswith("/b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:
            kh, kw, cin, f = shape
            fan_in, fan_out = kh * kw * cin, kh * kw * f
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return ModelParams(arch, tensors, provenance)


def _check_batch(arch: ArchitectureSpec, batch: np.ndarray) -> np.ndarray:
    if batch.ndim == 3:
        batch = batch[None, ...]
    if batch.ndim != 4 or batch.shape[1:] != (arch.input_h, arch.input_w, arch.input_c):
        raise ShapeError(
            "input",
            f"batch shape {batch.shape} incompatible with input "
            f"{arch.input_h}x{arch.input_w}x{arch.input_c}",
        )
    return batch.astype(np.float64, copy=False)


def _forward_full(
    model: ModelParams,
    batch: np.ndarray,
    *,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
):
    """Run all layers; returns (logits, caches).  Dropout fires only on fc layers."""
    x = batch
    caches: list[tuple[str, object]] = []
    n_conv = n_fc = 0
    for layer in model.arch.layers:
        if isinstance(layer, Conv):
            n_conv += 1
            w = model.tensors[f"conv{n_conv}/w"].astype(np.float64)
            b = model.tensors[f"conv{n_conv}/b"].astype(np.float64)
            x, cache = L.conv_forward(x, w, b, layer.relu)
            caches.append(("conv", cache))
        elif isinstance(layer, MaxPool):
            x, cache = L.pool_forward(x, layer.pool_h, layer.pool_w)
            caches.append(("pool", cache))
        elif isinstance(layer, FullyConnected):
            n_fc += 1
            w = model.tensors[f"fc{n_fc}/w"].astype(np.float64)
            b = model.tensors[f"fc{n_fc}/b"].astype(np.float64)
            x, cache = L.dense_forward(x, w, b, layer.relu, dropout_rate, dropout_rng)
            caches.append(("fc", cache))
        else:  # Softmax head: dense projection, no relu or dropout
            w = model.tensors["out/w"].astype(np.float64)
            b = model.tensors["out/b"].astype(np.float64)
            x, cache = L.dense_forward(x, w, b, relu=False)
            caches.append(("out", cache))
    return x, caches


def _backward_full(model: ModelParams, caches, dlogits: np.ndarray):
    """Propagate dlogits back; returns (param grads in float64, dinput)."""
    grads: dict[str, np.ndarray] = {}
    n_conv = sum(isinstance(l, Conv) for l in model.arch.layers)
    n_fc = sum(isinstance(l, FullyConnected) for l in model.arch.layers)
    d = dlogits
    for kind, cache in reversed(caches):
        if kind == "out":
            dw, db, d = L.dense_backward(d, cache)
            grads["out/w"], grads["out/b"] = dw, db
        elif kind == "fc":
            dw, db, d = L.dense_backward(d, cache)
            grads[f"fc{n_fc}/w"], grads[f"fc{n_fc}/b"] = dw, db
            n_fc -= 1
        elif kind == "pool":
            d = L.pool_backward(d, cache)
        else:
            dw, db, d = L.conv_backward(d, cache)
            grads[f"conv{n_conv}/w"], grads[f"conv{n_conv}/b"] = dw, db
            n_conv -= 1
    return {name: grads[name] for name in model.tensors}, d


def _backward_input(caches, dlogits: np.ndarray) -> np.ndarray:
    """Input gradient only; used in attack inner loops where dw/db are dead weight."""
    d = dlogits
    for kind, cache in reversed(caches):
        if kind in ("out", "fc"):
            d = L.dense_backward_input(d, cache)
        elif kind == "pool":
            d = L.pool_backward(d, cache)
        else:
            d = L.conv_backward_input(d, cache)
    return d


def logits_of(model: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Inference logits for a batch; dropout disabled."""
    x = _check_batch(model.arch, batch)
    logits, _ = _forward_full(model, x)
    return logits


def smoothness_margin(model: ModelParams, batch: np.ndarray) -> float:
    """Distance to the nearest piecewise-linear kink along the forward pass.

    Minimum over all relu pre-activations of |z| and all pooling windows of
    (max - second max).  Finite-difference gradient checks are only valid
    when this margin comfortably exceeds the probe step h.
    """
    x = _check_batch(model.arch, batch)
    margin = np.inf
    n_conv = n_fc = 0
    for layer in model.arch.layers:
        if isinstance(layer, Conv):
            n_conv += 1
            w = model.tensors[f"conv{n_conv}/w"].astype(np.float64)
            b = model.tensors[f"conv{n_conv}/b"].astype(np.float64)
            pre, _ = L.conv_forward(x, w, b, relu=False)
            if layer.relu:
                margin = min(margin, float(np.abs(pre).min()))
                x = np.maximum(pre, 0.0)
            else:
                x = pre
        elif isinstance(layer, MaxPool):
            n, h, wd, c = x.shape
            oh, ow = h // layer.pool_h, wd // layer.pool_w
            windows = (
                x[:, : oh * layer.pool_h, : ow * layer.pool_w, :]
                .reshape(n, oh, layer.pool_h, ow, layer.pool_w, c)
                .transpose(0, 1, 3, 2, 4, 5)
                .reshape(n, oh, ow, layer.pool_h * layer.pool_w, c)
            )
            if windows.shape[3] > 1:
                ordered = np.sort(windows, axis=3)
                top1, top2 = ordered[:, :, :, -1], ordered[:, :, :, -2]
                # an all-zero window (relu-clamped) is locally constant, not a kink
                gaps = np.where(top1 == 0.0, np.inf, top1 - top2)
                margin = min(margin, float(gaps.min()))
            x, _ = L.pool_forward(x, layer.pool_h, layer.pool_w)
        elif isinstance(layer, FullyConnected):
            n_fc += 1
            w = model.tensors[f"fc{n_fc}/w"].astype(np.float64)
            b = model.tensors[f"fc{n_fc}/b"].astype(np.float64)
            pre, _ = L.dense_forward(x, w, b, relu=False)
            if layer.relu:
                margin = min(margin, float(np.abs(pre).min()))
                x = np.maximum(pre, 0.0)
            else:
                x = pre
        else:
            break
    return margin


def forward(model: ModelParams, batch: np.ndarray) -> list[Prediction]:
    """One Prediction per row; deterministic, ties broken toward the lowest class index."""
    logits = logits_of(model, batch)
    probs = L.softmax_probs(logits)
    return [
        Prediction(logits=logits[i], probs=probs[i], label=int(np.argmax(probs[i])))
        for i in range(logits.shape[0])
    ]


def predict_labels(model: ModelParams, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax labels for an arbitrarily large batch, evaluated in chunks."""
    batch = _check_batch(model.arch, batch)
    out = np.empty(batch.shape[0], dtype=np.int64)
    for lo in range(0, batch.shape[0], batch_size):
        logits, _ = _forward_full(model, batch[lo : lo + batch_size])
        out[lo : lo + batch_size] = logits.argmax(axis=1)
    return out


def _check_labels(arch: ArchitectureSpec, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= arch.classes):
        raise LabelError(f"labels outside [0, {arch.classes})")
    return labels


def loss_and_param_gradients(
    model: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    *,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and gradients mirroring the model tensors."""
    x = _check_batch(model.arch, batch)
    y = _check_labels(model.arch, labels)
    if y.shape != (x.shape[0],):
        raise ShapeError("labels", f"{y.shape} labels for {x.shape[0]} rows")
    logits, caches = _forward_full(model, x, dropout_rate=dropout_rate, dropout_rng=dropout_rng)
    n = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logsumexp - logits[np.arange(n), y]))
    dlogits = L.softmax_probs(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads, _ = _backward_full(model, caches, dlogits)
    return loss, grads


def _objective_dlogits(objective: ObjectiveSpec, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row objective values and d(objective)/d(logits) for a logits batch."""
    n, classes = logits.shape
    if objective.label < 0 or objective.label >= classes:
        raise LabelError(f"objective label {objective.label} outside [0, {classes})")
    d = np.zeros_like(logits)
    if objective.kind == "cross_entropy":
        y = objective.label
        shifted = logits - logits.max(axis=1, keepdims=True)
        values = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1) - logits[:, y]
        d[:] = L.softmax_probs(logits)
        d[:, y] -= 1.0
        return values, d
    t = objective.label
    others = np.delete(np.arange(classes), t)
    rival_pos = logits[:, others].argmax(axis=1)
    rival = others[rival_pos]
    margin = logits[np.arange(n), rival] - logits[:, t]
    values = np.maximum(margin, -objective.kappa)
    live = margin > -objective.kappa  # clamped rows get zero gradient
    rows = np.arange(n)[live]
    d[rows, rival[live]] = 1.0
    d[rows, t] = -1.0
    return values, d


def input_gradient(model: ModelParams, x: np.ndarray, objective: ObjectiveSpec) -> np.ndarray:
    """Gradient of the objective with respect to a single input image."""
    single = x.ndim == 3
    batch = _check_batch(model.arch, x)
    logits, caches = _forward_full(model, batch)
    _, dlogits = _objective_dlogits(objective, logits)
    dx = _backward_input(caches, dlogits)
    return dx[0] if single else dx
