"""Ensemble decision layer: consistency detection and majority thwarting.

An input goes to the fork models; if the modal label's share of the outputs
is at least the threshold the input is ruled clean, otherwise adversarial.
The fused label is the modal label (ties to the lowest class index).  In
autonomous mode the fused label is always the final answer; in
human-in-the-loop mode a detected attack is instead resolved by a human
oracle.  The serial variant queries models one at a time, starting with
three, and stops early once the running modal fraction reaches its
threshold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .forkgen import Ensemble
from .nncore import predict_labels
from .rng import generator


class OracleError(KeyError):
    """Human oracle queried for an input it has no label for."""


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    t: float = 1.0  # full-fusion detection threshold
    ts: float = 1.0  # serial early-stop threshold
    mode: str = "autonomous"  # or "human-in-the-loop"
    serial_seed: int = 0

    def __post_init__(self) -> None:
        for name, value in (("t", self.t), ("ts", self.ts)):
            if not 0.0 < value <= 1.0:
                raise DefenseConfigError(f"{name} must be in (0, 1], got {value}")
        if self.mode not in ("autonomous", "human-in-the-loop"):
            raise DefenseConfigError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class DefenseOutcome:
    verdict: str  # "clean" | "adversarial"
    fused_label: int
    per_model_labels: tuple[int, ...]
    models_used: int
    mode: str
    human_invoked: bool
    final_label: int


class HumanOracle:
    """Perfect human stand-in: maps input images to their ground-truth labels."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self._table = {
            self._key(images[i]): int(labels[i]) for i in range(images.shape[0])
        }

    @staticmethod
    def _key(image: np.ndarray) -> bytes:
        return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).digest()

    def __len__(self) -> int:
        return len(self._table)

    def label_of(self, image: np.ndarray) -> int:
        key = self._key(image)
        if key not in self._table:
            raise OracleError("input not covered by the human oracle")
        return self._table[key]


def ensemble_outputs(ensemble: Ensemble, x: np.ndarray) -> list[int]:
    """Label from each fork model for one input, in model order."""
    batch = np.asarray(x, dtype=np.float32)[None] if x.ndim == 3 else np.asarray(x, dtype=np.float32)
    return [int(predict_labels(m, batch)[0]) for m in ensemble.models]


def majority(labels: list[int]) -> int:
    """Most frequent label; ties broken by the lowest class index."""
    if not labels:
        raise ValueError("empty label list")
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    return int(counts.argmax())


def _modal_fraction(labels: list[int]) -> float:
    counts = np.bincount(np.asarray(labels, dtype=np.int64))
    return counts.max() / len(labels)


def detect(labels: list[int], t: float) -> str:
    """"clean" iff the modal label covers at least t of the outputs (non-strict)."""
    if not labels:
        raise ValueError("empty label list")
    if not 0.0 < t <= 1.0:
        raise DefenseConfigError(f"threshold must be in (0, 1], got {t}")
    return "clean" if _modal_fraction(labels) >= t else "adversarial"


def _resolve(
    verdict: str,
    labels: list[int],
    models_used: int,
    config: DefenseConfig,
    oracle: HumanOracle | None,
    x: np.ndarray,
) -> DefenseOutcome:
    fused = majority(labels)
    if config.mode == "human-in-the-loop":
        if oracle is None:
            raise DefenseConfigError("human-in-the-loop mode requires an oracle")
        if verdict == "adversarial":
            return DefenseOutcome(
                verdict, fused, tuple(labels), models_used, config.mode, True, oracle.label_of(x)
            )
        return DefenseOutcome(verdict, fused, tuple(labels), models_used, config.mode, False, fused)
    if oracle is not None:
        raise DefenseConfigError("autonomous mode takes no oracle")
    return DefenseOutcome(verdict, fused, tuple(labels), models_used, config.mode, False, fused)


def classify_full(
    ensemble: Ensemble,
    x: np.ndarray,
    config: DefenseConfig,
    oracle: HumanOracle | None = None,
) -> DefenseOutcome:
    """Query all N models; detect by threshold t, thwart by majority."""
    labels = ensemble_outputs(ensemble, x)
    return _resolve(detect(labels, config.t), labels, len(labels), config, oracle, x)


def serial_order(serial_seed: int, n: int) -> np.ndarray:
    """Model consultation order for one serial classification."""
    return generator(serial_seed, "serial").permutation(n)


def serial_walk(next_label, n: int, ts: float) -> tuple[str, list[int]]:
    """Early-stopping core: pull labels from ``next_label`` in consultation order.

    Three labels are taken up front; after each the input is ruled clean as
    soon as the modal fraction so far reaches ts, and adversarial only once
    all n labels are in without meeting it.  Returns (verdict, labels seen).
    """
    labels = [next_label(k) for k in range(3)]
    used = 3
    while True:
        if _modal_fraction(labels) >= ts:
            return "clean", labels
        if used == n:
            return "adversarial", labels
        labels.append(next_label(used))
        used += 1


def classify_serial(
    ensemble: Ensemble,
    x: np.ndarray,
    config: DefenseConfig,
    oracle: HumanOracle | None = None,
) -> DefenseOutcome:
    """Serial fusion with early stopping over a seeded model order.

    Models are evaluated lazily, so a clean verdict after three agreements
    costs three model evaluations.  The fused label is the majority of
    exactly the models consulted.
    """
    n = ensemble.n
    if n < 3:
        raise DefenseConfigError(f"serial fusion needs at least 3 models, ensemble has {n}")
    order = serial_order(config.serial_seed, n)
    batch = np.asarray(x, dtype=np.float32)
    batch = batch[None] if batch.ndim == 3 else batch
    verdict, labels = serial_walk(
        lambda k: int(predict_labels(ensemble.models[int(order[k])], batch)[0]), n, config.ts
    )
    return _resolve(verdict, labels, len(labels), config, oracle, x)
