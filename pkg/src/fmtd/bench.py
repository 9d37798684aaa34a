"""Inference-cost measurement: full-ensemble versus serial early stopping.

Wall-clock is measured around classification only (no I/O), per batch size
and mode, with warm-up runs excluded.  Timing numbers are informational;
model-evaluation counts are the exact quantity: a full pass always costs N
evaluations per sample, the serial pass costs models_used.

The reported mean is winsorized at the cell's own [p5, p95] range so the
p5 <= mean <= p95 invariant is immune to scheduler spikes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .defense import DefenseConfig, classify_serial
from .forkgen import Ensemble
from .nncore import predict_labels
from .rng import derive_seed, generator

Mode = tuple[str, float | None]  # ("full", None) or ("serial", ts)


@dataclass
class BenchCell:
    batch_size: int
    mode: str
    ts: float | None
    mean_us: float
    p5_us: float
    p95_us: float
    mean_models_used: float
    repetitions: int


@dataclass
class BenchReport:
    cells: list[BenchCell]
    cost_ratio: dict[float, float]  # ts -> serial/full mean model evaluations
    repetitions: int

    def csv(self) -> str:
        lines = ["batch_size,mode,ts,mean_us,p5_us,p95_us,mean_models_used,repetitions"]
        for c in self.cells:
            ts = "" if c.ts is None else f"{c.ts:g}"
            lines.append(
                f"{c.batch_size},{c.mode},{ts},{c.mean_us:.3f},{c.p5_us:.3f},"
                f"{c.p95_us:.3f},{c.mean_models_used:.4f},{c.repetitions}"
            )
        return "\n".join(lines) + "\n"


def _winsorized_mean(samples: np.ndarray) -> tuple[float, float, float]:
    p5, p95 = np.percentile(samples, [5, 95])
    return float(np.clip(samples, p5, p95).mean()), float(p5), float(p95)


def bench_inference(
    ensemble: Ensemble,
    dataset: LabeledDataset,
    batch_sizes: list[int],
    modes: list[Mode],
    repetitions: int = 100,
    seed: int = 0,
    warmup: int = 5,
) -> BenchReport:
    """Per-sample inference time and models-used statistics per (batch size, mode)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if repetitions < 30:
        raise ValueError("need at least 30 repetitions per cell")
    cells: list[BenchCell] = []
    used_by_ts: dict[float, list[int]] = {}
    for batch_size in batch_sizes:
        for mode, ts in modes:
            times_us = []
            used_counts: list[int] = []
            pick = generator(seed, mode, "" if ts is None else repr(ts), batch_size)
            for rep in range(warmup + repetitions):
                idx = pick.choice(len(dataset), size=batch_size, replace=True)
                batch = dataset.images[idx]
                if mode == "full":
                    start = time.perf_counter()
                    labels = np.stack([predict_labels(m, batch) for m in ensemble.models])
                    for j in range(batch_size):
                        np.bincount(labels[:, j]).argmax()
                    elapsed = time.perf_counter() - start
                    used = [ensemble.n] * batch_size
                else:
                    start = time.perf_counter()
                    used = []
                    for j in range(batch_size):
                        config = DefenseConfig(
                            ts=ts, serial_seed=derive_seed(seed, "bench", rep, j)
                        )
                        outcome = classify_serial(ensemble, batch[j], config)
                        used.append(outcome.models_used)
                    elapsed = time.perf_counter() - start
                if rep >= warmup:
                    times_us.append(elapsed / batch_size * 1e6)
                    used_counts.extend(used)
            mean_us, p5, p95 = _winsorized_mean(np.asarray(times_us))
            cells.append(
                BenchCell(
                    batch_size=batch_size,
                    mode=mode,
                    ts=ts,
                    mean_us=mean_us,
                    p5_us=p5,
                    p95_us=p95,
                    mean_models_used=float(np.mean(used_counts)),
                    repetitions=repetitions,
                )
            )
            if mode == "serial":
                used_by_ts.setdefault(ts, []).extend(used_counts)
    cost_ratio = {ts: float(np.mean(u)) / ensemble.n for ts, u in used_by_ts.items()}
    return BenchReport(cells=cells, cost_ratio=cost_ratio, repetitions=repetitions)
