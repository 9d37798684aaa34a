"""Measurement harness: detection/thwarting metric taxonomy and sweeps.

Every evaluation produces fifteen conditional probabilities over two input
populations.  For attacked inputs: detection (p1/p2), thwarting given
detection (p3/p4), thwarting given a miss (p5/p6), and the successful
defense rate p13 = p1*p3 + p2*p5 with complement p14.  For clean inputs:
false positives (p7/p8), correctness given a false positive (p9/p10) or a
true negative (p11/p12), and the no-attack accuracy p15 = p7*p9 + p8*p11.
In human-in-the-loop mode detected inputs resolve through a perfect
oracle, so p3 and p9 become 1 and the composition identities still hold on
raw counts.

Raw numerators and denominators are kept alongside the float ratios so the
complement and composition identities can be checked in exact rational
arithmetic.  Non-converged attack attempts never enter attack-side
metrics; their count is reported separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from .attack import AttackSuite
from .data import LabeledDataset
from .defense import DefenseConfig, HumanOracle, majority, serial_order, serial_walk
from .forkgen import Ensemble, ForkConfig, generate_ensemble
from .nncore import ModelParams, predict_labels
from .rng import derive_seed

COUNT_KEYS = (
    "attacked_total",
    "attacked_detected",
    "attacked_detected_correct",
    "attacked_missed",
    "attacked_missed_correct",
    "clean_total",
    "clean_fp",
    "clean_fp_correct",
    "clean_tn",
    "clean_tn_correct",
)


@dataclass
class MetricsReport:
    mode: str
    fusion: str  # "full" | "serial"
    n: int
    w: float
    threshold: float  # t for full fusion, ts for serial
    seed: int
    counts: dict[str, int]
    excluded_non_converged: int = 0
    p1: float = float("nan")
    p2: float = float("nan")
    p3: float = float("nan")
    p4: float = float("nan")
    p5: float = float("nan")
    p6: float = float("nan")
    p7: float = float("nan")
    p8: float = float("nan")
    p9: float = float("nan")
    p10: float = float("nan")
    p11: float = float("nan")
    p12: float = float("nan")
    p13: float = float("nan")
    p14: float = float("nan")
    p15: float = float("nan")

    def __post_init__(self) -> None:
        c = self.counts

        def ratio(num: int, den: int) -> float:
            return num / den if den else float("nan")

        self.p1 = ratio(c["attacked_detected"], c["attacked_total"])
        self.p2 = ratio(c["attacked_missed"], c["attacked_total"])
        self.p3 = ratio(c["attacked_detected_correct"], c["attacked_detected"])
        self.p4 = ratio(c["attacked_detected"] - c["attacked_detected_correct"], c["attacked_detected"])
        self.p5 = ratio(c["attacked_missed_correct"], c["attacked_missed"])
        self.p6 = ratio(c["attacked_missed"] - c["attacked_missed_correct"], c["attacked_missed"])
        self.p7 = ratio(c["clean_fp"], c["clean_total"])
        self.p8 = ratio(c["clean_tn"], c["clean_total"])
        self.p9 = ratio(c["clean_fp_correct"], c["clean_fp"])
        self.p10 = ratio(c["clean_fp"] - c["clean_fp_correct"], c["clean_fp"])
        self.p11 = ratio(c["clean_tn_correct"], c["clean_tn"])
        self.p12 = ratio(c["clean_tn"] - c["clean_tn_correct"], c["clean_tn"])
        self.p13 = ratio(
            c["attacked_detected_correct"] + c["attacked_missed_correct"], c["attacked_total"]
        )
        self.p14 = ratio(
            c["attacked_total"] - c["attacked_detected_correct"] - c["attacked_missed_correct"],
            c["attacked_total"],
        )
        self.p15 = ratio(c["clean_fp_correct"] + c["clean_tn_correct"], c["clean_total"])


def _term(num_outer: int, den_outer: int, num_inner: int, den_inner: int) -> Fraction:
    """Fraction(num_outer/den_outer) * Fraction(num_inner/den_inner), empty groups contribute 0."""
    if den_outer == 0 or den_inner == 0:
        return Fraction(0)
    return Fraction(num_outer, den_outer) * Fraction(num_inner, den_inner)


def check_identities(report: MetricsReport) -> None:
    """Exact-rational complement and composition identities; raises on violation."""
    c = report.counts
    pairs = [
        ("attacked_detected", "attacked_missed", "attacked_total"),
        ("clean_fp", "clean_tn", "clean_total"),
    ]
    for a, b, total in pairs:
        if c[a] + c[b] != c[total]:
            raise AssertionError(f"{a} + {b} != {total}")
    if c["attacked_total"]:
        p13 = Fraction(c["attacked_detected_correct"] + c["attacked_missed_correct"], c["attacked_total"])
        composed = _term(
            c["attacked_detected"], c["attacked_total"], c["attacked_detected_correct"], c["attacked_detected"]
        ) + _term(c["attacked_missed"], c["attacked_total"], c["attacked_missed_correct"], c["attacked_missed"])
        if p13 != composed:
            raise AssertionError(f"p13 composition mismatch: {p13} != {composed}")
    if c["clean_total"]:
        p15 = Fraction(c["clean_fp_correct"] + c["clean_tn_correct"], c["clean_total"])
        composed = _term(c["clean_fp"], c["clean_total"], c["clean_fp_correct"], c["clean_fp"]) + _term(
            c["clean_tn"], c["clean_total"], c["clean_tn_correct"], c["clean_tn"]
        )
        if p15 != composed:
            raise AssertionError(f"p15 composition mismatch: {p15} != {composed}")


@dataclass
class DistinctCountHistogram:
    counts: dict[int, int]  # D -> number of adversarial inputs with D distinct outputs
    thwarted_given_d1: float  # unanimous-and-correct fraction among D == 1 cases
    examples_counted: int


def oracle_for(clean_set: LabeledDataset, suite: AttackSuite | None = None) -> HumanOracle:
    """Perfect-human oracle covering a clean set and, optionally, a suite's images."""
    images = [clean_set.images]
    labels = [clean_set.labels]
    if suite is not None:
        for ex in suite.examples:
            images.append(ex.adversarial[None])
            labels.append(np.array([ex.true_label]))
            images.append(ex.clean[None])
            labels.append(np.array([ex.true_label]))
    return HumanOracle(np.concatenate(images), np.concatenate(labels))


def label_matrix(ensemble: Ensemble, images: np.ndarray) -> np.ndarray:
    """(n_models, n_images) argmax labels; the basis for vectorized evaluation."""
    return np.stack([predict_labels(m, images) for m in ensemble.models])


def _judge(
    labels_by_model: np.ndarray,
    column: int,
    config: DefenseConfig,
    fusion: str,
    stream: str,
) -> tuple[str, int, int]:
    """Verdict, fused label, and models-used for one input from the label matrix.

    Serial consultation order varies per input (seeded from serial_seed, the
    stream name, and the column index), mirroring a fresh random pick per
    classification.
    """
    n = labels_by_model.shape[0]
    if fusion == "full":
        col = labels_by_model[:, column]
        counts = np.bincount(col)
        verdict = "clean" if counts.max() / n >= config.t else "adversarial"
        return verdict, int(counts.argmax()), n
    order = serial_order(derive_seed(config.serial_seed, stream, column), n)
    verdict, seen = serial_walk(lambda k: int(labels_by_model[order[k], column]), n, config.ts)
    return verdict, majority(seen), len(seen)


def evaluate(
    ensemble: Ensemble,
    clean_set: LabeledDataset,
    attack_suite: AttackSuite | None,
    config: DefenseConfig,
    oracle: HumanOracle | None = None,
    fusion: str = "full",
    seed: int = 0,
) -> MetricsReport:
    """Metric taxonomy over one clean set and one attack suite.

    ``fusion`` picks full-ensemble or serial-early-stop classification; the
    detection threshold is config.t or config.ts accordingly.  Human mode
    needs an oracle covering both populations (see ``oracle_for``).  With
    ``attack_suite=None`` only the clean-side metrics are produced (the
    attack-side ratios come out as NaN); an empty suite is an error.
    """
    if len(clean_set) == 0:
        raise ValueError("clean set is empty")
    if attack_suite is not None and not attack_suite.examples:
        raise ValueError("attack suite is empty")
    if fusion not in ("full", "serial"):
        raise ValueError(f"unknown fusion {fusion!r}")
    human = config.mode == "human-in-the-loop"
    if human and oracle is None:
        raise ValueError("human-in-the-loop evaluation requires an oracle")

    counts = {k: 0 for k in COUNT_KEYS}

    clean_labels = label_matrix(ensemble, clean_set.images)
    for j in range(len(clean_set)):
        verdict, fused, _ = _judge(clean_labels, j, config, fusion, "clean")
        truth = int(clean_set.labels[j])
        final = truth if (human and verdict == "adversarial") else fused
        counts["clean_total"] += 1
        if verdict == "adversarial":
            counts["clean_fp"] += 1
            counts["clean_fp_correct"] += int(final == truth)
        else:
            counts["clean_tn"] += 1
            counts["clean_tn_correct"] += int(final == truth)

    converged = [ex for ex in attack_suite.examples if ex.converged] if attack_suite else []
    excluded = (len(attack_suite.examples) - len(converged)) if attack_suite else 0
    if converged:
        adv_images = np.stack([ex.adversarial for ex in converged])
        adv_labels = label_matrix(ensemble, adv_images)
        for j, ex in enumerate(converged):
            verdict, fused, _ = _judge(adv_labels, j, config, fusion, "attack")
            final = ex.true_label if (human and verdict == "adversarial") else fused
            correct = int(final == ex.true_label)
            counts["attacked_total"] += 1
            if verdict == "adversarial":
                counts["attacked_detected"] += 1
                counts["attacked_detected_correct"] += correct
            else:
                counts["attacked_missed"] += 1
                counts["attacked_missed_correct"] += correct

    report = MetricsReport(
        mode=config.mode,
        fusion=fusion,
        n=ensemble.n,
        w=ensemble.config.w,
        threshold=config.ts if fusion == "serial" else config.t,
        seed=seed,
        counts=counts,
        excluded_non_converged=excluded,
    )
    check_identities(report)
    return report


def distinct_count_histogram(ensemble: Ensemble, attack_suite: AttackSuite) -> DistinctCountHistogram:
    """Distribution of the number of distinct fork outputs per adversarial input."""
    converged = [ex for ex in attack_suite.examples if ex.converged]
    if not converged:
        raise ValueError("attack suite has no converged examples")
    images = np.stack([ex.adversarial for ex in converged])
    labels = label_matrix(ensemble, images)
    counts: dict[int, int] = {}
    d1_total = d1_correct = 0
    for j, ex in enumerate(converged):
        d = len(set(int(v) for v in labels[:, j]))
        counts[d] = counts.get(d, 0) + 1
        if d == 1:
            d1_total += 1
            d1_correct += int(labels[0, j] == ex.true_label)
    return DistinctCountHistogram(
        counts=dict(sorted(counts.items())),
        thwarted_given_d1=(d1_correct / d1_total) if d1_total else float("nan"),
        examples_counted=len(converged),
    )


def transfer_asr(model: ModelParams, attack_suite: AttackSuite) -> float:
    """Fraction of converged examples the given model labels incorrectly."""
    converged = [ex for ex in attack_suite.examples if ex.converged]
    if not converged:
        return float("nan")
    images = np.stack([ex.adversarial for ex in converged])
    truths = np.array([ex.true_label for ex in converged])
    return float(np.mean(predict_labels(model, images) != truths))


def asr_vs_distortion(
    model: ModelParams, suites_by_kappa: dict[float, AttackSuite]
) -> list[tuple[float, float, float]]:
    """(kappa, mean distortion, ASR) points sorted by kappa."""
    points = []
    for kappa in sorted(suites_by_kappa):
        suite = suites_by_kappa[kappa]
        converged = [ex for ex in suite.examples if ex.converged]
        mean_d = float(np.mean([ex.distortion for ex in converged])) if converged else float("nan")
        points.append((kappa, mean_d, transfer_asr(model, suite)))
    return points


@dataclass(frozen=True)
class SweepGrid:
    n_values: tuple[int, ...]
    w_values: tuple[float, ...]
    thresholds: tuple[float, ...]
    modes: tuple[str, ...] = ("autonomous",)
    seeds: tuple[int, ...] = (0,)
    fusion: str = "full"

    def __post_init__(self) -> None:
        if not (self.n_values and self.w_values and self.thresholds and self.modes and self.seeds):
            raise ValueError("sweep grid must be non-empty in every dimension")


def sweep(
    base: ModelParams,
    grid: SweepGrid,
    train_set: LabeledDataset,
    val_set: LabeledDataset,
    clean_set: LabeledDataset,
    attack_suite: AttackSuite,
    fork_hyper=None,
) -> list[MetricsReport]:
    """One report per grid cell per seed.

    For each (w, seed) a single ensemble of max(n_values) forks is generated
    and its prefixes serve the smaller n values (fork seeds depend only on
    the master seed and fork index, so a prefix equals a freshly generated
    smaller ensemble).  Ensembles are likewise reused across thresholds and
    modes, isolating those parameters' effects.
    """
    from .nncore import TrainHyper

    hyper = fork_hyper if fork_hyper is not None else TrainHyper()
    oracle = (
        oracle_for(clean_set, attack_suite) if "human-in-the-loop" in grid.modes else None
    )
    reports: list[MetricsReport] = []
    n_max = max(grid.n_values)
    for seed in grid.seeds:
        for w in grid.w_values:
            master = derive_seed(seed, "sweep", repr(w))
            ensemble = generate_ensemble(
                base, ForkConfig(n=n_max, w=w, master_seed=master, retrain_hyper=hyper), train_set, val_set
            )
            for n in grid.n_values:
                part = ensemble.prefix(n)
                for threshold in grid.thresholds:
                    for mode in grid.modes:
                        config = DefenseConfig(
                            t=threshold, ts=threshold, mode=mode, serial_seed=derive_seed(seed, "serial")
                        )
                        reports.append(
                            evaluate(
                                part,
                                clean_set,
                                attack_suite,
                                config,
                                oracle if mode == "human-in-the-loop" else None,
                                fusion=grid.fusion,
                                seed=seed,
                            )
                        )
    return reports


_P_KEYS = tuple(f"p{i}" for i in range(1, 16))
CSV_COLUMNS = ("mode", "fusion", "n", "w", "threshold", "seed") + _P_KEYS + COUNT_KEYS + (
    "excluded_non_converged",
)


def report_row(report: MetricsReport) -> dict[str, object]:
    row: dict[str, object] = {
        "mode": report.mode,
        "fusion": report.fusion,
        "n": report.n,
        "w": report.w,
        "threshold": report.threshold,
        "seed": report.seed,
    }
    for key in _P_KEYS:
        row[key] = getattr(report, key)
    for key in COUNT_KEYS:
        row[key] = report.counts[key]
    row["excluded_non_converged"] = report.excluded_non_converged
    return row


def reports_to_csv(reports: list[MetricsReport]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for report in reports:
        row = report_row(report)
        lines.append(",".join(_csv_cell(row[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return "nan" if np.isnan(value) else f"{value:.6f}"
    return str(value)


def reports_to_json(reports: list[MetricsReport]) -> str:
    rows = []
    for report in reports:
        row = report_row(report)
        for key, value in row.items():
            if isinstance(value, float) and np.isnan(value):
                row[key] = None
        rows.append(row)
    return json.dumps(rows, indent=2) + "\n"
