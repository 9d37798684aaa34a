"""Adversarial example construction against a fixed classifier.

The main attack minimizes ||delta||_2 + c * g(x') under the box constraint
x' in [0,1]^m, where g(x') = max(max_{j != t} Z_j - Z_t, -kappa) on the
logits Z.  The box is handled by the change of variables
x' = (tanh(u) + 1) / 2 and plain gradient descent in u-space; the weight c
is found per example by a decade escalation from c_initial until the first
success, then bisection between the last failure and the first success.

Success is evaluated on the float32-cast candidate that would be stored, so
a converged example is misclassified as its target by construction.  A
non-targeted attack runs the targeted attack toward every other class and
keeps the minimum-distortion success.

A fast gradient-sign baseline is included for smoke tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import io
import struct
import zlib

import numpy as np

from .data import LabeledDataset
from .kvformat import read_kv, write_kv
from .nncore import ModelParams, ObjectiveSpec, input_gradient, model_hash, predict_labels
from .nncore.model import _backward_input, _check_batch, _forward_full
from .nncore.serialize import ModelFormatError, _Reader, read_tensor_record, write_tensor_record
from .rng import generator

_C_MAX = 1e10
_TANH_EPS = 1e-6
_MAX_ROWS = 128  # lockstep batch cap; bounds im2col memory on large inputs


class MissingClassRepresentativeError(ValueError):
    """No correctly classified basis sample exists for some classes."""

    def __init__(self, classes: list[int]):
        super().__init__(f"no correctly classified sample for classes {classes}")
        self.classes = classes


@dataclass(frozen=True)
class AttackConfig:
    kappa: float = 0.0
    binary_search_steps: int = 9
    c_initial: float = 1e-2
    inner_iterations: int = 500
    inner_learning_rate: float = 1e-2
    norm: str = "L2"

    def __post_init__(self) -> None:
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.c_initial <= 0:
            raise ValueError("c_initial must be > 0")
        if self.norm != "L2":
            raise ValueError("only the L2 norm is supported")


@dataclass
class AdversarialExample:
    """One attack attempt.

    ``perturbation`` is exactly ``adversarial - clean`` (float32 arithmetic)
    and ``distortion`` its Euclidean norm.  ``c_used`` is the smallest
    Lagrangian weight whose inner optimization succeeded (the binary
    search's output); for non-converged attempts it is the last weight
    tried.  ``clean_base_label`` records what the attacked model thought of
    the clean input at generation time.
    """

    clean: np.ndarray
    adversarial: np.ndarray
    perturbation: np.ndarray
    true_label: int
    target_label: int | None
    kappa: float
    distortion: float
    converged: bool
    base_model_hash: str
    c_used: float = 0.0
    clean_base_label: int = -1

    def __post_init__(self) -> None:
        if self.adversarial.size and (self.adversarial.min() < 0.0 or self.adversarial.max() > 1.0):
            raise ValueError("adversarial image outside [0, 1]")
        if not np.array_equal(self.perturbation, self.adversarial - self.clean):
            raise ValueError("perturbation != adversarial - clean")


@dataclass
class AttackSuite:
    examples: list[AdversarialExample]
    kind: str  # "targeted-grid" | "non-targeted"
    generation_config: AttackConfig
    source_dataset: str
    base_model_hash: str
    seed: int


def distortion(x: np.ndarray, x_prime: np.ndarray) -> float:
    """Euclidean distance between two images, accumulated in float64."""
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_prime.shape}")
    d = x_prime.astype(np.float64) - x.astype(np.float64)
    return float(np.sqrt(np.sum(d * d)))


def cw_regularizer(
    model: ModelParams, x_prime: np.ndarray, target_label: int, kappa: float = 0.0
) -> tuple[float, np.ndarray]:
    """Clamped attack margin toward ``target_label`` and its input gradient."""
    from .nncore.model import logits_of, _objective_dlogits

    objective = ObjectiveSpec("cw_margin", target_label, kappa)
    logits = logits_of(model, x_prime)
    values, _ = _objective_dlogits(objective, logits)
    grad = input_gradient(model, x_prime, objective)
    return float(values[0]), grad


def _margins_dlogits(logits: np.ndarray, targets: np.ndarray, kappa: float):
    """Per-row margin max_{j != t} z_j - z_t and gradient of max(margin, -kappa)."""
    n = logits.shape[0]
    rows = np.arange(n)
    masked = logits.copy()
    masked[rows, targets] = -np.inf
    rival = masked.argmax(axis=1)
    margins = masked[rows, rival] - logits[rows, targets]
    d = np.zeros_like(logits)
    live = margins > -kappa
    d[rows[live], rival[live]] = 1.0
    d[rows[live], targets[live]] = -1.0
    return margins, d


@dataclass
class _Attempt:
    x: np.ndarray  # float32 candidate (best success, else closest-to-success iterate)
    converged: bool
    c_used: float
    target: int
    closest_margin: float  # smallest clamp-free margin seen; <= -kappa means success


class _RowState:
    __slots__ = (
        "target", "mode", "c_try", "c_lo", "c_hi", "bisect_left", "done",
        "best_dist2", "best_x", "min_success_c", "closest_margin", "closest_x", "last_c",
    )

    def __init__(self, target: int, c_initial: float, bisect_steps: int):
        self.target = target
        self.mode = "escalate"
        self.c_try = c_initial
        self.c_lo = 0.0
        self.c_hi = None
        self.bisect_left = bisect_steps
        self.done = False
        self.best_dist2 = np.inf
        self.best_x = None
        self.min_success_c = None
        self.closest_margin = np.inf
        self.closest_x = None
        self.last_c = c_initial


def _gd_run(model: ModelParams, clean64, clean32, u0, targets, cs, config: AttackConfig):
    """One fixed-length gradient-descent run for a row batch with per-row weights.

    Returns per-row (succeeded, best_dist2, best_x32, min_margin, margin_x32).
    Candidates are evaluated as the float32 images that would be stored, so
    success verdicts transfer exactly to the emitted examples.
    """
    b = clean64.shape[0]
    u = u0.copy()
    best_dist2 = np.full(b, np.inf)
    best_x = np.zeros_like(clean32)
    succeeded = np.zeros(b, dtype=bool)
    min_margin = np.full(b, np.inf)
    margin_x = clean32.copy()
    targets = np.asarray(targets)
    cs = np.asarray(cs, dtype=np.float64)
    for it in range(config.inner_iterations + 1):
        th = np.tanh(u)
        x32 = (0.5 * (th + 1.0)).astype(np.float32)
        x_eval = x32.astype(np.float64)
        logits, caches = _forward_full(model, x_eval)
        margins, dlogits = _margins_dlogits(logits, targets, config.kappa)
        success = (margins <= -config.kappa) & (logits.argmax(axis=1) == targets)
        diff = x32.astype(np.float64) - clean32.astype(np.float64)
        dist2 = np.sum(diff * diff, axis=(1, 2, 3))
        improve = success & (dist2 < best_dist2)
        if improve.any():
            best_dist2[improve] = dist2[improve]
            best_x[improve] = x32[improve]
            succeeded |= improve
        closer = margins < min_margin
        if closer.any():
            min_margin[closer] = margins[closer]
            margin_x[closer] = x32[closer]
        if it == config.inner_iterations:
            break
        dx = _backward_input(caches, cs[:, None] * dlogits)
        dx += 2.0 * (x_eval - clean64)
        u -= config.inner_learning_rate * dx * 0.5 * (1.0 - th * th)
    return succeeded, best_dist2, best_x, min_margin, margin_x


def _cw_targeted_rows(
    model: ModelParams, clean: np.ndarray, targets: list[int], config: AttackConfig
) -> list[_Attempt]:
    """Run the attack for each (row of clean, target) pair; rows are independent."""
    clean32 = np.asarray(clean, dtype=np.float32)
    clean64 = _check_batch(model.arch, clean32)
    z = np.clip(clean64, _TANH_EPS, 1.0 - _TANH_EPS)
    u0_all = np.arctanh(2.0 * z - 1.0)
    states = [_RowState(t, config.c_initial, config.binary_search_steps) for t in targets]

    while True:
        active = [i for i, s in enumerate(states) if not s.done]
        if not active:
            break
        idx = np.array(active)
        cs = [states[i].c_try for i in active]
        tg = [states[i].target for i in active]
        run_ok, run_dist2, run_x, run_margin, run_mx = _gd_run(
            model, clean64[idx], clean32[idx], u0_all[idx], tg, cs, config
        )
        for pos, i in enumerate(active):
            s = states[i]
            s.last_c = s.c_try
            succeeded = bool(run_ok[pos])
            if succeeded:
                if run_dist2[pos] < s.best_dist2:
                    s.best_dist2 = run_dist2[pos]
                    s.best_x = run_x[pos].copy()
                if s.min_success_c is None or s.c_try < s.min_success_c:
                    s.min_success_c = s.c_try
            if run_margin[pos] < s.closest_margin:
                s.closest_margin = float(run_margin[pos])
                s.closest_x = run_mx[pos].copy()
            if s.mode == "escalate":
                if succeeded:
                    s.c_hi = s.c_try
                    s.mode = "bisect"
                else:
                    s.c_lo = s.c_try
                    s.c_try *= 10.0
                    if s.c_try > _C_MAX:
                        s.done = True
                    continue
            else:
                if succeeded:
                    s.c_hi = s.c_try
                else:
                    s.c_lo = s.c_try
                s.bisect_left -= 1
            if s.bisect_left <= 0:
                s.done = True
            else:
                s.c_try = 0.5 * (s.c_lo + s.c_hi)

    attempts = []
    for s in states:
        if s.best_x is not None:
            attempts.append(_Attempt(s.best_x, True, float(s.min_success_c), s.target, s.closest_margin))
        else:
            x = s.closest_x if s.closest_x is not None else clean32[0]
            attempts.append(_Attempt(x, False, float(s.last_c), s.target, s.closest_margin))
    return attempts


def _finish(
    model: ModelParams,
    clean: np.ndarray,
    attempt: _Attempt,
    true_label: int,
    target_label: int | None,
    config: AttackConfig,
    base_hash: str,
    clean_base_label: int,
) -> AdversarialExample:
    clean32 = np.asarray(clean, dtype=np.float32)
    adv = np.clip(attempt.x, 0.0, 1.0)
    pert = adv - clean32
    return AdversarialExample(
        clean=clean32,
        adversarial=adv,
        perturbation=pert,
        true_label=int(true_label),
        target_label=target_label,
        kappa=config.kappa,
        # norm of the stored float32 perturbation, accumulated in float64
        distortion=float(np.linalg.norm(pert.astype(np.float64))),
        converged=attempt.converged,
        base_model_hash=base_hash,
        c_used=attempt.c_used,
        clean_base_label=clean_base_label,
    )


def cw_l2(
    model: ModelParams,
    clean: np.ndarray,
    true_label: int,
    target_label: int | None = None,
    config: AttackConfig = AttackConfig(),
) -> AdversarialExample:
    """Targeted attack toward ``target_label``, or non-targeted when it is None.

    Non-targeted mode runs the targeted attack toward every other class and
    returns the minimum-distortion success; non-convergence is recorded on
    the returned example, never raised.
    """
    classes = model.arch.classes
    base_hash = model_hash(model)
    clean_base_label = int(predict_labels(model, np.asarray(clean, dtype=np.float32)[None])[0])
    if target_label is not None:
        if target_label == true_label:
            raise ValueError("target label must differ from the true label")
        attempts = _cw_targeted_rows(model, np.asarray(clean)[None], [target_label], config)
        return _finish(model, clean, attempts[0], true_label, target_label, config,
                       base_hash, clean_base_label)

    targets = [t for t in range(classes) if t != true_label]
    rows = np.repeat(np.asarray(clean, dtype=np.float32)[None], len(targets), axis=0)
    attempts = _cw_targeted_rows(model, rows, targets, config)
    converged = [a for a in attempts if a.converged]
    if converged:
        clean32 = np.asarray(clean, dtype=np.float32)
        best = min(converged, key=lambda a: distortion(clean32, np.clip(a.x, 0.0, 1.0)))
    else:
        best = min(attempts, key=lambda a: a.closest_margin)  # attach the nearest miss
    return _finish(model, clean, best, true_label, None, config, base_hash, clean_base_label)


def fgsm(
    model: ModelParams, clean: np.ndarray, true_label: int, epsilon: float
) -> AdversarialExample:
    """Single-step gradient-sign baseline: x' = clip(x + eps * sign(dCE/dx))."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    clean32 = np.asarray(clean, dtype=np.float32)
    grad = input_gradient(model, clean32, ObjectiveSpec("cross_entropy", int(true_label)))
    adv = np.clip(clean32 + np.float32(epsilon) * np.sign(grad).astype(np.float32), 0.0, 1.0)
    adv = adv.astype(np.float32)
    label = int(predict_labels(model, adv[None])[0])
    return AdversarialExample(
        clean=clean32,
        adversarial=adv,
        perturbation=adv - clean32,
        true_label=int(true_label),
        target_label=None,
        kappa=0.0,
        distortion=float(np.linalg.norm((adv - clean32).astype(np.float64))),
        converged=label != int(true_label),
        base_model_hash=model_hash(model),
        c_used=0.0,
        clean_base_label=int(predict_labels(model, clean32[None])[0]),
    )


def build_attack_suite(
    model: ModelParams,
    dataset: LabeledDataset,
    kind: str,
    config: AttackConfig = AttackConfig(),
    seed: int = 0,
    sample_count: int = 100,
) -> AttackSuite:
    """Construct the experimental attack grid against ``model``.

    ``targeted-grid``: one seeded correctly-classified basis per class,
    attacked toward every other class (classes * (classes - 1) attempts,
    ordered by basis class then target).  ``non-targeted``: ``sample_count``
    seeded random test samples, each attacked non-targeted.
    """
    if kind not in ("targeted-grid", "non-targeted"):
        raise ValueError(f"unknown suite kind {kind!r}")
    base_hash = model_hash(model)
    classes = dataset.class_count
    predicted = predict_labels(model, dataset.images)
    examples: list[AdversarialExample] = []

    if kind == "targeted-grid":
        bases: dict[int, int] = {}
        missing: list[int] = []
        for k in range(classes):
            candidates = np.flatnonzero(dataset.labels == k)
            order = generator(seed, "basis", k).permutation(len(candidates))
            hit = next((int(candidates[i]) for i in order if predicted[candidates[i]] == k), None)
            if hit is None:
                missing.append(k)
            else:
                bases[k] = hit
        if missing:
            raise MissingClassRepresentativeError(missing)
        # One lockstep optimization over the whole grid: rows are independent,
        # and wide batches amortize the per-iteration numpy overhead.
        rows, targets, owners = [], [], []
        for k in range(classes):
            for t in range(classes):
                if t != k:
                    rows.append(dataset.images[bases[k]])
                    targets.append(t)
                    owners.append(k)
        for lo in range(0, len(rows), _MAX_ROWS):
            attempts = _cw_targeted_rows(
                model, np.stack(rows[lo : lo + _MAX_ROWS]), targets[lo : lo + _MAX_ROWS], config
            )
            for attempt, k in zip(attempts, owners[lo : lo + _MAX_ROWS]):
                examples.append(
                    _finish(model, dataset.images[bases[k]], attempt, k, attempt.target,
                            config, base_hash, int(predicted[bases[k]]))
                )
        return AttackSuite(examples, kind, config, dataset.name, base_hash, seed)

    rng = generator(seed, "nontargeted")
    chosen = [int(i) for i in rng.choice(len(dataset), size=min(sample_count, len(dataset)), replace=False)]
    per_sample = classes - 1
    group = max(1, _MAX_ROWS // per_sample)
    for glo in range(0, len(chosen), group):
        members = chosen[glo : glo + group]
        rows, targets, owners = [], [], []
        for idx in members:
            true_label = int(dataset.labels[idx])
            for t in range(classes):
                if t != true_label:
                    rows.append(dataset.images[idx])
                    targets.append(t)
                    owners.append(idx)
        attempts = _cw_targeted_rows(model, np.stack(rows), targets, config)
        for idx in members:
            clean = dataset.images[idx]
            mine = [a for a, o in zip(attempts, owners) if o == idx]
            converged = [a for a in mine if a.converged]
            if converged:
                best = min(converged, key=lambda a: distortion(clean, np.clip(a.x, 0.0, 1.0)))
            else:
                best = min(mine, key=lambda a: a.closest_margin)
            examples.append(
                _finish(model, clean, best, int(dataset.labels[idx]), None, config,
                        base_hash, int(predicted[idx]))
            )
    return AttackSuite(examples, kind, config, dataset.name, base_hash, seed)


SUITE_MANIFEST = "suite.manifest"
SUITE_TENSORS = "examples.bin"
_SUITE_MAGIC = b"FMTS"
_SUITE_VERSION = 1


def save_suite(suite: AttackSuite, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pairs: dict[str, object] = {
        "kind": suite.kind,
        "source_dataset": suite.source_dataset,
        "base_model_hash": suite.base_model_hash,
        "seed": suite.seed,
        "count": len(suite.examples),
        "config.kappa": suite.generation_config.kappa,
        "config.binary_search_steps": suite.generation_config.binary_search_steps,
        "config.c_initial": suite.generation_config.c_initial,
        "config.inner_iterations": suite.generation_config.inner_iterations,
        "config.inner_learning_rate": suite.generation_config.inner_learning_rate,
        "config.norm": suite.generation_config.norm,
    }
    for i, ex in enumerate(suite.examples):
        pairs[f"ex.{i}.true_label"] = ex.true_label
        pairs[f"ex.{i}.target_label"] = "none" if ex.target_label is None else ex.target_label
        pairs[f"ex.{i}.kappa"] = ex.kappa
        pairs[f"ex.{i}.distortion"] = repr(ex.distortion)
        pairs[f"ex.{i}.converged"] = int(ex.converged)
        pairs[f"ex.{i}.c_used"] = repr(ex.c_used)
        pairs[f"ex.{i}.clean_base_label"] = ex.clean_base_label
    write_kv(d / SUITE_MANIFEST, pairs)

    buf = io.BytesIO()
    buf.write(_SUITE_MAGIC)
    buf.write(struct.pack("<II", _SUITE_VERSION, len(suite.examples)))
    for i, ex in enumerate(suite.examples):
        write_tensor_record(buf, f"{i}/clean", ex.clean)
        write_tensor_record(buf, f"{i}/adv", ex.adversarial)
    payload = buf.getvalue()
    (d / SUITE_TENSORS).write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def load_suite(directory) -> AttackSuite:
    d = Path(directory)
    kv = read_kv(d / SUITE_MANIFEST)
    config = AttackConfig(
        kappa=float(kv["config.kappa"]),
        binary_search_steps=int(kv["config.binary_search_steps"]),
        c_initial=float(kv["config.c_initial"]),
        inner_iterations=int(kv["config.inner_iterations"]),
        inner_learning_rate=float(kv["config.inner_learning_rate"]),
        norm=kv["config.norm"],
    )
    data = (d / SUITE_TENSORS).read_bytes()
    if data[:4] != _SUITE_MAGIC:
        raise ModelFormatError("not an fMTD attack-suite tensor file")
    declared = struct.unpack("<I", data[-4:])[0]
    if declared != zlib.crc32(data[:-4]):
        raise ModelFormatError("attack-suite tensor file checksum mismatch")
    r = _Reader(data[:-4])
    r.take(4)
    version, count = struct.unpack("<II", r.take(8))
    if version != _SUITE_VERSION or count != int(kv["count"]):
        raise ModelFormatError("attack-suite header disagrees with manifest")
    examples: list[AdversarialExample] = []
    for i in range(count):
        _, clean = read_tensor_record(r)
        _, adv = read_tensor_record(r)
        target = kv[f"ex.{i}.target_label"]
        examples.append(
            AdversarialExample(
                clean=clean,
                adversarial=adv,
                perturbation=adv - clean,
                true_label=int(kv[f"ex.{i}.true_label"]),
                target_label=None if target == "none" else int(target),
                kappa=float(kv[f"ex.{i}.kappa"]),
                distortion=float(kv[f"ex.{i}.distortion"]),
                converged=bool(int(kv[f"ex.{i}.converged"])),
                base_model_hash=kv["base_model_hash"],
                c_used=float(kv[f"ex.{i}.c_used"]),
                clean_base_label=int(kv[f"ex.{i}.clean_base_label"]),
            )
        )
    return AttackSuite(examples, kv["kind"], config, kv["source_dataset"], kv["base_model_hash"], int(kv["seed"]))
