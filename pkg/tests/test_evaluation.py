import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtd.attack import AdversarialExample, AttackConfig, AttackSuite
from fmtd.data import LabeledDataset
from fmtd.defense import DefenseConfig
from fmtd.evaluation import (
    CSV_COLUMNS,
    MetricsReport,
    SweepGrid,
    check_identities,
    distinct_count_histogram,
    evaluate,
    oracle_for,
    reports_to_csv,
    reports_to_json,
    transfer_asr,
    asr_vs_distortion,
)
from helpers import constant_ensemble

SIDE = 6
CLASSES = 4


def clean_dataset(labels):
    rng = np.random.default_rng(17)
    images = rng.random((len(labels), SIDE, SIDE, 1)).astype(np.float32)
    return LabeledDataset(images, np.asarray(labels, dtype=np.int64), CLASSES, "stub-clean")


def stub_suite(truths, seed=3, converged=None, kind="targeted-grid"):
    rng = np.random.default_rng(seed)
    converged = converged if converged is not None else [True] * len(truths)
    examples = []
    for i, (truth, ok) in enumerate(zip(truths, converged)):
        clean = rng.random((SIDE, SIDE, 1)).astype(np.float32)
        adv = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1).astype(np.float32)
        examples.append(AdversarialExample(
            clean=clean,
            adversarial=adv,
            perturbation=adv - clean,
            true_label=int(truth),
            target_label=(int(truth) + 1) % CLASSES if kind == "targeted-grid" else None,
            kappa=0.0,
            distortion=float(np.linalg.norm((adv - clean).astype(np.float64))),
            converged=ok,
            base_model_hash="stub",
        ))
    return AttackSuite(examples, kind, AttackConfig(), "stub", "stub", seed)


class TestMetricsReport:
    def test_perfect_clean_side(self):
        # unanimous, always-correct ensemble on clean data: p7=0, p11=1, p15=1
        ens = constant_ensemble([2, 2, 2], classes=CLASSES, side=SIDE)
        clean = clean_dataset([2] * 10)
        report = evaluate(ens, clean, None, DefenseConfig(t=1.0))
        assert report.p7 == 0.0
        assert report.p11 == 1.0
        assert report.p15 == 1.0
        assert np.isnan(report.p1) and np.isnan(report.p13)

    def test_split_but_correct_majority(self):
        # every adversarial input splits the ensemble and the majority is right
        ens = constant_ensemble([1, 1, 0], classes=CLASSES, side=SIDE)
        clean = clean_dataset([1] * 5)
        suite = stub_suite([1] * 8)
        report = evaluate(ens, clean, suite, DefenseConfig(t=1.0))
        assert report.p1 == 1.0
        assert report.p3 == 1.0
        assert report.p13 == 1.0

    def test_human_mode_beats_autonomous(self):
        # majority is wrong (2 vs truth 1), so the human rescues detected cases
        ens = constant_ensemble([2, 2, 1], classes=CLASSES, side=SIDE)
        clean = clean_dataset([1, 1, 2, 0])
        suite = stub_suite([1] * 6)
        auto = evaluate(ens, clean, suite, DefenseConfig(t=1.0))
        oracle = oracle_for(clean, suite)
        human = evaluate(ens, clean, suite, DefenseConfig(t=1.0, mode="human-in-the-loop"), oracle)
        assert human.p13 >= auto.p13
        assert human.p13 == 1.0  # everything splits, everything detected, human perfect
        assert human.p3 == 1.0

    def test_counts_complement_exactly(self):
        ens = constant_ensemble([0, 1, 2, 0], classes=CLASSES, side=SIDE)
        clean = clean_dataset([0, 1, 2, 3, 0, 1])
        suite = stub_suite([0, 1, 2, 3] * 3)
        report = evaluate(ens, clean, suite, DefenseConfig(t=0.6))
        c = report.counts
        assert c["attacked_detected"] + c["attacked_missed"] == c["attacked_total"]
        assert c["clean_fp"] + c["clean_tn"] == c["clean_total"]
        check_identities(report)

    def test_non_converged_examples_excluded(self):
        ens = constant_ensemble([1, 1, 1], classes=CLASSES, side=SIDE)
        clean = clean_dataset([1])
        suite = stub_suite([1] * 6, converged=[True, False, True, False, False, True])
        report = evaluate(ens, clean, suite, DefenseConfig(t=1.0))
        assert report.counts["attacked_total"] == 3
        assert report.excluded_non_converged == 3

    def test_empty_inputs_rejected(self):
        ens = constant_ensemble([1, 1, 1], classes=CLASSES, side=SIDE)
        clean = clean_dataset([1])
        empty_clean = LabeledDataset(
            np.zeros((0, SIDE, SIDE, 1), dtype=np.float32), np.zeros(0, dtype=np.int64), CLASSES, "e"
        )
        with pytest.raises(ValueError):
            evaluate(ens, empty_clean, None, DefenseConfig())
        with pytest.raises(ValueError):
            evaluate(ens, clean, stub_suite([]), DefenseConfig())

    @settings(max_examples=30, deadline=None)
    @given(
        model_labels=st.lists(st.integers(0, CLASSES - 1), min_size=3, max_size=7),
        truths=st.lists(st.integers(0, CLASSES - 1), min_size=1, max_size=10),
        t=st.sampled_from([0.5, 0.75, 1.0]),
        mode=st.sampled_from(["autonomous", "human-in-the-loop"]),
        fusion=st.sampled_from(["full", "serial"]),
    )
    def test_identities_hold_for_arbitrary_outcomes(self, model_labels, truths, t, mode, fusion):
        ens = constant_ensemble(model_labels, classes=CLASSES, side=SIDE)
        clean = clean_dataset(truths)
        suite = stub_suite(truths, seed=11)
        oracle = oracle_for(clean, suite) if mode == "human-in-the-loop" else None
        report = evaluate(ens, clean, suite, DefenseConfig(t=t, ts=t, mode=mode), oracle, fusion=fusion)
        check_identities(report)

    def test_threshold_monotonicity_p1_p7(self):
        ens = constant_ensemble([0, 0, 0, 1, 2], classes=CLASSES, side=SIDE)
        clean = clean_dataset([0, 1, 2, 0, 0])
        suite = stub_suite([0] * 10)
        p1s, p7s = [], []
        for t in (0.5, 0.7, 0.9, 1.0):
            report = evaluate(ens, clean, suite, DefenseConfig(t=t))
            p1s.append(report.p1)
            p7s.append(report.p7)
        assert p1s == sorted(p1s)
        assert p7s == sorted(p7s)


class TestDistinctCounts:
    def test_identical_models_all_d1(self):
        ens = constant_ensemble([3, 3, 3, 3], classes=CLASSES, side=SIDE)
        suite = stub_suite([3, 3, 1, 0])
        hist = distinct_count_histogram(ens, suite)
        assert hist.counts == {1: 4}
        # unanimous label 3 matches ground truth on half the suite
        assert hist.thwarted_given_d1 == 0.5

    def test_mixed_outputs_d2(self):
        ens = constant_ensemble([3, 3, 1], classes=CLASSES, side=SIDE)
        suite = stub_suite([3])
        hist = distinct_count_histogram(ens, suite)
        assert hist.counts == {2: 1}
        assert np.isnan(hist.thwarted_given_d1)


class TestTransferAsr:
    def test_own_base_suite_full_asr(self, tiny_model, tiny_corpus):
        from fmtd.attack import build_attack_suite
        _, _, test_set = tiny_corpus
        suite = build_attack_suite(
            tiny_model, test_set, "targeted-grid",
            AttackConfig(inner_iterations=80, binary_search_steps=5), seed=1,
        )
        assert transfer_asr(tiny_model, suite) == 1.0

    def test_zero_perturbation_suite_asr_zero(self):
        ens_label = 2
        model = constant_ensemble([ens_label], classes=CLASSES, side=SIDE).models[0]
        rng = np.random.default_rng(5)
        examples = []
        for _ in range(4):
            clean = rng.random((SIDE, SIDE, 1)).astype(np.float32)
            examples.append(AdversarialExample(
                clean=clean, adversarial=clean.copy(), perturbation=clean - clean,
                true_label=ens_label, target_label=None, kappa=0.0, distortion=0.0,
                converged=True, base_model_hash="stub",
            ))
        suite = AttackSuite(examples, "non-targeted", AttackConfig(), "stub", "stub", 0)
        assert transfer_asr(model, suite) == 0.0

    def test_asr_vs_distortion_shapes(self):
        model = constant_ensemble([1], classes=CLASSES, side=SIDE).models[0]
        suite = stub_suite([1, 1, 1])
        points = asr_vs_distortion(model, {0.0: suite})
        assert len(points) == 1
        points = asr_vs_distortion(model, {20.0: suite, 0.0: suite})
        assert [p[0] for p in points] == [0.0, 20.0]
        assert points[0][2] == points[1][2]  # same suite, same model: flat curve


class TestReportsOutput:
    def test_csv_columns_fixed_and_parse(self):
        ens = constant_ensemble([1, 1, 2], classes=CLASSES, side=SIDE)
        report = evaluate(ens, clean_dataset([1, 2]), stub_suite([1, 1]), DefenseConfig(t=1.0))
        csv_text = reports_to_csv([report])
        lines = csv_text.strip().split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 2
        assert len(lines[1].split(",")) == len(CSV_COLUMNS)

    def test_json_round_trip_none_for_nan(self):
        ens = constant_ensemble([1, 1, 1], classes=CLASSES, side=SIDE)
        report = evaluate(ens, clean_dataset([1, 2]), None, DefenseConfig(t=1.0))
        rows = json.loads(reports_to_json([report]))
        assert rows[0]["p1"] is None  # no attack side
        assert rows[0]["p15"] == 0.5
        assert list(rows[0].keys()) == list(CSV_COLUMNS)


def test_sweep_reuses_ensembles_across_thresholds(tiny_model, tiny_corpus, tiny_hyper, monkeypatch):
    from fmtd import evaluation as ev

    train_set, val_set, test_set = tiny_corpus
    suite = stub_suite([0, 1, 2, 3], seed=2)
    # stub suite images are 6x6 while the corpus is 12x12; rebuild on the corpus shape
    rng = np.random.default_rng(0)
    examples = []
    for truth in [0, 1, 2, 3]:
        clean = test_set.images[int(np.flatnonzero(test_set.labels == truth)[0])]
        adv = np.clip(clean + rng.normal(0, 0.02, clean.shape), 0, 1).astype(np.float32)
        examples.append(AdversarialExample(
            clean=clean, adversarial=adv, perturbation=adv - clean, true_label=truth,
            target_label=(truth + 1) % 4, kappa=0.0,
            distortion=float(np.linalg.norm((adv - clean).astype(np.float64))),
            converged=True, base_model_hash="stub",
        ))
    suite = AttackSuite(examples, "targeted-grid", AttackConfig(), test_set.name, "stub", 0)

    calls = {"n": 0}
    real = ev.generate_ensemble

    def counting(*args, **kwargs):
        calls["n"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(ev, "generate_ensemble", counting)
    grid = SweepGrid(n_values=(3,), w_values=(0.2,), thresholds=(0.6, 1.0), seeds=(0,))
    reports = ev.sweep(tiny_model, grid, train_set, val_set, test_set, suite, fork_hyper=tiny_hyper)
    assert len(reports) == 2
    assert calls["n"] == 1  # one ensemble serves both thresholds
    assert {r.threshold for r in reports} == {0.6, 1.0}
