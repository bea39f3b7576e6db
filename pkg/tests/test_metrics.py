"""Metrics tests: confusion counts, F1 conventions, and the three
evaluation views."""

from __future__ import annotations

import numpy as np
import pytest

from fedsim import (
    ExperimentConfig,
    LayerSpec,
    ModelArch,
    ModelWeights,
    SyntheticSpec,
    TrainingConfig,
    confusion,
    evaluate,
    evaluate_generalization,
    evaluate_global,
    evaluate_personalization,
    forward,
    init_model,
    macro_f1,
    run_experiment,
)
from fedsim.data import WindowSet
from fedsim.fabric import LayerWeights
from fedsim.metrics import ConfusionMatrix, accuracy, score_model, weighted_f1

from conftest import dense_arch


def cm(rows) -> ConfusionMatrix:
    return ConfusionMatrix(np.asarray(rows, dtype=np.int64))


class TestConfusion:
    def test_perfect_predictions_are_diagonal(self):
        truth = np.array([0, 1, 2, 1, 0])
        out = confusion(truth, truth, 3)
        assert np.array_equal(out.counts, np.diag([2, 2, 1]))

    def test_constant_predictor_fills_one_column(self):
        truth = np.array([0, 1, 2, 2])
        out = confusion(truth, np.zeros(4, dtype=int), 3)
        assert np.array_equal(out.counts[:, 0], [1, 1, 2])
        assert out.counts[:, 1:].sum() == 0

    def test_matches_counting_loop_oracle(self, rng):
        truth = rng.integers(0, 5, size=100)
        preds = rng.integers(0, 5, size=100)
        out = confusion(truth, preds, 5)
        expected = np.zeros((5, 5), dtype=int)
        for t, p in zip(truth, preds):
            expected[t, p] += 1
        assert np.array_equal(out.counts, expected)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="truth"):
            confusion([0, 1], [0], 2)

    def test_out_of_range_labels_rejected(self):
        with pytest.raises(ValueError, match="class count"):
            confusion([0, 3], [0, 1], 3)


class TestMacroF1:
    def test_perfect_diagonal_is_one(self):
        assert macro_f1(cm([[5, 0], [0, 7]])) == 1.0

    def test_symmetric_half_case(self):
        # per-class precision = recall = 0.5 -> per-class F1 = 0.5
        assert macro_f1(cm([[1, 1], [1, 1]])) == pytest.approx(0.5)

    def test_absent_class_excluded_from_mean(self):
        # class 2 never predicted and absent from truth
        matrix = cm([[4, 0, 0], [0, 6, 0], [0, 0, 0]])
        assert macro_f1(matrix) == 1.0

    def test_zero_division_inside_class_gives_zero_f1(self):
        # class 1 has support but is never predicted
        matrix = cm([[3, 0], [2, 0]])
        per_class_0 = 2 * (3 / 5) * 1.0 / ((3 / 5) + 1.0)
        assert macro_f1(matrix) == pytest.approx((per_class_0 + 0.0) / 2)

    def test_permutation_invariance(self, rng):
        truth = rng.integers(0, 4, size=200)
        preds = rng.integers(0, 4, size=200)
        base = macro_f1(confusion(truth, preds, 4))
        for _ in range(5):
            perm = rng.permutation(4)
            assert macro_f1(confusion(perm[truth], perm[preds], 4)) == pytest.approx(base)

    def test_weighted_f1_and_accuracy(self):
        matrix = cm([[8, 2], [1, 9]])
        assert accuracy(matrix) == pytest.approx(17 / 20)
        assert weighted_f1(matrix) <= 1.0
        assert macro_f1(cm([[0, 0], [0, 5]])) == 1.0


def perfect_two_class_setup():
    """A hand-built model that classifies sign(x) perfectly."""
    arch = ModelArch(1, 1, (
        LayerSpec("dense", width=2, activation="none"),
        LayerSpec("softmax-output", width=2),
    ))
    model = ModelWeights((
        LayerWeights(np.array([[-5.0, 5.0]]), np.zeros(2)),
        LayerWeights(np.eye(2) * 4.0, np.zeros(2)),
    ))
    x = np.array([[-1.0], [-0.5], [0.5], [1.0]])[:, :, None]
    labels = np.array([0, 0, 1, 1])
    return model, arch, WindowSet(x, labels)


class TestEvaluateGlobal:
    def test_perfect_toy_model_scores_one(self):
        model, arch, ws = perfect_two_class_setup()
        bundle = evaluate_global(model, arch, ws)
        assert bundle.accuracy == bundle.macro_f1 == 1.0

    def test_majority_predictor_accuracy_vs_macro_f1(self):
        # hand-built 90/10 set scored by an always-majority model
        arch = ModelArch(1, 1, (
            LayerSpec("dense", width=2, activation="none"),
            LayerSpec("softmax-output", width=2),
        ))
        model = ModelWeights((
            LayerWeights(np.zeros((1, 2)), np.array([5.0, 0.0])),
            LayerWeights(np.eye(2), np.zeros(2)),
        ))
        x = np.zeros((10, 1, 1))
        labels = np.array([0] * 9 + [1])
        bundle = evaluate_global(model, arch, WindowSet(x, labels))
        assert bundle.accuracy == pytest.approx(0.9)
        # majority share 0.9 but class 1 contributes F1 = 0
        assert bundle.macro_f1 == pytest.approx((2 * 0.9 / 1.9) / 2)
        assert bundle.macro_f1 < bundle.accuracy - 0.3

    def test_equals_prediction_metric_composition(self, rng):
        arch = dense_arch(4, 6, 3)
        model = init_model(arch, 1)
        ws = WindowSet(rng.normal(size=(40, 4, 1)), rng.integers(0, 3, 40))
        bundle = evaluate_global(model, arch, ws)
        preds = evaluate(model, arch, ws.windows)
        assert bundle.macro_f1 == macro_f1(confusion(ws.labels, preds, 3))

    def test_empty_test_set_rejected(self):
        model, arch, _ = perfect_two_class_setup()
        empty = WindowSet(np.zeros((0, 1, 1)), np.zeros(0, dtype=int))
        with pytest.raises(ValueError, match="empty"):
            evaluate_global(model, arch, empty)


class TestPersonalizationAndGeneralization:
    def test_single_client_std_zero(self):
        model, arch, ws = perfect_two_class_setup()
        mean, std, scores = evaluate_personalization([(model, ws)], arch)
        assert std == 0.0
        assert scores == [mean]

    def test_two_client_arithmetic(self):
        # population stats of scores 0.9 and 0.7
        scores = np.array([0.9, 0.7])
        assert scores.mean() == pytest.approx(0.8)
        assert scores.std() == pytest.approx(0.1)

    def test_matches_loop_oracle(self, rng):
        arch = dense_arch(4, 6, 3)
        entries = []
        for k in range(5):
            model = init_model(arch, 50 + k)
            ws = WindowSet(rng.normal(size=(30, 4, 1)), rng.integers(0, 3, 30))
            entries.append((model, ws))
        mean, std, scores = evaluate_personalization(entries, arch)
        expected = [score_model(m, arch, w).macro_f1 for m, w in entries]
        assert scores == expected
        assert mean == pytest.approx(float(np.mean(expected)))
        assert std == pytest.approx(float(np.std(expected)))

    def test_generalization_excludes_missing_with_warning(self, rng):
        arch = dense_arch(4, 6, 3)
        ws = WindowSet(rng.normal(size=(30, 4, 1)), rng.integers(0, 3, 30))
        models = [init_model(arch, 1), None, init_model(arch, 2)]
        with pytest.warns(UserWarning, match="never evaluated"):
            mean, std, scores = evaluate_generalization(models, arch, ws)
        assert scores[1] is None
        assert len([s for s in scores if s is not None]) == 2


class TestSnapshotTracking:
    def _tiny_run(self, algorithm="local-only", seed=6, rounds=6):
        arch = ModelArch(128, 6, (
            LayerSpec("dense", width=8, activation="relu"),
            LayerSpec("softmax-output", width=4),
        ))
        data = SyntheticSpec(clients=3, classes=4, dirichlet_alpha=0.5,
                             samples_per_client=(1200, 1500), seed=seed)
        cfg = ExperimentConfig(
            algorithm=algorithm, model=arch, data=data, rounds=rounds,
            training=TrainingConfig(local_epochs=2, learning_rate=0.05,
                                    batch_size=16),
            seed=seed, eval_every=1)
        return arch, run_experiment(cfg)

    def test_round_one_best_equals_current(self):
        arch, res = self._tiny_run(rounds=1)
        for st in res.states:
            assert st.best_round == 1
            assert st.best_model is st.model

    def test_best_is_running_max_and_hash_stable(self):
        from fedsim.container import serialize_model
        import hashlib
        arch, res = self._tiny_run()
        for st in res.states:
            history = [r.per_client_personalization[st.id] for r in res.reports]
            assert st.best_score == pytest.approx(max(history))
            assert st.best_round == history.index(max(history)) + 1
            blob = serialize_model(st.best_model)
            assert hashlib.sha256(blob).hexdigest() == st.best_hash

    def test_generalization_matches_exhaustive_rescoring_oracle(self):
        # oracle: re-score every historical snapshot; best per client must be
        # the one the tracker kept
        arch, res = self._tiny_run(seed=8)
        final = res.reports[-1]
        for st in res.states:
            history = [r.per_client_personalization[st.id] for r in res.reports]
            assert st.best_score == max(history)
            expected = score_model(st.best_model, arch, res.global_test).macro_f1
            assert final.per_client_generalization[st.id] == pytest.approx(expected)


def test_heterogeneity_gap_ordering():
    # local-only gap (personalization - generalization) shrinks as clients
    # become homogeneous; strict ordering across two fixed-seed corpora
    arch = ModelArch(128, 6, (
        LayerSpec("dense", width=16, activation="relu"),
        LayerSpec("softmax-output", width=8),
    ))
    tr = TrainingConfig(local_epochs=5, learning_rate=0.05, batch_size=16)
    gaps = {}
    for alpha in (0.1, 100.0):
        data = SyntheticSpec(clients=5, classes=8, dirichlet_alpha=alpha,
                             samples_per_client=(2000, 2500), seed=3)
        res = run_experiment(ExperimentConfig(
            algorithm="local-only", model=arch, data=data, rounds=6,
            training=tr, seed=3, eval_every=6))
        report = res.reports[-1]
        gaps[alpha] = report.pers_mean - report.gen_mean
    assert gaps[0.1] > gaps[100.0]
