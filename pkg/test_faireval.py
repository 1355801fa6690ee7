import logging

import numpy as np
import pytest

import faireval
from errors import DataError, DomainError
from faireval import (
    REFERENCE_RESULTS,
    EvaluationConfig,
    GroupReport,
    VerificationPair,
    best_threshold,
    candidate_thresholds,
    compare_reports,
    delta_csv,
    delta_markdown,
    evaluate_embeddings,
    group_report,
    make_pairs,
    pair_similarities,
    read_reports_csv,
    reports_csv,
    reports_markdown,
    threshold_accuracy,
    train_group_classifier,
    transfer_success,
    verify_accuracy,
)
from synthface import (
    GROUPS,
    DomainDataset,
    GenerationConfig,
    GroupLabel,
    build_dataset,
    with_provenance,
)

CONSISTENT_ROWS = [key for key in REFERENCE_RESULTS if key[0] != "imbalanced"]
SOFTMAX_BASE = (69.1, 73.7, 79.25, 76.78)


@pytest.fixture(scope="module")
def verification():
    return build_dataset(GenerationConfig.balanced(4, 3, seed=9, split="verification"))


@pytest.fixture(scope="module")
def classifier():
    train = build_dataset(GenerationConfig.balanced(5, 4, seed=1))
    return train_group_classifier(train)


def subject_embeddings(dataset, noise=0.01, seed=0):
    rng = np.random.default_rng(seed)
    ids = dataset.subject_ids()
    out = {}
    for s in dataset:
        vector = np.zeros(len(ids))
        vector[ids.index(s.subject_id)] = 1.0
        out[s.sample_id] = vector + rng.normal(0, noise, len(ids))
    return out


def table_report(key):
    row = REFERENCE_RESULTS[key]
    return GroupReport(
        accuracies=dict(zip(GROUPS, row["per_group"])),
        avg=row["avg"],
        stdv=row["stdv"],
        loss=key[1],
    )


def brute_force_accuracy(sims, labels, folds):
    """Contiguous folds; every midpoint and both sentinels tried on each train part."""
    usable = len(sims) - len(sims) % folds
    size = usable // folds
    held_out = []
    for k in range(folds):
        test = list(range(k * size, (k + 1) * size))
        train = [i for i in range(usable) if i < k * size or i >= (k + 1) * size]
        values = sorted({float(sims[i]) for i in train})
        candidates = [values[0] - 1.0]
        for low, high in zip(values[:-1], values[1:]):
            candidates.append((low + high) / 2.0)
        candidates.append(values[-1] + 1.0)
        best, best_correct = None, -1
        for t in candidates:
            correct = sum(1 for i in train if (sims[i] > t) == labels[i])
            if correct > best_correct:
                best, best_correct = t, correct
        predicted = np.array([sims[i] > best for i in test])
        held_out.append(np.mean(predicted == labels[test]))
    return float(np.mean(held_out) * 100.0)


class TestGroupReport:
    """Mean and sample standard deviation over the four groups"""

    @pytest.mark.parametrize("key", CONSISTENT_ROWS, ids=lambda k: "-".join(k))
    def test_reference_rows_reproduce(self, key):
        row = REFERENCE_RESULTS[key]
        report = group_report(row["per_group"], loss=key[1], dataset=key[2])
        assert report.avg == row["avg"]
        assert report.stdv == row["stdv"]

    def test_half_way_average_rounds_down(self):
        assert group_report((81.28, 82.83, 85.95, 84.72)).avg == 83.69

    def test_constant_accuracies(self):
        report = group_report({"A": 91.0, "E": 91.0, "C": 91.0, "I": 91.0})
        assert report.avg == 91.0
        assert report.stdv == 0.0

    def test_inconsistent_published_row(self):
        row = REFERENCE_RESULTS[("imbalanced", "arcface", "VGGFace2")]
        report = group_report(row["per_group"])
        assert report.avg == 90.74
        assert report.stdv != row["stdv"]

    def test_wrong_group_count(self):
        with pytest.raises(DataError):
            group_report((90.0, 91.0, 92.0))

    def test_missing_group(self):
        with pytest.raises(DataError):
            group_report({"A": 90.0, "E": 91.0, "C": 92.0})

    def test_out_of_range(self):
        with pytest.raises(DataError):
            group_report((90.0, 91.0, 101.0, 92.0))

    def test_csv_row(self):
        report = group_report(SOFTMAX_BASE, loss="softmax", dataset="base")
        assert report.csv_row() == [
            "softmax",
            "base",
            "69.10",
            "73.70",
            "79.25",
            "76.78",
            "74.71",
            "4.37",
        ]


class TestCompareReports:
    """Treated minus baseline deltas"""

    def test_softmax_balanced(self):
        delta = compare_reports(
            table_report(("balanced", "softmax", "VGGFace2 1200")),
            table_report(("balanced", "softmax", "VGGFace2 1200 Races")),
        )
        assert delta.d_stdv == -0.21
        assert delta.stdv_decreased
        assert delta.per_group[GroupLabel.A] == 1.55
        assert delta.per_group[GroupLabel.E] == 1.98

    def test_imbalanced_arcface(self):
        delta = compare_reports(
            table_report(("imbalanced", "arcface", "VGGFace2")),
            table_report(("imbalanced", "arcface", "VGGFace2 8631 Races")),
        )
        assert delta.d_avg == -0.24
        assert delta.per_group[GroupLabel.A] > 0
        assert delta.stdv_decreased

    def test_identical_reports(self):
        report = group_report((80.0, 81.0, 82.0, 83.0), loss="cosface")
        delta = compare_reports(report, report)
        assert delta.is_zero and not delta.stdv_decreased

    def test_mismatched_loss(self):
        a = group_report((80.0, 81.0, 82.0, 83.0), loss="cosface")
        b = group_report((80.0, 81.0, 82.0, 83.0), loss="arcface")
        with pytest.raises(DataError):
            compare_reports(a, b)

    def test_delta_tables(self):
        delta = compare_reports(
            table_report(("balanced", "softmax", "VGGFace2 1200")),
            table_report(("balanced", "softmax", "VGGFace2 1200 Races")),
        )
        assert "-0.21" in delta_markdown([delta])
        row = delta_csv([delta]).splitlines()[1]
        assert row == "softmax,1.55,1.98,1.02,1.50,1.51,-0.21,yes"


class TestThresholds:
    """Threshold search and k-fold accuracy"""

    def test_candidates(self):
        candidates = candidate_thresholds(np.array([0.5, 0.1, 0.5, 0.3]))
        np.testing.assert_allclose(candidates, [-0.9, 0.2, 0.4, 1.5])

    def test_best_threshold_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            sims = np.round(rng.uniform(-1, 1, 40), 1)
            labels = rng.random(40) < 0.5
            t = best_threshold(sims, labels)
            achieved = np.mean((sims > t) == labels)
            cuts = np.concatenate([[-np.inf], np.unique(sims)])
            oracle = max(np.mean((sims > c) == labels) for c in cuts)
            assert achieved == oracle

    def test_ties_pick_smallest_threshold(self):
        sims = np.array([0.1, 0.2, 0.3, 0.4])
        labels = np.array([True, False, True, False])
        assert best_threshold(sims, labels) == pytest.approx(-0.9)

    def test_perfectly_separated(self):
        rng = np.random.default_rng(2)
        labels = rng.permutation(np.arange(100) < 50)
        high, low = rng.uniform(0.9, 1.0, 100), rng.uniform(-1.0, -0.9, 100)
        sims = np.where(labels, high, low)
        assert threshold_accuracy(sims, labels, folds=10) == 100.0

    def test_monotone_rescale_invariance(self):
        rng = np.random.default_rng(3)
        sims = rng.uniform(-1, 1, 60)
        labels = rng.random(60) < sims / 2 + 0.5
        expected = threshold_accuracy(sims, labels, 6)
        assert threshold_accuracy(2 * sims + 1, labels, 6) == expected

    def test_uneven_folds_are_truncated(self, caplog):
        sims = np.linspace(-1, 1, 25)
        labels = sims > 0
        with caplog.at_level(logging.WARNING, logger="faireval"):
            assert threshold_accuracy(sims, labels, folds=10) == 100.0
        assert "Truncating 25 pairs to 20" in caplog.text

    def test_verify_accuracy_matches_brute_force(self):
        rng = np.random.default_rng(40)
        for _ in range(50):
            n = int(rng.integers(10, 41))
            embeddings = {i: rng.integers(-2, 3, 3).astype(float) for i in range(n)}
            pairs = [
                VerificationPair(int(a), int(b), bool(same), GroupLabel.A)
                for a, b, same in zip(
                    rng.integers(0, n, n), rng.integers(0, n, n), rng.random(n) < 0.5
                )
            ]
            labels = np.array([p.same for p in pairs])
            sims = pair_similarities(embeddings, pairs)
            expected = brute_force_accuracy(sims, labels, 5)
            assert verify_accuracy(embeddings, pairs, 5) == expected

    def test_shuffled_labels_near_chance(self):
        accuracies = []
        for seed in range(9):
            rng = np.random.default_rng(seed)
            sims = rng.uniform(-1, 1, 600)
            labels = rng.permutation(np.arange(600) < 300)
            accuracies.append(threshold_accuracy(sims, labels, 10))
        assert abs(np.median(accuracies) - 50.0) <= 7.0

    def test_too_few_pairs(self):
        with pytest.raises(DataError):
            threshold_accuracy([0.1, 0.2], [True, False], folds=10)

    def test_single_fold(self):
        with pytest.raises(DomainError):
            threshold_accuracy([0.1, 0.2], [True, False], folds=1)


class TestPairs:
    """Verification pair sampling"""

    def test_counts_and_group(self, verification):
        pairs = make_pairs(verification, "E", n_pos=10, n_neg=20, seed=1)
        assert len(pairs) == 30
        assert sum(p.same for p in pairs) == 10
        for p in pairs:
            a, b = verification[p.a], verification[p.b]
            assert a.group == b.group == GroupLabel.E
            assert (a.subject_id == b.subject_id) == p.same
            assert p.a < p.b

    def test_deterministic(self, verification):
        first = make_pairs(verification, "A", 5, 5, seed=2)
        assert first == make_pairs(verification, "A", 5, 5, seed=2)
        assert first != make_pairs(verification, "A", 5, 5, seed=3)

    def test_not_enough_pairs(self, verification):
        with pytest.raises(DataError) as e:
            make_pairs(verification, "C", n_pos=13, n_neg=5)
        assert e.value.error_data["available_pos"] == 12

    def test_single_subject(self):
        single = build_dataset(GenerationConfig.balanced(1, 4, split="verification"))
        with pytest.raises(DataError):
            make_pairs(single, "A", 1, 1)

    def test_zero_embedding_scores_zero(self):
        pairs = [VerificationPair(0, 1, True, GroupLabel.A)]
        sims = pair_similarities({0: np.zeros(3), 1: np.ones(3)}, pairs)
        assert sims.tolist() == [0.0]

    def test_missing_embedding(self):
        with pytest.raises(DataError):
            pair = VerificationPair(0, 1, False, GroupLabel.A)
            pair_similarities({0: np.ones(2)}, [pair])

    def test_both_members_are_looked_up(self):
        embeddings = {0: [1.0, 0.0], 1: [2.0, 0.0], 2: [1.0, 0.0], 3: [0.0, 1.0]}
        pairs = [
            VerificationPair(0, 1, True, GroupLabel.A),
            VerificationPair(2, 3, False, GroupLabel.A),
        ]
        np.testing.assert_allclose(pair_similarities(embeddings, pairs), [1.0, 0.0])

    @pytest.mark.parametrize("a, b, absent", [(5, 1, 5), (1, 7, 7)])
    def test_missing_member_is_named(self, a, b, absent):
        with pytest.raises(DataError) as e:
            pair_similarities({1: np.ones(2)}, [VerificationPair(a, b, True, "A")])
        assert e.value.error_data["sample_ids"] == [absent]


class TestEvaluateEmbeddings:
    """Per-group accuracy report from embeddings"""

    def test_dataset_label_is_metadata(self, verification):
        cfg = EvaluationConfig(n_pos=10, n_neg=10, folds=5)
        report = evaluate_embeddings(
            subject_embeddings(verification),
            verification,
            cfg,
            loss="softmax",
            dataset="synthetic 5/5/40/5",
            fingerprint="abc",
        )
        assert report.dataset == "synthetic 5/5/40/5"
        assert report.fingerprint == "abc"

    def test_pooled_folds_mix_groups(self, verification, monkeypatch):
        calls = []
        scorer = faireval.verify_accuracy

        def recording(embeddings, pairs, folds=10):
            calls.append(list(pairs))
            return scorer(embeddings, pairs, folds)

        monkeypatch.setattr(faireval, "verify_accuracy", recording)
        cfg = EvaluationConfig(n_pos=10, n_neg=10, folds=5)
        evaluate_embeddings(subject_embeddings(verification), verification, cfg)
        pooled = max(calls, key=len)
        assert len(pooled) == 80
        size = len(pooled) // 5
        for k in range(5):
            assert len({p.group for p in pooled[k * size : (k + 1) * size]}) > 1

    def test_separable_embeddings(self, verification):
        cfg = EvaluationConfig(n_pos=10, n_neg=10, folds=5, workers=2)
        report = evaluate_embeddings(
            subject_embeddings(verification), verification, cfg, loss="arcface", seed=3
        )
        assert all(report.accuracy(g) == 100.0 for g in GROUPS)
        assert report.stdv == 0.0
        assert report.pooled == 100.0
        assert report.loss == "arcface"

    def test_verify_accuracy_is_scale_free(self, verification):
        pairs = make_pairs(verification, "I", 10, 10, seed=0)
        embeddings = subject_embeddings(verification, noise=0.5)
        scaled = {k: 3.0 * v for k, v in embeddings.items()}
        expected = verify_accuracy(embeddings, pairs, 5)
        assert verify_accuracy(scaled, pairs, 5) == expected


class TestReportFiles:
    """CSV and markdown rendering"""

    def test_csv_reads_back(self):
        report = group_report(SOFTMAX_BASE, loss="softmax", dataset="base")
        text = reports_csv([report])
        header, *lines = text.splitlines()
        assert header == "loss,dataset,african,asian,caucasian,indian,avg,stdv"
        assert text.startswith(header + "\r\n")
        rows = [dict(zip(header.split(","), line.split(","))) for line in lines]
        (loaded,) = read_reports_csv(rows)
        assert loaded.stdv == 4.37 and loaded.accuracy("C") == 79.25

    def test_malformed_row(self):
        with pytest.raises(DataError):
            read_reports_csv([{"loss": "softmax", "dataset": "x", "avg": "1"}])

    def test_markdown_pooled_column(self):
        report = group_report((80.0, 81.0, 82.0, 83.0), loss="cosface", pooled=81.4)
        lines = reports_markdown([report]).splitlines()
        assert "Pooled" in lines[0]
        assert "81.40" in lines[2]


class TestGroupClassifier:
    """Domain classifier and transfer assessment"""

    def test_training_accuracy(self, classifier):
        data = build_dataset(GenerationConfig.balanced(5, 4, seed=1))
        assert classifier.accuracy(data.samples) >= 95.0

    def test_constant_image_falls_back(self, classifier):
        assert classifier.predict(np.full((1, 256), 0.5)) == [GroupLabel.A]

    def test_sample_order_does_not_matter(self, classifier):
        data = build_dataset(GenerationConfig.balanced(5, 4, seed=1))
        reordered = train_group_classifier(DomainDataset(list(reversed(data.samples))))
        fresh = build_dataset(GenerationConfig.balanced(2, 2, seed=7))
        assert reordered.predict(fresh.samples) == classifier.predict(fresh.samples)

    def test_single_group(self):
        data = build_dataset(GenerationConfig.balanced(2, 2))
        with pytest.raises(DataError):
            train_group_classifier(DomainDataset(data.in_group("A")))

    def test_transfer_success(self, classifier):
        data = build_dataset(GenerationConfig.balanced(3, 2, seed=11))
        a_samples = data.in_group("A")
        c_pixels = [s.pixels for s in data.in_group("C")]
        hits = [
            with_provenance(s, p, GroupLabel.C) for s, p in zip(a_samples, c_pixels)
        ]
        misses = [with_provenance(s, s.pixels, GroupLabel.E) for s in a_samples]
        assessment = transfer_success(hits + misses, classifier)
        a_to_e, a_to_c = (GroupLabel.A, GroupLabel.E), (GroupLabel.A, GroupLabel.C)
        assert list(assessment.rates) == [a_to_e, a_to_c]
        assert assessment.rates[a_to_c] == 100.0
        assert assessment.rates[a_to_e] == 0.0
        assert assessment.overall == 50.0
        assert assessment.to_csv().splitlines() == [
            "mapping,success_rate",
            "A->E,0.00",
            "A->C,100.00",
            "overall,50.00",
        ]

    def test_transfer_rejects_originals(self, classifier):
        data = build_dataset(GenerationConfig.balanced(1, 2))
        with pytest.raises(DataError):
            transfer_success(data.samples, classifier)

    def test_transfer_rejects_empty(self, classifier):
        with pytest.raises(DataError):
            transfer_success([], classifier)
