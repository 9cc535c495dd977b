"""Rank metrics against O(n^2) pairwise and threshold-enumeration oracles."""

import numpy as np
import pytest

from patchvad.errors import EvaluationError
from patchvad.evaluation import (LabeledScores, append_summary, evaluate,
                                 export_curve, pr_ap, pr_curve, roc_auc,
                                 roc_curve)


def pairwise_auc(scores, labels):
    """Count positive-over-negative pairs directly, ties worth half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def enumerated_ap(scores, labels):
    """Walk every distinct threshold from the top, summing P * dR."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores.tolist()), reverse=True):
        picked = scores >= thr
        tp = int(labels[picked].sum())
        precision = tp / int(picked.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def random_instance(seed, n, tie_fraction=0.0):
    r = np.random.default_rng(seed)
    scores = r.uniform(size=n)
    if tie_fraction > 0:
        # quantize a slice of the scores so exact ties occur
        k = int(n * tie_fraction)
        scores[:k] = np.round(scores[:k], 1)
    labels = (r.uniform(size=n) < 0.3).astype(int)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    return LabeledScores(scores, labels, ("synthetic",))


class TestLabeledScores:
    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            LabeledScores([0.1, 0.2], [1])

    def test_bad_labels(self):
        with pytest.raises(EvaluationError, match="0 or 1"):
            LabeledScores([0.1, 0.2], [1, 2])

    def test_non_finite_scores(self):
        with pytest.raises(EvaluationError, match="finite"):
            LabeledScores([0.1, np.nan], [1, 0])

    def test_concat_tracks_videos(self):
        d = LabeledScores.concat([("a", [0.1, 0.9], [0, 1]),
                                  ("b", [0.2], [0])])
        assert d.videos == ("a", "b")
        assert d.n_pos == 1 and d.n_neg == 2

    def test_concat_per_video_mismatch(self):
        with pytest.raises(EvaluationError, match="vid7"):
            LabeledScores.concat([("vid7", [0.1], [0, 1])])


class TestRocAuc:
    def test_perfect_separation(self):
        d = LabeledScores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert roc_auc(d) == 1.0

    def test_perfect_inversion(self):
        d = LabeledScores([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1])
        assert roc_auc(d) == 0.0

    def test_all_tied_is_half(self):
        d = LabeledScores([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1])
        assert roc_auc(d) == 0.5

    def test_chance_level_large_n(self):
        r = np.random.default_rng(7)
        d = LabeledScores(r.uniform(size=20000), r.integers(0, 2, size=20000))
        assert roc_auc(d) == pytest.approx(0.5, abs=0.02)

    def test_single_class_names_videos(self):
        d = LabeledScores([0.1, 0.2], [1, 1], ("cam3",))
        with pytest.raises(EvaluationError, match="cam3"):
            roc_auc(d)

    @pytest.mark.parametrize("seed,n,ties", [(0, 20, 0.0), (1, 100, 0.5),
                                             (2, 200, 0.3), (3, 500, 0.8),
                                             (4, 1000, 0.4), (5, 37, 1.0)])
    def test_matches_pairwise_oracle(self, seed, n, ties):
        d = random_instance(seed, n, ties)
        assert abs(roc_auc(d) - pairwise_auc(d.scores, d.labels)) <= 1e-9

    @pytest.mark.parametrize("seed", range(4))
    def test_monotone_transform_invariance(self, seed):
        d = random_instance(seed, 150, tie_fraction=0.5)
        base = roc_auc(d)
        for f in (lambda x: 3.0 * x + 2.0, lambda x: x ** 3,
                  lambda x: np.exp(x)):
            assert roc_auc(LabeledScores(f(d.scores), d.labels)) == base

    def test_label_flip_complement(self):
        r = np.random.default_rng(11)
        scores = r.permutation(np.arange(300, dtype=np.float64))  # tie-free
        labels = r.integers(0, 2, size=300)
        labels[0], labels[1] = 0, 1
        d1 = LabeledScores(scores, labels)
        d2 = LabeledScores(scores, 1 - labels)
        assert roc_auc(d1) + roc_auc(d2) == pytest.approx(1.0, abs=1e-12)

    def test_trapezoid_agreement(self):
        d = random_instance(9, 400, tie_fraction=0.6)
        fpr, tpr = roc_curve(d)
        assert np.trapezoid(tpr, fpr) == pytest.approx(roc_auc(d), abs=1e-12)


class TestPrAp:
    def test_perfect_ranking(self):
        d = LabeledScores([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert pr_ap(d) == 1.0

    @pytest.mark.parametrize("k,n", [(1, 10), (3, 10), (7, 20), (10, 10)])
    def test_single_positive_at_rank_k(self, k, n):
        scores = np.linspace(1.0, 0.0, n)  # rank i is position i (1-based)
        labels = np.zeros(n, dtype=int)
        labels[k - 1] = 1
        assert pr_ap(LabeledScores(scores, labels)) == pytest.approx(1.0 / k,
                                                                     abs=1e-12)

    def test_no_positives_rejected(self):
        d = LabeledScores([0.1, 0.2], [0, 0], ("v1", "v2"))
        with pytest.raises(EvaluationError, match="v1, v2"):
            pr_ap(d)

    @pytest.mark.parametrize("seed,n,ties", [(0, 50, 0.0), (1, 200, 0.5),
                                             (2, 500, 0.9), (3, 1000, 0.3),
                                             (4, 61, 1.0)])
    def test_matches_threshold_enumeration(self, seed, n, ties):
        d = random_instance(seed, n, ties)
        assert abs(pr_ap(d) - enumerated_ap(d.scores, d.labels)) <= 1e-9

    def test_all_positive_is_one(self):
        r = np.random.default_rng(3)
        d = LabeledScores(r.uniform(size=20), np.ones(20, dtype=int))
        assert pr_ap(d) == 1.0


class TestCurves:
    def test_perfect_roc_three_points(self):
        d = LabeledScores([1.0, 1.0, 0.0, 0.0], [1, 1, 0, 0])
        fpr, tpr = roc_curve(d)
        np.testing.assert_allclose(fpr, [0.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_allclose(tpr, [0.0, 1.0, 1.0], atol=1e-15)

    def test_sweep_variables_monotone(self):
        d = random_instance(5, 300, tie_fraction=0.4)
        fpr, tpr = roc_curve(d)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
        recall, _ = pr_curve(d)
        assert np.all(np.diff(recall) >= 0)

    def test_roc_ends_at_one_one(self):
        d = random_instance(6, 100)
        fpr, tpr = roc_curve(d)
        assert fpr[-1] == 1.0 and tpr[-1] == 1.0

    def test_export_format(self, tmp_path):
        d = random_instance(8, 50, tie_fraction=0.5)
        for kind, header in (("roc", "fpr,tpr"), ("pr", "recall,precision")):
            path = tmp_path / f"{kind}.csv"
            export_curve(d, kind, path)
            lines = path.read_text().strip().split("\n")
            assert lines[0] == header
            for line in lines[1:]:
                cells = line.split(",")
                assert len(cells) == 2
                float(cells[0]); float(cells[1])

    def test_export_unknown_kind(self, tmp_path):
        d = random_instance(0, 10)
        with pytest.raises(EvaluationError, match="kind"):
            export_curve(d, "det", tmp_path / "x.csv")

    def test_export_deterministic(self, tmp_path):
        d = random_instance(2, 80, tie_fraction=0.3)
        export_curve(d, "roc", tmp_path / "a.csv")
        export_curve(d, "roc", tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    from patchvad.data import FrameStore, SynthSpec, load_manifest, synth_corpus
    from patchvad.model import HybridModel, ModelConfig
    out = tmp_path_factory.mktemp("acc")
    train, test = synth_corpus(SynthSpec(out_dir=str(out), frame_w=20,
                                         frame_h=20, train_videos=1,
                                         test_videos=1, frames_per_video=8,
                                         seed=5, anomaly_cells=1))
    model = HybridModel(ModelConfig(frame_w=20, frame_h=20), seed=0)
    return (model, FrameStore(load_manifest(train)),
            FrameStore(load_manifest(test)))


class TestPositionAccuracy:
    def test_counts_every_train_cuboid(self, corpus):
        from patchvad.evaluation import position_accuracy
        model, train_store, _ = corpus
        out = position_accuracy(model, train_store)
        assert out["count"] == train_store.total_cuboids  # gt-free: all normal
        assert 0.0 <= out["joint"] <= min(out["x"], out["y"])

    def test_anomalous_triples_excluded(self, corpus):
        from patchvad.evaluation import position_accuracy
        model, _, test_store = corpus
        gt = test_store.manifest.videos[0].ground_truth
        n = test_store.manifest.videos[0].n_frames
        normal = sum(1 for t in range(n - 2) if not gt[t:t + 3].any())
        out = position_accuracy(model, test_store)
        assert out["count"] == normal * test_store.grid_w * test_store.grid_h
        assert out["count"] < test_store.total_cuboids

    def test_batch_cap_does_not_change_result(self, corpus):
        from patchvad.evaluation import position_accuracy
        model, train_store, _ = corpus
        a = position_accuracy(model, train_store, batch_cap=3072)
        b = position_accuracy(model, train_store, batch_cap=4)
        assert a == b


class TestSummary:
    def test_evaluate_bundle(self):
        d = LabeledScores([0.1, 0.9, 0.2, 0.8], [0, 1, 0, 1])
        out = evaluate(d)
        assert out == {"auc": 1.0, "ap": 1.0, "n_pos": 2, "n_neg": 2}

    def test_append_summary_lines(self, tmp_path):
        d = LabeledScores([0.1, 0.9], [0, 1])
        log_path = tmp_path / "eval.log"
        append_summary(log_path, "auc", 1.0, d)
        append_summary(log_path, "ap", 1.0, d)
        lines = log_path.read_text().strip().split("\n")
        assert lines[0] == "auc 1 n_pos=1 n_neg=1"
        assert len(lines) == 2
