"""Metric correctness against brute-force reference implementations."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conseq import metrics
from conseq.errors import ConfigError, DomainError
from conseq.metrics import BoxDescriptionGroup, bbox_diversity, bleu1, consistency_score, image_level_recall


# --- independent reference implementations -------------------------------

def ref_bleu1(candidate, reference):
    if not candidate:
        return 0.0
    pool = list(reference)
    matched = 0
    for tok in candidate:
        if tok in pool:
            pool.remove(tok)
            matched += 1
    precision = matched / len(candidate)
    bp = 1.0 if len(candidate) > len(reference) else math.exp(1.0 - len(reference) / len(candidate))
    return precision * bp


def ref_box_score(descs):
    # mean over all ordered pairs of distinct captions
    total, count = 0.0, 0
    for i in range(len(descs)):
        for j in range(len(descs)):
            if i != j:
                total += ref_bleu1(descs[i], descs[j])
                count += 1
    return total / count


def ref_consistency(per_image):
    scores = []
    for groups in per_image:
        for descs in groups:
            kept = [d for d in descs if d]
            if len(kept) >= 2:
                scores.append(ref_box_score(kept))
    return 100.0 * sum(scores) / len(scores)


class TestBleu1:
    def test_identical_sequences(self):
        assert bleu1(["a", "b"], ["a", "b"]) == 1.0

    def test_disjoint_vocabulary(self):
        assert bleu1(["a"], ["b"]) == 0.0

    def test_hand_computed_brevity_penalty(self):
        # cand "the table" vs ref "the big table": precision 1, BP exp(-1/2)
        score = bleu1(["the", "table"], ["the", "big", "table"])
        assert score == pytest.approx(math.exp(-0.5))
        assert score == pytest.approx(0.6065, abs=5e-5)

    def test_empty_candidate_zero(self):
        assert bleu1([], ["a"]) == 0.0

    def test_empty_reference_domain_error(self):
        with pytest.raises(DomainError):
            bleu1(["a"], [])

    def test_clipping(self):
        # candidate repeats a token beyond its reference count
        assert bleu1(["a", "a", "a"], ["a", "b", "c"]) == pytest.approx(1.0 / 3.0)

    def test_not_symmetric_when_lengths_differ(self):
        a, b = ["x", "y"], ["x"]
        assert bleu1(a, b) != bleu1(b, a)

    @given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=6),
           st.lists(st.sampled_from("abcd"), min_size=1, max_size=6))
    @settings(max_examples=120, deadline=None)
    def test_matches_reference_and_in_range(self, cand, ref):
        score = bleu1(cand, ref)
        assert score == pytest.approx(ref_bleu1(cand, ref), abs=1e-12)
        assert 0.0 <= score <= 1.0


class TestConsistencyScore:
    def _image(self, groups):
        return [[BoxDescriptionGroup.collect(i, g) for i, g in enumerate(groups)]]

    def test_all_identical_is_100(self):
        score, n = consistency_score(self._image([[["white", "table"]] * 3]))
        assert score == pytest.approx(100.0)
        assert n == 1

    def test_disjoint_tokens_zero(self):
        score, _ = consistency_score(self._image([[["desk"], ["table"]]]))
        assert score == 0.0

    def test_hand_computed_mixed_pair(self):
        # {"white table", "table"}: mean(bleu(wt|t), bleu(t|wt)) = (0.5 + e^-1)/2
        score, _ = consistency_score(self._image([[["white", "table"], ["table"]]]))
        expect = 100.0 * 0.5 * (0.5 + math.exp(-1.0))
        assert score == pytest.approx(expect, abs=1e-9)

    def test_order_invariance(self):
        descs = [["a", "b"], ["b"], ["a", "c", "b"]]
        s1, _ = consistency_score(self._image([descs]))
        s2, _ = consistency_score(self._image([descs[::-1]]))
        assert s1 == pytest.approx(s2, abs=1e-12)

    def test_boxes_with_fewer_than_two_descriptions_skipped(self):
        groups = [[["a"]], [["a"], ["a"]]]
        score, n = consistency_score(self._image(groups))
        assert n == 1

    def test_empty_extractions_dropped_and_counted(self):
        g = BoxDescriptionGroup.collect(0, [["a"], [], ["a"]])
        assert g.n_dropped == 1
        assert len(g.descriptions) == 2

    def test_no_qualifying_boxes_is_error(self):
        with pytest.raises(DomainError):
            consistency_score(self._image([[["a"]]]))

    @given(st.lists(st.lists(st.lists(st.sampled_from("abc"), min_size=0, max_size=3),
                             min_size=1, max_size=5), min_size=1, max_size=4))
    @settings(max_examples=60, deadline=None)
    def test_matches_bruteforce_reference(self, groups):
        image = [[BoxDescriptionGroup.collect(i, g) for i, g in enumerate(groups)]]
        qualifying = any(len([d for d in g if d]) >= 2 for g in groups)
        if not qualifying:
            with pytest.raises(DomainError):
                consistency_score(image)
            return
        score, _ = consistency_score(image)
        assert score == pytest.approx(ref_consistency([groups]), abs=1e-12)


class TestBboxDiversity:
    def test_identical_runs_exactly_100(self):
        score, _ = bbox_diversity([[["a", "b"]] * 5])
        assert score == 100.0

    def test_novel_run_strictly_decreases(self):
        base, _ = bbox_diversity([[["a", "b"]] * 4])
        mixed, _ = bbox_diversity([[["a", "b"]] * 4 + [["zz", "qq"]]])
        assert mixed < base

    def test_all_distinct_tokens_zero(self):
        score, _ = bbox_diversity([[["a"], ["b"], ["c"]]])
        assert score == 0.0

    def test_fewer_than_two_runs_config_error(self):
        with pytest.raises(ConfigError):
            bbox_diversity([[["a"]]])

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        vocab = ["a", "b", "c", "d"]
        slots = []
        for _ in range(6):
            runs = [[vocab[i] for i in rng.integers(0, 4, size=rng.integers(1, 4))] for _ in range(5)]
            slots.append(runs)
        score, _ = bbox_diversity(slots)
        expect = 100.0 * np.mean([ref_box_score([d for d in runs if d]) for runs in slots
                                  if len([d for d in runs if d]) >= 2])
        assert score == pytest.approx(expect, abs=1e-12)


class TestImageLevelRecall:
    def test_superset_generation_100(self):
        score, _ = image_level_recall([([["a", "b"]], [["a"], ["b", "c"]])])
        assert score == 100.0

    def test_empty_generation_zero(self):
        score, _ = image_level_recall([([["a", "b"]], [])])
        assert score == 0.0

    def test_half_coverage_averaging(self):
        per_image = [([["a"]], [["a"]]), ([["b"]], [["zz"]])]
        score, n = image_level_recall(per_image)
        assert score == pytest.approx(50.0)
        assert n == 2

    def test_empty_ground_truth_error(self):
        with pytest.raises(DomainError):
            image_level_recall([([], [["a"]])])


class TestReportRoundtrip:
    def test_write_and_read(self, tmp_path):
        path = tmp_path / "report.csv"
        metrics.write_metric_report(path, [{"metric": "consistency", "value": 36.43, "n_items": 12}], "abc123")
        rows = metrics.read_metric_report(path)
        assert rows[0]["metric"] == "consistency"
        assert float(rows[0]["value"]) == pytest.approx(36.43)
        assert rows[0]["config_hash"] == "abc123"
