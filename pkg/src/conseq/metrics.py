"""Caption evaluation: BLEU-1, per-box consistency, cross-run box
description diversity, and image-level word recall.

Pair scores use unordered pairs, each contributing the mean of both BLEU
directions, so every corpus score is invariant to caption listing order.
Tokens are already split (whitespace tokenization of a closed vocabulary,
no stemming).
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, DomainError


def bleu1(candidate: list[str], reference: list[str]) -> float:
    """Clipped unigram precision times the brevity penalty.

    Empty candidate scores 0; an empty reference is a domain error. Not
    symmetric when lengths differ.
    """
    if not reference:
        raise DomainError("bleu1 reference must be nonempty")
    if not candidate:
        return 0.0
    ref_counts = Counter(reference)
    cand_counts = Counter(candidate)
    clipped = sum(min(n, ref_counts[tok]) for tok, n in cand_counts.items())
    precision = clipped / len(candidate)
    bp = math.exp(min(0.0, 1.0 - len(reference) / len(candidate)))
    return precision * bp


def pair_bleu(a: list[str], b: list[str]) -> float:
    """Order-free pair score: mean of both BLEU-1 directions."""
    return 0.5 * (bleu1(a, b) + bleu1(b, a))


def _mean_pairwise(descriptions: list[list[str]]) -> float:
    total = 0.0
    n = len(descriptions)
    for i in range(n):
        for j in range(i + 1, n):
            total += pair_bleu(descriptions[i], descriptions[j])
    return total / (n * (n - 1) / 2)


@dataclass
class BoxDescriptionGroup:
    """Descriptions of one box extracted from the captions mentioning it.

    Empty extractions are dropped at construction and tallied in n_dropped.
    """

    box_id: int
    descriptions: list[list[str]] = field(default_factory=list)
    n_dropped: int = 0

    @classmethod
    def collect(cls, box_id: int, raw: list[list[str]]) -> "BoxDescriptionGroup":
        kept = [d for d in raw if d]
        return cls(box_id=box_id, descriptions=kept, n_dropped=len(raw) - len(kept))

    def qualifies(self) -> bool:
        return len(self.descriptions) >= 2


def consistency_score(per_image_groups: list[list[BoxDescriptionGroup]]) -> tuple[float, int]:
    """Mean over qualifying boxes of the average pairwise BLEU-1 among each
    box's descriptions, over the whole corpus, scaled to [0, 100].

    Only boxes mentioned by at least two captions (after dropping empty
    extractions) contribute. Returns (score, n_boxes).
    """
    box_scores = []
    for groups in per_image_groups:
        for g in groups:
            if g.qualifies():
                box_scores.append(_mean_pairwise(g.descriptions))
    if not box_scores:
        raise DomainError("consistency score undefined: no box has two or more descriptions")
    return 100.0 * sum(box_scores) / len(box_scores), len(box_scores)


def bbox_diversity(slot_descriptions: list[list[list[str]]]) -> tuple[float, int]:
    """Cross-run diversity of box-in-relation descriptions; lower = more
    diverse.

    Each entry holds one box-in-relation slot's descriptions across R >= 2
    captioning runs; the score is the mean pairwise BLEU-1 within each slot,
    averaged over slots, scaled to [0, 100]. Slots with fewer than two
    nonempty descriptions are skipped. Returns (score, n_slots).
    """
    slot_scores = []
    for runs in slot_descriptions:
        if len(runs) < 2:
            raise ConfigError(f"bbox_diversity needs >= 2 runs per slot, got {len(runs)}")
        kept = [d for d in runs if d]
        if len(kept) >= 2:
            slot_scores.append(_mean_pairwise(kept))
    if not slot_scores:
        raise DomainError("diversity undefined: no slot has two or more descriptions")
    return 100.0 * sum(slot_scores) / len(slot_scores), len(slot_scores)


def image_level_recall(per_image: list[tuple[list[list[str]], list[list[str]]]]) -> tuple[float, int]:
    """Share of distinct ground-truth caption words covered by the union of
    generated captions, averaged over images, scaled to [0, 100].

    Each entry is (ground_truth_captions, generated_captions). This is a
    reconstruction of the usual recall-style diversity measure; it is
    reported but not acceptance-bearing.
    """
    scores = []
    for gt_caps, gen_caps in per_image:
        gt_words = {tok for cap in gt_caps for tok in cap}
        if not gt_words:
            raise DomainError("image-level recall needs nonempty ground truth")
        gen_words = {tok for cap in gen_caps for tok in cap}
        scores.append(len(gt_words & gen_words) / len(gt_words))
    if not scores:
        raise DomainError("image-level recall over an empty corpus")
    return 100.0 * sum(scores) / len(scores), len(scores)


def write_metric_report(path, records: list[dict], config_hash: str):
    """CSV metric report: one record per metric (name, value, n_items, config_hash)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "n_items", "config_hash"])
        for rec in records:
            writer.writerow([rec["metric"], f"{rec['value']:.6f}", rec.get("n_items", ""), config_hash])


def read_metric_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
