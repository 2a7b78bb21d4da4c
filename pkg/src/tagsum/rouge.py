"""ROUGE-1/2/L/SU4 F1 with corpus aggregation.

Texts are lowercased and split into word tokens before scoring; stemming
and stopword removal are available but off by default.  Skip-bigrams for
the SU4 variant allow at most ``SKIP_DISTANCE`` intervening tokens, and
the unit multiset additionally contains every unigram (the "SU"
extension).  F-measure is the plain harmonic mean of precision and
recall, zero when both are zero.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

# maximum number of intervening tokens inside a skip-bigram (index gap <= SKIP_DISTANCE + 1)
SKIP_DISTANCE = 4

METRIC_NAMES = ("rouge_1", "rouge_2", "rouge_l", "rouge_su4")

_TOKEN_RE = re.compile(r"\w+")

_STOPWORDS = frozenset(
    "a an and are as at be by for from has he in is it its of on that the to was were will with".split()
)

_SUFFIXES = ("ing", "ed", "es", "s")


def eval_tokenize(text: str, stem: bool = False, remove_stopwords: bool = False) -> list[str]:
    """Lowercased word tokens, optionally stemmed / stopword-filtered."""
    tokens = _TOKEN_RE.findall(text.lower())
    if remove_stopwords:
        tokens = [t for t in tokens if t not in _STOPWORDS]
    if stem:
        tokens = [_stem(t) for t in tokens]
    return tokens


def _stem(token: str) -> str:
    for suffix in _SUFFIXES:
        if token.endswith(suffix) and len(token) > len(suffix) + 2:
            return token[: -len(suffix)]
    return token


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float


def _f_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _overlap_score(cand_units: Counter, ref_units: Counter) -> Score:
    overlap = sum((cand_units & ref_units).values())
    n_cand = sum(cand_units.values())
    n_ref = sum(ref_units.values())
    precision = overlap / n_cand if n_cand else 0.0
    recall = overlap / n_ref if n_ref else 0.0
    return Score(precision, recall, _f_score(precision, recall))


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> Score:
    """Clipped n-gram overlap; n in {1, 2} for the reported metrics."""
    if not reference:
        logger.debug("empty reference in rouge_n")
        return Score(0.0, 0.0, 0.0)
    return _overlap_score(_ngrams(candidate, n), _ngrams(reference, n))


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        curr = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[len(b)]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> Score:
    """Longest-common-subsequence precision/recall."""
    if not reference:
        logger.debug("empty reference in rouge_l")
        return Score(0.0, 0.0, 0.0)
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate) if candidate else 0.0
    recall = lcs / len(reference)
    return Score(precision, recall, _f_score(precision, recall))


def _su_units(tokens: Sequence[str]) -> Counter:
    units: Counter = Counter((t,) for t in tokens)
    for i in range(len(tokens)):
        for j in range(i + 1, min(i + SKIP_DISTANCE + 2, len(tokens))):
            units[(tokens[i], tokens[j])] += 1
    return units


def rouge_su4(candidate: Sequence[str], reference: Sequence[str]) -> Score:
    """Skip-bigram (gap <= 4 intervening tokens) plus unigram overlap."""
    if not reference:
        logger.debug("empty reference in rouge_su4")
        return Score(0.0, 0.0, 0.0)
    return _overlap_score(_su_units(candidate), _su_units(reference))


def score_pair(candidate: Sequence[str], reference: Sequence[str]) -> dict[str, Score]:
    return {
        "rouge_1": rouge_n(candidate, reference, 1),
        "rouge_2": rouge_n(candidate, reference, 2),
        "rouge_l": rouge_l(candidate, reference),
        "rouge_su4": rouge_su4(candidate, reference),
    }


@dataclass
class RougeReport:
    """Per-example scores plus corpus arithmetic means."""

    ids: list[str]
    per_example: list[dict[str, Score]]
    means: dict[str, Score]

    def summary_line(self) -> str:
        parts = [f"{name}={self.means[name].f1:.4f}" for name in METRIC_NAMES]
        return "  ".join(parts)

    def to_json_dict(self) -> dict:
        return {
            "n_examples": len(self.ids),
            "corpus_mean": {name: vars(self.means[name]) for name in METRIC_NAMES},
            "per_example": [
                {"id": ex_id, **{name: vars(scores[name]) for name in METRIC_NAMES}}
                for ex_id, scores in zip(self.ids, self.per_example)
            ],
        }


def evaluate_texts(ids: Sequence[str], candidates: Sequence[str], references: Sequence[str],
                   stem: bool = False, remove_stopwords: bool = False) -> RougeReport:
    """Score aligned candidate/reference texts and average per metric."""
    if not (len(ids) == len(candidates) == len(references)):
        raise ValueError("ids, candidates and references must align")
    per_example = []
    for cand_text, ref_text in zip(candidates, references):
        cand = eval_tokenize(cand_text, stem, remove_stopwords)
        ref = eval_tokenize(ref_text, stem, remove_stopwords)
        per_example.append(score_pair(cand, ref))
    means = {}
    for name in METRIC_NAMES:
        n = max(len(per_example), 1)
        means[name] = Score(
            precision=sum(s[name].precision for s in per_example) / n,
            recall=sum(s[name].recall for s in per_example) / n,
            f1=sum(s[name].f1 for s in per_example) / n,
        )
    return RougeReport(ids=list(ids), per_example=per_example, means=means)


def write_report(report: RougeReport, json_path: str | Path, csv_path: str | Path) -> None:
    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump(report.to_json_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        header = ["id"]
        for name in METRIC_NAMES:
            header += [f"{name}_p", f"{name}_r", f"{name}_f1"]
        writer.writerow(header)
        for ex_id, scores in zip(report.ids, report.per_example):
            row: list = [ex_id]
            for name in METRIC_NAMES:
                s = scores[name]
                row += [f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}"]
            writer.writerow(row)


def pair_predictions(predictions: Iterable[dict], examples: Iterable) -> tuple[list[str], list[str], list[str]]:
    """Align prediction rows with raw examples by id -> (ids, candidates, references)."""
    by_id = {row["id"]: row["prediction"] for row in predictions}
    ids, candidates, references = [], [], []
    for example in examples:
        if example.id not in by_id:
            raise ValueError(f"no prediction for example '{example.id}'")
        ids.append(example.id)
        candidates.append(by_id[example.id])
        references.append(example.related_work)
    return ids, candidates, references
