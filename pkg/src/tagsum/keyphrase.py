"""Keyphrase extraction and keyphrase-reference linking.

The extractor is embedding-free on purpose: candidate n-grams (length 1-3,
no stopword at either end) are scored by smoothed TF-IDF over the supplied
document set, then selected greedily with a diversity penalty of 0.5 for
candidates sharing a token with an already-selected phrase.  An
embedding-based extractor can be plugged in anywhere a ranked
``Keyphrase`` list is accepted.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from tagsum.config import ModelConfig
from tagsum.corpus import RawExample, Tokenizer, tokenize

DIVERSITY_PENALTY = 0.5

STOPWORDS = frozenset("""
a about above after again all also am an and any are as at be because been
before being below between both but by can could did do does doing down
during each et al etc few for from further had has have having he her here
hers him his how i if in into is it its itself just me might more most must
my no nor not of off on once only onto or other our ours out over own same
shall she should so some such than that the their theirs them then there
these they this those through to too under until up upon us very via was we
were what when where which while who whom why will with without would you
your yours
""".split())


@dataclass
class Keyphrase:
    """A short extracted phrase with its rank score and source documents.

    ``sources`` holds document indices as passed to the extractor
    (convention: 0 = target paper, 1..R = references).
    """

    tokens: tuple[str, ...]
    score: float
    sources: set[int] = field(default_factory=set)


def _candidates(doc: Sequence[str]) -> Counter[tuple[str, ...]]:
    """All 1-3-gram candidates of a document with their occurrence counts."""
    counts: Counter[tuple[str, ...]] = Counter()
    words = [t for t in doc]
    for n in (1, 2, 3):
        for i in range(len(words) - n + 1):
            gram = tuple(words[i : i + n])
            if any(not t.replace("_", "").isalnum() for t in gram):
                continue
            if gram[0] in STOPWORDS or gram[-1] in STOPWORDS:
                continue
            counts[gram] += 1
    return counts


def extract_keyphrases(
    documents: Sequence[Sequence[str]], per_doc_k: int
) -> list[Keyphrase]:
    """Rank keyphrases over a set of tokenized documents.

    For each document the top ``per_doc_k`` candidates by penalized TF-IDF
    are taken; the merged list is deduplicated by token sequence (sources
    merged, best score kept) and sorted by descending score.  Scores are
    normalized into [0, 1] per document, so the first phrase of each
    document scores 1.0 and later ones are monotonically non-increasing.
    """
    if per_doc_k < 1:
        raise ValueError(f"per_doc_k must be >= 1, got {per_doc_k}")
    per_doc = [_candidates(doc) for doc in documents]
    n_docs = len(documents)
    doc_freq: Counter[tuple[str, ...]] = Counter()
    for counts in per_doc:
        doc_freq.update(counts.keys())

    merged: dict[tuple[str, ...], Keyphrase] = {}
    for doc_idx, counts in enumerate(per_doc):
        if not counts:
            continue
        # smoothed IDF: 1 when a phrase occurs in every document, larger when rarer
        base = {
            gram: tf * (math.log((1 + n_docs) / (1 + doc_freq[gram])) + 1.0)
            for gram, tf in counts.items()
        }
        selected: list[tuple[tuple[str, ...], float]] = []
        chosen_tokens: set[str] = set()
        remaining = set(base)
        while remaining and len(selected) < per_doc_k:
            best = min(
                remaining,
                key=lambda g: (
                    -(base[g] * (DIVERSITY_PENALTY if chosen_tokens & set(g) else 1.0)),
                    g,
                ),
            )
            score = base[best] * (DIVERSITY_PENALTY if chosen_tokens & set(best) else 1.0)
            selected.append((best, score))
            chosen_tokens.update(best)
            remaining.discard(best)
        top = selected[0][1]
        for gram, score in selected:
            norm = score / top
            phrase = merged.get(gram)
            if phrase is None:
                merged[gram] = Keyphrase(tokens=gram, score=norm, sources={doc_idx})
            else:
                phrase.sources.add(doc_idx)
                phrase.score = max(phrase.score, norm)
    return sorted(merged.values(), key=lambda p: (-p.score, p.tokens))


def default_per_doc_k(max_keyphrases: int, n_refs: int) -> int:
    """Enough phrases per document to roughly fill the keyphrase budget."""
    return max(1, math.ceil(max_keyphrases / (n_refs + 1)))


def extract_example_keyphrases(
    raw: RawExample,
    config: ModelConfig,
    per_doc_k: int = 0,
    tokenizer: Tokenizer = tokenize,
) -> list[Keyphrase]:
    """Extract keyphrases for one example over its truncated abstracts."""
    documents: list[list[str]] = [tokenizer(raw.target_abstract)[: config.max_target_len]]
    for ref in raw.references[: config.max_refs]:
        documents.append(tokenizer(ref.abstract)[: config.max_ref_len])
    if per_doc_k <= 0:
        per_doc_k = default_per_doc_k(config.max_keyphrases, len(documents) - 1)
    return extract_keyphrases(documents, per_doc_k)


def link_keyphrases(
    keyphrases: Sequence[Keyphrase],
    reference_tokens: Sequence[Sequence[str]],
    whole_phrase: bool = False,
) -> set[tuple[int, int]]:
    """Edges (keyphrase index, reference index) over truncated references.

    An edge is present iff any single token of the phrase occurs in the
    reference (case-insensitive); with ``whole_phrase`` the full token
    sequence must occur contiguously.  The implicit keyphrase-target edges
    are not represented here: the graph builder adds them for every phrase.
    """
    ref_token_sets = [{t.lower() for t in toks} for toks in reference_tokens]
    edges: set[tuple[int, int]] = set()
    for c_idx, phrase in enumerate(keyphrases):
        needle = tuple(t.lower() for t in phrase.tokens)
        for r_idx, toks in enumerate(reference_tokens):
            if whole_phrase:
                low = [t.lower() for t in toks]
                n = len(needle)
                hit = any(tuple(low[i : i + n]) == needle for i in range(len(low) - n + 1))
            else:
                hit = any(t in ref_token_sets[r_idx] for t in needle)
            if hit:
                edges.add((c_idx, r_idx))
    return edges


# ---------------------------------------------------------------------------
# Sidecar file
# ---------------------------------------------------------------------------

def save_keyphrases(path: str | Path, per_example: dict[str, list[Keyphrase]]) -> None:
    """Write the keyphrase sidecar (JSONL keyed by example id)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id in per_example:
            obj = {
                "id": ex_id,
                "keyphrases": [
                    {"tokens": list(p.tokens), "score": p.score, "sources": sorted(p.sources)}
                    for p in per_example[ex_id]
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_keyphrases(path: str | Path) -> dict[str, list[Keyphrase]]:
    per_example: dict[str, list[Keyphrase]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            per_example[obj["id"]] = [
                Keyphrase(tokens=tuple(p["tokens"]), score=float(p["score"]), sources=set(p["sources"]))
                for p in obj["keyphrases"]
            ]
    return per_example
