"""Corpus ingestion, vocabulary, encoding, negatives, synthetic data.

The on-disk corpus format is JSONL, one example per line:

    {"id": str, "target_abstract": str,
     "references": [{"id": str, "abstract": str}, ...],
     "related_work": str}

Splits live in separate files ``train.jsonl`` / ``valid.jsonl`` /
``test.jsonl``.  Everything in this module is pure given its inputs and a
seed, so preprocessing can run per-example in parallel.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from tagsum.config import BOS_ID, EOS_ID, PAD_ID, UNK_ID, ModelConfig

Tokenizer = Callable[[str], list[str]]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SPLIT_FILES = {"train": "train.jsonl", "validation": "valid.jsonl", "test": "test.jsonl"}


class CorpusError(ValueError):
    """Raised for malformed corpus files or impossible sampling requests."""


def tokenize(text: str) -> list[str]:
    """Default tokenizer: lowercase, split on whitespace and punctuation.

    Punctuation marks survive as single-character tokens so sentence
    boundaries stay visible to the model.
    """
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Raw examples
# ---------------------------------------------------------------------------

@dataclass
class ReferencePaper:
    id: str
    abstract: str


@dataclass
class RawExample:
    """One target paper with its cited references and gold related work."""

    id: str
    target_abstract: str
    references: list[ReferencePaper]
    related_work: str

    def validate(self) -> None:
        ref_ids = [r.id for r in self.references]
        if len(set(ref_ids)) != len(ref_ids):
            raise CorpusError(f"example {self.id!r}: duplicate reference ids")
        if self.id in ref_ids:
            raise CorpusError(f"example {self.id!r}: a reference shares the target's id")
        if not self.related_work.strip():
            raise CorpusError(f"example {self.id!r}: empty related_work")


@dataclass
class CorpusSplit:
    train: list[RawExample] = field(default_factory=list)
    validation: list[RawExample] = field(default_factory=list)
    test: list[RawExample] = field(default_factory=list)
    drops: dict[str, int] = field(default_factory=dict)

    def sizes(self) -> dict[str, int]:
        return {
            "train": len(self.train),
            "validation": len(self.validation),
            "test": len(self.test),
        }

    def all_examples(self) -> list[RawExample]:
        return [*self.train, *self.validation, *self.test]


def _parse_example(obj: dict, where: str) -> RawExample:
    if not isinstance(obj, dict):
        raise CorpusError(f"{where}: expected a JSON object")
    ex_id = obj.get("id")
    label = repr(ex_id) if ex_id is not None else where
    for fname in ("id", "target_abstract", "references", "related_work"):
        if fname not in obj:
            raise CorpusError(f"example {label}: missing field {fname!r}")
    refs = []
    for k, ref in enumerate(obj["references"]):
        for fname in ("id", "abstract"):
            if not isinstance(ref, dict) or fname not in ref:
                raise CorpusError(f"example {label}: reference {k} missing field {fname!r}")
        refs.append(ReferencePaper(id=str(ref["id"]), abstract=str(ref["abstract"])))
    example = RawExample(
        id=str(obj["id"]),
        target_abstract=str(obj["target_abstract"]),
        references=refs,
        related_work=str(obj["related_work"]),
    )
    example.validate()
    return example


def load_split_file(path: str | Path, filter_min_refs: int = 2) -> tuple[list[RawExample], int]:
    """Parse one JSONL split file.

    Returns the kept examples and the number dropped for having fewer than
    ``filter_min_refs`` references.
    """
    path = Path(path)
    examples: list[RawExample] = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            example = _parse_example(obj, where=f"{path}:{lineno}")
            if len(example.references) < filter_min_refs:
                dropped += 1
                continue
            examples.append(example)
    return examples, dropped


def load_corpus(corpus_dir: str | Path, filter_min_refs: int = 2) -> CorpusSplit:
    """Load train/valid/test JSONL files from a directory.

    Missing split files are tolerated (the corresponding split is empty),
    but a missing ``train.jsonl`` is an error.
    """
    corpus_dir = Path(corpus_dir)
    split = CorpusSplit()
    for name, fname in SPLIT_FILES.items():
        path = corpus_dir / fname
        if not path.exists():
            if name == "train":
                raise CorpusError(f"missing corpus file: {path}")
            split.drops[name] = 0
            continue
        examples, dropped = load_split_file(path, filter_min_refs)
        setattr(split, name, examples)
        split.drops[name] = dropped
    return split


def save_corpus(split: CorpusSplit, corpus_dir: str | Path) -> None:
    corpus_dir = Path(corpus_dir)
    corpus_dir.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        with open(corpus_dir / fname, "w", encoding="utf-8") as fh:
            for ex in getattr(split, name):
                obj = {
                    "id": ex.id,
                    "target_abstract": ex.target_abstract,
                    "references": [{"id": r.id, "abstract": r.abstract} for r in ex.references],
                    "related_work": ex.related_work,
                }
                fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """Bijective token<->id map with PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = [*SPECIAL_TOKENS, *tokens]
        self.id_to_token: list[str] = list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.id_to_token[i])
        return out

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for token in self.id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def build_vocabulary(
    train_examples: Sequence[RawExample],
    max_size: int = 30000,
    min_freq: int = 1,
    tokenizer: Tokenizer = tokenize,
) -> Vocabulary:
    """Frequency vocabulary over every text field of the training examples.

    Tokens are ordered by descending frequency with a lexicographic
    tie-break; the four specials occupy ids 0-3.
    """
    if not train_examples:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    for ex in train_examples:
        counts.update(tokenizer(ex.target_abstract))
        for ref in ex.references:
            counts.update(tokenizer(ref.abstract))
        counts.update(tokenizer(ex.related_work))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, c in ranked if c >= min_freq][: max_size - len(SPECIAL_TOKENS)]
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedExample:
    """Fixed-shape id grids for one example; pad masks are True at pads."""

    id: str
    target_ids: np.ndarray          # (max_target_len,)
    target_pad: np.ndarray
    reference_ids: np.ndarray       # (max_refs, max_ref_len)
    reference_pad: np.ndarray
    keyphrase_ids: np.ndarray       # (max_keyphrases, max_keyphrase_len)
    keyphrase_pad: np.ndarray
    gold_ids: np.ndarray            # (max_summary_len,) BOS ... EOS PAD*
    gold_pad: np.ndarray
    negative_ids: np.ndarray        # (num_negatives, max_ref_len)
    negative_pad: np.ndarray
    edges: frozenset[tuple[int, int]]  # (keyphrase index, reference index)

    def check(self) -> None:
        for ids, pad in (
            (self.target_ids, self.target_pad),
            (self.reference_ids, self.reference_pad),
            (self.keyphrase_ids, self.keyphrase_pad),
            (self.gold_ids, self.gold_pad),
            (self.negative_ids, self.negative_pad),
        ):
            assert ids.shape == pad.shape
            assert bool(np.all((ids == PAD_ID) == pad))


def _encode_row(tokens: Sequence[str], vocab: Vocabulary, width: int) -> np.ndarray:
    ids = vocab.encode(tokens[:width])
    row = np.full(width, PAD_ID, dtype=np.int64)
    row[: len(ids)] = ids
    return row


def encode_example(
    raw: RawExample,
    vocab: Vocabulary,
    keyphrases: Sequence["Keyphrase"],
    config: ModelConfig,
    negatives: Sequence[str] = (),
    tokenizer: Tokenizer = tokenize,
    whole_phrase_linking: bool = False,
) -> EncodedExample:
    """Turn a raw example plus its extracted keyphrases into id grids.

    Abstracts are truncated to the configured word limits before id
    conversion; references pad/truncate to ``max_refs`` rows and keyphrases
    to ``max_keyphrases``.  ``negatives`` are the abstracts of the sampled
    non-reference papers.  Empty texts become all-PAD rows, never errors.
    """
    from tagsum.keyphrase import link_keyphrases  # deferred: avoids an import cycle

    target_tokens = tokenizer(raw.target_abstract)[: config.max_target_len]
    target_ids = _encode_row(target_tokens, vocab, config.max_target_len)

    ref_token_lists = [
        tokenizer(r.abstract)[: config.max_ref_len] for r in raw.references[: config.max_refs]
    ]
    reference_ids = np.full((config.max_refs, config.max_ref_len), PAD_ID, dtype=np.int64)
    for i, toks in enumerate(ref_token_lists):
        reference_ids[i] = _encode_row(toks, vocab, config.max_ref_len)

    kept_phrases = list(keyphrases)[: config.max_keyphrases]
    keyphrase_ids = np.full((config.max_keyphrases, config.max_keyphrase_len), PAD_ID, dtype=np.int64)
    for i, phrase in enumerate(kept_phrases):
        keyphrase_ids[i] = _encode_row(phrase.tokens, vocab, config.max_keyphrase_len)

    gold_tokens = tokenizer(raw.related_work)[: config.max_summary_len - 2]
    gold_ids = np.full(config.max_summary_len, PAD_ID, dtype=np.int64)
    gold_ids[0] = BOS_ID
    body = vocab.encode(gold_tokens)
    gold_ids[1 : 1 + len(body)] = body
    gold_ids[1 + len(body)] = EOS_ID

    negative_ids = np.full((config.num_negatives, config.max_ref_len), PAD_ID, dtype=np.int64)
    for i, abstract in enumerate(list(negatives)[: config.num_negatives]):
        negative_ids[i] = _encode_row(tokenizer(abstract)[: config.max_ref_len], vocab, config.max_ref_len)

    edges = link_keyphrases(kept_phrases, ref_token_lists, whole_phrase=whole_phrase_linking)

    return EncodedExample(
        id=raw.id,
        target_ids=target_ids,
        target_pad=target_ids == PAD_ID,
        reference_ids=reference_ids,
        reference_pad=reference_ids == PAD_ID,
        keyphrase_ids=keyphrase_ids,
        keyphrase_pad=keyphrase_ids == PAD_ID,
        gold_ids=gold_ids,
        gold_pad=gold_ids == PAD_ID,
        negative_ids=negative_ids,
        negative_pad=negative_ids == PAD_ID,
        edges=frozenset(edges),
    )


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

class PaperPool:
    """All distinct papers of a corpus (targets and references), id -> abstract."""

    def __init__(self, papers: dict[str, str]):
        self.papers = papers
        self._sorted_ids = sorted(papers)

    def __len__(self) -> int:
        return len(self.papers)

    @classmethod
    def from_examples(cls, examples: Iterable[RawExample]) -> "PaperPool":
        papers: dict[str, str] = {}
        for ex in examples:
            papers.setdefault(ex.id, ex.target_abstract)
            for ref in ex.references:
                papers.setdefault(ref.id, ref.abstract)
        return cls(papers)

    def abstract(self, paper_id: str) -> str:
        return self.papers[paper_id]


def _stable_seed(seed: int, example_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{example_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def matched_negatives_count(example: RawExample, num_negatives: int, max_refs: int) -> int:
    """Number of negatives to sample: capped to the encoded reference count.

    Matching the negative-set size to the reference-set size keeps the
    pooled-set matcher from keying on cardinality artifacts (a mean over k
    vectors gets smoother as k grows) instead of on paper content.
    """
    return max(1, min(num_negatives, len(example.references), max_refs))


def sample_negatives(example: RawExample, pool: PaperPool, k: int, seed: int) -> list[str]:
    """Sample ``k`` non-reference paper ids uniformly without replacement.

    The example's own paper and its references are excluded.  Deterministic
    in (seed, example id), independent of pool insertion order.
    """
    excluded = {example.id, *(r.id for r in example.references)}
    candidates = [pid for pid in pool._sorted_ids if pid not in excluded]
    if len(candidates) < k:
        raise CorpusError(
            f"example {example.id!r}: only {len(candidates)} non-reference papers "
            f"available, cannot sample k={k}; use a smaller k or a larger corpus"
        )
    rng = random.Random(_stable_seed(seed, example.id))
    return rng.sample(candidates, k)


def save_negatives(path: str | Path, per_example: dict[str, list[str]]) -> None:
    """Write the sampled-negatives sidecar (JSONL keyed by example id)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id, neg_ids in per_example.items():
            fh.write(json.dumps({"id": ex_id, "negatives": neg_ids}, sort_keys=True) + "\n")


def load_negatives(path: str | Path) -> dict[str, list[str]]:
    per_example: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            per_example[obj["id"]] = list(obj["negatives"])
    return per_example


def replace_negatives(
    encoded: EncodedExample,
    raw: RawExample,
    pool: PaperPool,
    vocab: Vocabulary,
    config: ModelConfig,
    seed: int,
    tokenizer: Tokenizer = tokenize,
) -> EncodedExample:
    """Copy of ``encoded`` with freshly sampled negative grids.

    Supports per-epoch resampling: pass a seed derived from the epoch.
    """
    k = matched_negatives_count(raw, config.num_negatives, config.max_refs)
    sampled = sample_negatives(raw, pool, k, seed)
    abstracts = [pool.abstract(pid) for pid in sampled]
    negative_ids = np.full((config.num_negatives, config.max_ref_len), PAD_ID, dtype=np.int64)
    for i, abstract in enumerate(abstracts):
        negative_ids[i] = _encode_row(tokenizer(abstract)[: config.max_ref_len], vocab, config.max_ref_len)
    return dataclasses.replace(
        encoded, negative_ids=negative_ids, negative_pad=negative_ids == PAD_ID
    )


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

_TEMPLATE_WORDS = [
    "this", "work", "studies", "method", "on", "the", "approach", "uses",
    "and", "we", "study", "propose", "for", "with", "extend", "also",
    "consider", ".",
]

_CONSONANTS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"


def _fake_words(count: int, rng: np.random.Generator) -> list[str]:
    """Deterministic pseudo-words, distinct from each other and the templates."""
    words: list[str] = []
    seen = set(_TEMPLATE_WORDS)
    while len(words) < count:
        n_syl = int(rng.integers(2, 4))
        word = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(n_syl)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def generate_synthetic_corpus(
    n_train: int,
    vocab_size: int = 120,
    refs_per_example: int = 4,
    seed: int = 0,
    n_validation: int = 0,
    n_test: int = 0,
) -> CorpusSplit:
    """Deterministic toy corpus whose related work is a template over its inputs.

    Each reference abstract advertises a topic bigram and a handful of
    per-topic detail words.  Topics are grouped into fields and every
    example draws all of its references from a single field, the way a real
    paper's related work stays within one research area; randomly sampled
    negative papers are therefore field-mixed, which gives the set-level
    matcher an honest content signal to discriminate on.  The target
    abstract names two "focus" topics; the related work then discusses, in
    input order, the (at most two) references matching a focus topic and
    closes with a sentence about the first focus.  The output is a pure
    function of the inputs, so a correct model can push the generation loss
    toward zero, and nearly every output token occurs in the reference
    abstracts.
    """
    if n_train > 0 or n_validation > 0 or n_test > 0:
        if vocab_size < 50:
            raise ValueError(f"vocab_size must be >= 50, got {vocab_size}")
    rng = np.random.default_rng(seed)
    n_topics = max(6, vocab_size // 8)
    while True:
        n_fields = max(1, n_topics // 5)
        n_details = vocab_size - len(_TEMPLATE_WORDS) - 2 * n_topics - 2 * n_fields
        if n_details >= 6 or n_topics <= 6:
            break
        n_topics -= 1
    words = _fake_words(2 * n_topics + 2 * n_fields + n_details, rng)
    topic_a = words[:n_topics]
    topic_b = words[n_topics : 2 * n_topics]
    # every abstract in a field carries the field's marker bigram, the way
    # papers in one research area share that area's terminology
    field_markers = [
        (words[2 * n_topics + 2 * f], words[2 * n_topics + 2 * f + 1])
        for f in range(n_fields)
    ]
    details = words[2 * n_topics + 2 * n_fields :]
    # fixed per-topic detail vocabulary
    topic_details = [
        [details[int(j)] for j in rng.choice(n_details, size=min(6, n_details), replace=False)]
        for _ in range(n_topics)
    ]
    # contiguous topic blocks acting as research fields
    field_topics = [
        list(range(f * n_topics // n_fields, (f + 1) * n_topics // n_fields))
        for f in range(n_fields)
    ]

    paper_serial = 0

    def make_example(split_tag: str, index: int) -> RawExample:
        nonlocal paper_serial
        ex_rng = np.random.default_rng([seed, {"train": 1, "validation": 2, "test": 3}[split_tag], index])
        allowed = field_topics[int(ex_rng.integers(n_fields))]
        n_refs = int(np.clip(refs_per_example + ex_rng.integers(-1, 2), 2, min(5, len(allowed))))
        topics = [allowed[int(j)] for j in ex_rng.choice(len(allowed), size=n_refs, replace=False)]

        refs = []
        ref_details = []
        for k in topics:
            pool = topic_details[k]
            picks = [pool[int(j)] for j in ex_rng.choice(len(pool), size=min(5, len(pool)), replace=False)]
            ref_details.append(picks)
            tokens = (
                ["this", "work", "studies", topic_a[k], topic_b[k], "method", "on", picks[0], picks[1], "."]
                + ["the", topic_a[k], topic_b[k], "approach", "uses", picks[2], picks[3], "and", picks[4], "."]
            )
            paper_serial += 1
            refs.append(ReferencePaper(id=f"p{paper_serial:06d}", abstract=" ".join(tokens)))

        focus_positions = sorted(int(j) for j in ex_rng.choice(n_refs, size=min(2, n_refs), replace=False))
        focus_topics = [topics[j] for j in focus_positions]
        focus_pool = sorted({w for k in focus_topics for w in topic_details[k]})
        dts = [focus_pool[int(j)] for j in ex_rng.choice(len(focus_pool), size=min(4, len(focus_pool)), replace=False)]
        k1, ka1, kb1 = focus_topics[0], topic_a[focus_topics[0]], topic_b[focus_topics[0]]
        target_tokens = ["we", "study"]
        for k in focus_topics:
            target_tokens += [topic_a[k], topic_b[k], "and"]
        target_tokens = target_tokens[:-1] + ["for", dts[0], dts[1], "."]
        # name the remaining references' topics too, so every cited paper is
        # recognisably on-topic for the matching networks
        extras = [topics[j] for j in range(n_refs) if j not in focus_positions]
        if extras:
            target_tokens += ["we", "also", "consider"]
            for k in extras:
                target_tokens += [topic_a[k], topic_b[k], "and"]
            target_tokens[-1] = "."
        target_tokens += ["we", "propose", "the", dts[2], "method", "with", dts[3], "."]

        related = []
        mentioned = 0
        for j in range(n_refs):
            if topics[j] in focus_topics and mentioned < 2:
                related += ["the", "work", "on", topic_a[topics[j]], topic_b[topics[j]],
                            "studies", ref_details[j][0], ref_details[j][1], "."]
                mentioned += 1
        related += ["we", "extend", "the", ka1, kb1, "method", "."]

        return RawExample(
            id=f"{split_tag[:2]}{index:06d}",
            target_abstract=" ".join(target_tokens),
            references=refs,
            related_work=" ".join(related),
        )

    split = CorpusSplit(
        train=[make_example("train", i) for i in range(n_train)],
        validation=[make_example("validation", i) for i in range(n_validation)],
        test=[make_example("test", i) for i in range(n_test)],
        drops={"train": 0, "validation": 0, "test": 0},
    )
    return split
