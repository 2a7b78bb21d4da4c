"""Batching of encoded examples into torch tensors.

``collate`` trims every length dimension to the longest non-pad extent in
the batch (keeping at least one position), which is what makes desk-scale
training fast on short synthetic sequences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from tagsum.config import ModelConfig
from tagsum.corpus import (
    CorpusSplit,
    EncodedExample,
    PaperPool,
    RawExample,
    Vocabulary,
    encode_example,
    matched_negatives_count,
    sample_negatives,
)
from tagsum.keyphrase import Keyphrase, extract_example_keyphrases


@dataclass
class Batch:
    ids: list[str]
    target_ids: Tensor       # (B, La) int64
    target_pad: Tensor       # (B, La) bool
    ref_ids: Tensor          # (B, R, Lr)
    ref_pad: Tensor
    key_ids: Tensor          # (B, C, Lc)
    key_pad: Tensor
    gold_ids: Tensor         # (B, Ly)
    gold_pad: Tensor
    neg_ids: Tensor          # (B, K, Lr)
    neg_pad: Tensor
    edge_mask: Tensor        # (B, C, R) bool, True where keyphrase-reference edge exists

    def size(self) -> int:
        return len(self.ids)


def _trim(ids: np.ndarray, axis: int) -> int:
    """Longest non-pad extent along ``axis`` (at least 1)."""
    nonpad = ids != 0
    other = tuple(i for i in range(ids.ndim) if i != axis)
    per_pos = nonpad.any(axis=other)
    if not per_pos.any():
        return 1
    return int(np.max(np.nonzero(per_pos)[0])) + 1


def collate(examples: Sequence[EncodedExample], trim: bool = True) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty batch")
    tgt = np.stack([e.target_ids for e in examples])
    ref = np.stack([e.reference_ids for e in examples])
    key = np.stack([e.keyphrase_ids for e in examples])
    gold = np.stack([e.gold_ids for e in examples])
    neg = np.stack([e.negative_ids for e in examples])
    if trim:
        tgt = tgt[:, : _trim(tgt, 1)]
        ref = ref[:, :, : _trim(ref, 2)]
        key = key[:, :, : _trim(key, 2)]
        gold = gold[:, : _trim(gold, 1)]
        neg = neg[:, :, : _trim(neg, 2)]
    n_keys, n_refs = key.shape[1], ref.shape[1]
    edge = np.zeros((len(examples), n_keys, n_refs), dtype=bool)
    for b, e in enumerate(examples):
        for c_idx, r_idx in e.edges:
            edge[b, c_idx, r_idx] = True

    def t(a, dtype=torch.int64):
        return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)

    return Batch(
        ids=[e.id for e in examples],
        target_ids=t(tgt), target_pad=t(tgt == 0, torch.bool),
        ref_ids=t(ref), ref_pad=t(ref == 0, torch.bool),
        key_ids=t(key), key_pad=t(key == 0, torch.bool),
        gold_ids=t(gold), gold_pad=t(gold == 0, torch.bool),
        neg_ids=t(neg), neg_pad=t(neg == 0, torch.bool),
        edge_mask=t(edge, torch.bool),
    )


def encode_corpus(
    examples: Sequence[RawExample],
    vocab: Vocabulary,
    config: ModelConfig,
    keyphrases: dict[str, list[Keyphrase]] | None = None,
    negatives: dict[str, list[str]] | None = None,
    pool: PaperPool | None = None,
    seed: int = 0,
    whole_phrase_linking: bool = False,
) -> list[EncodedExample]:
    """Encode a list of raw examples end to end.

    ``keyphrases`` and ``negatives`` are per-example-id sidecar maps; when
    missing they are computed here (negatives need ``pool``).
    """
    encoded = []
    for ex in examples:
        phrases = (keyphrases or {}).get(ex.id)
        if phrases is None:
            phrases = extract_example_keyphrases(ex, config)
        neg_ids = (negatives or {}).get(ex.id)
        if neg_ids is None:
            if pool is None:
                neg_abstracts: list[str] = []
            else:
                k = matched_negatives_count(ex, config.num_negatives, config.max_refs)
                neg_ids = sample_negatives(ex, pool, k, seed)
                neg_abstracts = [pool.abstract(i) for i in neg_ids]
        else:
            if pool is None:
                raise ValueError("negatives sidecar given without a paper pool")
            neg_abstracts = [pool.abstract(i) for i in neg_ids]
        encoded.append(encode_example(
            ex, vocab, phrases, config, negatives=neg_abstracts,
            whole_phrase_linking=whole_phrase_linking,
        ))
    return encoded


def pool_from_split(split: CorpusSplit) -> PaperPool:
    return PaperPool.from_examples(split.all_examples())


def save_encoded(path: str | Path, examples: Sequence[EncodedExample]) -> None:
    """Write encoded examples as JSONL (one full id-grid record per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {
                "id": ex.id,
                "target_ids": ex.target_ids.tolist(),
                "reference_ids": ex.reference_ids.tolist(),
                "keyphrase_ids": ex.keyphrase_ids.tolist(),
                "gold_ids": ex.gold_ids.tolist(),
                "negative_ids": ex.negative_ids.tolist(),
                "edges": sorted(ex.edges),
            }
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_encoded(path: str | Path) -> list[EncodedExample]:
    examples: list[EncodedExample] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            grids = {
                name: np.asarray(obj[name], dtype=np.int64)
                for name in ("target_ids", "reference_ids", "keyphrase_ids",
                             "gold_ids", "negative_ids")
            }
            examples.append(EncodedExample(
                id=obj["id"],
                target_ids=grids["target_ids"],
                target_pad=grids["target_ids"] == 0,
                reference_ids=grids["reference_ids"],
                reference_pad=grids["reference_ids"] == 0,
                keyphrase_ids=grids["keyphrase_ids"],
                keyphrase_pad=grids["keyphrase_ids"] == 0,
                gold_ids=grids["gold_ids"],
                gold_pad=grids["gold_ids"] == 0,
                negative_ids=grids["negative_ids"],
                negative_pad=grids["negative_ids"] == 0,
                edges=frozenset((int(c), int(r)) for c, r in obj["edges"]),
            ))
    return examples
