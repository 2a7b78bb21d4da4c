"""Beam-search decoding with length penalty and length constraints.

Hypotheses store content tokens only: the begin marker is implicit at the
front of every decoder input and the end marker's log-probability is added
when a hypothesis finishes, so reported lengths and the length penalty
both count real output tokens.  Ties in penalized score break toward the
lexicographically smallest token-id sequence, which makes decoding fully
deterministic.

Greedy decoding is the width-1 beam: at every step the end marker is
banked as a finished candidate (once the minimum length is reached) while
the single live hypothesis continues with its best extension, and the
best finished candidate overall wins.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

from tagsum.config import BOS_ID, EOS_ID, PAD_ID, InferenceConfig
from tagsum.corpus import Vocabulary
from tagsum.data import Batch
from tagsum.decoder import Decoder, DecoderMemory


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; equals 1 at length 1 or alpha 0."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class BeamResult:
    tokens: list[int]   # content token ids, no begin/end markers
    score: float        # penalized score of the winning hypothesis
    log_prob: float     # raw cumulative log-probability including the end marker


def _blocked_next(tokens: Sequence[int], n: int) -> set[int]:
    """Tokens that would repeat an n-gram already present in ``tokens``."""
    if n <= 0 or len(tokens) < n:
        return set()
    prefix = tuple(tokens[len(tokens) - n + 1 :])
    blocked = set()
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        if gram[:-1] == prefix:
            blocked.add(gram[-1])
    return blocked


def _best(candidates: Iterable[tuple[float, tuple[int, ...], float]], k: int):
    """Top-k by penalized score, ties to the smallest token sequence."""
    return heapq.nsmallest(k, candidates, key=lambda c: (-c[0], c[1]))


def beam_search(decoder: Decoder, mem: DecoderMemory, config: InferenceConfig) -> BeamResult:
    """Decode one example (``mem`` must be a batch of one)."""
    width = 1 if config.greedy else config.beam_width
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    if config.min_len > config.max_len or config.min_len < 1:
        raise ValueError(
            f"need 1 <= min_len <= max_len, got {config.min_len}..{config.max_len}"
        )
    device = mem.target.device
    alpha = config.length_penalty_alpha

    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, tuple[int, ...], float]] = []

    for step in range(config.max_len):  # step == content length of the live hypotheses
        prefix = torch.tensor(
            [[BOS_ID, *tokens] for tokens, _ in live], dtype=torch.long, device=device
        )
        out = decoder.forward_mem(prefix, mem.repeat(len(live)))
        log_probs = F.log_softmax(out.logits[:, -1].to(torch.float64), dim=-1)

        extensions: list[tuple[float, tuple[int, ...], float]] = []
        for i, (tokens, cum) in enumerate(live):
            row = log_probs[i].tolist()
            if step >= config.min_len:
                cum_eos = cum + row[EOS_ID]
                finished.append((cum_eos / length_penalty(step, alpha), tokens, cum_eos))
            blocked = _blocked_next(tokens, config.block_repeat_ngrams)
            blocked.update((PAD_ID, BOS_ID, EOS_ID))
            lp_next = length_penalty(step + 1, alpha)
            for v, log_p in enumerate(row):
                if v in blocked:
                    continue
                cum_v = cum + log_p
                extensions.append((cum_v / lp_next, (*tokens, v), cum_v))
        if not extensions:
            # repeat blocking (or a specials-only vocabulary) can strand every
            # live hypothesis; fall back to the finished pool when one exists
            if finished:
                break
            if step == 0:
                raise ValueError("no decodable tokens outside the special set")
            raise ValueError(
                "repeat blocking exhausted every continuation before min_len"
            )
        finished = _best(finished, width)
        live = [(tokens, cum) for _, tokens, cum in _best(extensions, width)]
    else:
        # every surviving hypothesis has max_len tokens: close with the end marker
        prefix = torch.tensor(
            [[BOS_ID, *tokens] for tokens, _ in live], dtype=torch.long, device=device
        )
        out = decoder.forward_mem(prefix, mem.repeat(len(live)))
        log_probs = F.log_softmax(out.logits[:, -1].to(torch.float64), dim=-1)
        eos_rows = log_probs[:, EOS_ID].tolist()
        for (tokens, cum), log_p_eos in zip(live, eos_rows):
            cum_eos = cum + log_p_eos
            finished.append((cum_eos / length_penalty(config.max_len, alpha), tokens, cum_eos))

    score, tokens, cum = _best(finished, 1)[0]
    return BeamResult(tokens=list(tokens), score=score, log_prob=cum)


def greedy_decode(decoder: Decoder, mem: DecoderMemory, config: InferenceConfig) -> BeamResult:
    """Width-1 beam over the same candidate-selection rules."""
    narrowed = InferenceConfig(
        beam_width=1,
        min_len=config.min_len,
        max_len=config.max_len,
        length_penalty_alpha=config.length_penalty_alpha,
        block_repeat_ngrams=config.block_repeat_ngrams,
        greedy=True,
    )
    return beam_search(decoder, mem, narrowed)


def generate_predictions(model, batches: Iterable[Batch], vocab: Vocabulary,
                         config: InferenceConfig) -> list[dict]:
    """Decode every example and return predictions.jsonl rows in input order."""
    was_training = model.training
    model.eval()
    rows: list[dict] = []
    with torch.no_grad():
        for batch in batches:
            enc = model.encode(batch, with_negatives=False)
            mem = DecoderMemory.from_encoder(enc)
            for i, example_id in enumerate(batch.ids):
                result = beam_search(model.decoder, mem.select(i), config)
                rows.append({
                    "id": example_id,
                    "prediction": " ".join(vocab.decode(result.tokens)),
                    "score": result.score,
                })
    if was_training:
        model.train()
    return rows


def write_predictions(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
