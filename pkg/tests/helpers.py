"""Random fixture builders shared across test modules."""

import numpy as np
import torch

from tagsum.config import BOS_ID, EOS_ID, PAD_ID, ModelConfig
from tagsum.corpus import EncodedExample
from tagsum.data import Batch, collate


def tiny_config(**overrides) -> ModelConfig:
    """A model small enough for scalar-loop comparison, dropout off."""
    base = dict(
        hidden_size=16, num_heads=2, ff_size=24, token_layers=1, graph_layers=1,
        decoder_layers=1, dropout=0.0, vocab_size=23, max_refs=3, max_keyphrases=4,
        max_target_len=8, max_ref_len=7, max_keyphrase_len=3, max_summary_len=10,
        num_negatives=2,
    )
    base.update(overrides)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def _id_row(rng, width, length, low=4, high=None):
    row = np.full(width, PAD_ID, dtype=np.int64)
    row[:length] = rng.integers(low, high, size=length)
    return row


def random_example(rng, config: ModelConfig, example_id="ex0",
                   n_refs=None, n_keys=None) -> EncodedExample:
    """An encoded example with random non-pad lengths (>= 1 reference)."""
    high = config.vocab_size
    if n_refs is None:
        n_refs = int(rng.integers(1, config.max_refs + 1))
    if n_keys is None:
        n_keys = int(rng.integers(1, config.max_keyphrases + 1))

    target_ids = _id_row(rng, config.max_target_len,
                         int(rng.integers(2, config.max_target_len + 1)), high=high)

    reference_ids = np.full((config.max_refs, config.max_ref_len), PAD_ID, dtype=np.int64)
    for i in range(n_refs):
        reference_ids[i] = _id_row(rng, config.max_ref_len,
                                   int(rng.integers(1, config.max_ref_len + 1)), high=high)

    keyphrase_ids = np.full((config.max_keyphrases, config.max_keyphrase_len), PAD_ID,
                            dtype=np.int64)
    for i in range(n_keys):
        keyphrase_ids[i] = _id_row(rng, config.max_keyphrase_len,
                                   int(rng.integers(1, config.max_keyphrase_len + 1)), high=high)

    gold_ids = np.full(config.max_summary_len, PAD_ID, dtype=np.int64)
    body = int(rng.integers(1, config.max_summary_len - 1))
    gold_ids[0] = BOS_ID
    gold_ids[1 : 1 + body] = rng.integers(4, high, size=body)
    gold_ids[1 + body] = EOS_ID

    negative_ids = np.full((config.num_negatives, config.max_ref_len), PAD_ID, dtype=np.int64)
    for i in range(config.num_negatives):
        negative_ids[i] = _id_row(rng, config.max_ref_len,
                                  int(rng.integers(1, config.max_ref_len + 1)), high=high)

    edges = frozenset(
        (c, r)
        for c in range(n_keys)
        for r in range(n_refs)
        if rng.random() < 0.5
    )

    example = EncodedExample(
        id=example_id,
        target_ids=target_ids, target_pad=target_ids == PAD_ID,
        reference_ids=reference_ids, reference_pad=reference_ids == PAD_ID,
        keyphrase_ids=keyphrase_ids, keyphrase_pad=keyphrase_ids == PAD_ID,
        gold_ids=gold_ids, gold_pad=gold_ids == PAD_ID,
        negative_ids=negative_ids, negative_pad=negative_ids == PAD_ID,
        edges=edges,
    )
    example.check()
    return example


def random_batch(rng, config: ModelConfig, n=2, trim=False) -> Batch:
    examples = [random_example(rng, config, example_id=f"ex{i}") for i in range(n)]
    return collate(examples, trim=trim)


def seeded_model(model_cls, config: ModelConfig, seed: int, double=False):
    torch.manual_seed(seed)
    model = model_cls(config)
    model.eval()
    if double:
        model.double()
    return model
