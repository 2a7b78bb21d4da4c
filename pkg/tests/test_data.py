"""Batch collation, trimming, and encoded-corpus persistence tests."""

import numpy as np
import pytest
import torch

from tagsum.config import ModelConfig
from tagsum.corpus import (
    PaperPool,
    RawExample,
    ReferencePaper,
    build_vocabulary,
    generate_synthetic_corpus,
    sample_negatives,
)
from tagsum.data import (
    Batch,
    collate,
    encode_corpus,
    load_encoded,
    pool_from_split,
    save_encoded,
)
from tagsum.keyphrase import extract_example_keyphrases


def _example(ex_id="e0", n_refs=3):
    refs = [ReferencePaper(id=f"{ex_id}-r{i}", abstract=f"ref {i} talks about topic {i}")
            for i in range(n_refs)]
    return RawExample(
        id=ex_id,
        target_abstract="we study topic 0 and topic 1",
        references=refs,
        related_work="prior work covers topic 0 .",
    )


def _tiny_model_config(**overrides):
    base = dict(hidden_size=8, num_heads=2, ff_size=8, vocab_size=64,
                max_refs=3, max_keyphrases=4, max_target_len=10, max_ref_len=8,
                max_keyphrase_len=3, max_summary_len=12, num_negatives=2,
                token_layers=1, graph_layers=1, decoder_layers=1)
    base.update(overrides)
    return ModelConfig(**base)


def _encoded(n=3, seed=0, **config_overrides):
    config = _tiny_model_config(**config_overrides)
    examples = [_example(f"e{i}") for i in range(n)]
    vocab = build_vocabulary(examples)
    pool = PaperPool.from_examples(examples)
    return encode_corpus(examples, vocab, config, pool=pool, seed=seed), config


class TestCollate:
    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            collate([])

    def test_shapes_and_dtypes(self):
        encoded, config = _encoded(n=3)
        batch = collate(encoded, trim=False)
        assert batch.size() == 3
        assert batch.ids == ["e0", "e1", "e2"]
        assert batch.target_ids.shape == (3, config.max_target_len)
        assert batch.ref_ids.shape == (3, config.max_refs, config.max_ref_len)
        assert batch.key_ids.shape == (3, config.max_keyphrases, config.max_keyphrase_len)
        assert batch.gold_ids.shape == (3, config.max_summary_len)
        assert batch.neg_ids.shape == (3, config.num_negatives, config.max_ref_len)
        assert batch.edge_mask.shape == (3, config.max_keyphrases, config.max_refs)
        for name in ("target_ids", "ref_ids", "key_ids", "gold_ids", "neg_ids"):
            assert getattr(batch, name).dtype == torch.int64
        for name in ("target_pad", "ref_pad", "key_pad", "gold_pad", "neg_pad", "edge_mask"):
            assert getattr(batch, name).dtype == torch.bool

    def test_pad_mask_marks_exactly_the_zeros(self):
        encoded, _ = _encoded(n=2)
        batch = collate(encoded)
        for ids, pad in [
            (batch.target_ids, batch.target_pad),
            (batch.ref_ids, batch.ref_pad),
            (batch.key_ids, batch.key_pad),
            (batch.gold_ids, batch.gold_pad),
            (batch.neg_ids, batch.neg_pad),
        ]:
            assert torch.equal(pad, ids == 0)

    def test_trim_cuts_to_longest_row(self):
        encoded, config = _encoded(n=3)
        longest = max(int((ex.target_ids != 0).nonzero()[0].max()) + 1
                      for ex in encoded)
        batch = collate(encoded)
        assert batch.target_ids.shape[1] == longest < config.max_target_len
        # trimming only drops all-pad tail columns
        full = collate(encoded, trim=False)
        assert torch.equal(full.target_ids[:, :longest], batch.target_ids)
        assert (full.target_ids[:, longest:] == 0).all()

    def test_trim_keeps_document_axes(self):
        # the reference/keyphrase *count* axes are never trimmed, only token length
        encoded, config = _encoded(n=2)
        batch = collate(encoded)
        assert batch.ref_ids.shape[1] == config.max_refs
        assert batch.key_ids.shape[1] == config.max_keyphrases
        assert batch.neg_ids.shape[1] == config.num_negatives

    def test_trim_all_pad_grid_keeps_one_position(self):
        encoded, _ = _encoded(n=3)
        blank = encoded[0]
        blank.keyphrase_ids[:] = 0
        blank.keyphrase_pad[:] = True
        batch = collate([blank])
        assert batch.key_ids.shape[2] == 1
        assert bool(batch.key_pad.all())

    def test_edge_mask_matches_edge_set(self):
        encoded, _ = _encoded(n=3)
        assert any(ex.edges for ex in encoded)
        batch = collate(encoded)
        for b, ex in enumerate(encoded):
            expected = np.zeros(batch.edge_mask.shape[1:], dtype=bool)
            for c_idx, r_idx in ex.edges:
                expected[c_idx, r_idx] = True
            np.testing.assert_array_equal(batch.edge_mask[b].numpy(), expected)


class TestEncodeCorpus:
    def test_sidecar_keyphrases_override_recomputation(self):
        config = _tiny_model_config()
        examples = [_example("e0")]
        vocab = build_vocabulary(examples)
        phrases = extract_example_keyphrases(examples[0], config)
        sidecar = {"e0": phrases[:1]}
        full = encode_corpus(examples, vocab, config)
        trimmed = encode_corpus(examples, vocab, config, keyphrases=sidecar)
        assert (full.__class__ is list) and len(trimmed) == 1
        assert int((trimmed[0].keyphrase_ids != 0).sum()) <= int(
            (full[0].keyphrase_ids != 0).sum())

    def test_negatives_sidecar_requires_pool(self):
        config = _tiny_model_config()
        examples = [_example("e0")]
        vocab = build_vocabulary(examples)
        with pytest.raises(ValueError, match="pool"):
            encode_corpus(examples, vocab, config, negatives={"e0": ["e1-r0"]})

    def test_no_pool_means_all_pad_negatives(self):
        config = _tiny_model_config()
        examples = [_example("e0")]
        vocab = build_vocabulary(examples)
        encoded = encode_corpus(examples, vocab, config)
        assert (encoded[0].negative_ids == 0).all()

    def test_sampled_negatives_deterministic_in_seed(self):
        config = _tiny_model_config()
        examples = [_example(f"e{i}") for i in range(4)]
        vocab = build_vocabulary(examples)
        pool = PaperPool.from_examples(examples)
        a = encode_corpus(examples, vocab, config, pool=pool, seed=5)
        b = encode_corpus(examples, vocab, config, pool=pool, seed=5)
        c = encode_corpus(examples, vocab, config, pool=pool, seed=6)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.negative_ids, y.negative_ids)
        assert any(not np.array_equal(x.negative_ids, z.negative_ids)
                   for x, z in zip(a, c))

    def test_negatives_sidecar_is_respected(self):
        config = _tiny_model_config()
        examples = [_example(f"e{i}") for i in range(4)]
        vocab = build_vocabulary(examples)
        pool = PaperPool.from_examples(examples)
        chosen = sample_negatives(examples[0], pool, config.num_negatives, seed=9)
        sidecar = {examples[0].id: chosen}
        encoded = encode_corpus(examples, vocab, config, negatives=sidecar,
                                pool=pool, seed=0)
        direct = encode_corpus(examples, vocab, config, pool=pool, seed=9)
        np.testing.assert_array_equal(encoded[0].negative_ids, direct[0].negative_ids)


class TestPoolFromSplit:
    def test_covers_every_split(self):
        split = generate_synthetic_corpus(8, vocab_size=60, seed=3,
                                          n_validation=2, n_test=2)
        pool = pool_from_split(split)
        for ex in split.all_examples():
            for ref in ex.references:
                assert pool.abstract(ref.id) == ref.abstract


class TestEncodedPersistence:
    def test_round_trip(self, tmp_path):
        encoded, _ = _encoded(n=3)
        path = tmp_path / "train.encoded.jsonl"
        save_encoded(path, encoded)
        loaded = load_encoded(path)
        assert [e.id for e in loaded] == [e.id for e in encoded]
        for orig, back in zip(encoded, loaded):
            for name in ("target_ids", "reference_ids", "keyphrase_ids",
                         "gold_ids", "negative_ids"):
                np.testing.assert_array_equal(getattr(back, name),
                                              getattr(orig, name))
            for name in ("target_pad", "reference_pad", "keyphrase_pad",
                         "gold_pad", "negative_pad"):
                np.testing.assert_array_equal(getattr(back, name),
                                              getattr(orig, name))
            assert back.edges == orig.edges

    def test_resave_is_byte_identical(self, tmp_path):
        encoded, _ = _encoded(n=3)
        first = tmp_path / "a.jsonl"
        second = tmp_path / "b.jsonl"
        save_encoded(first, encoded)
        save_encoded(second, load_encoded(first))
        assert first.read_bytes() == second.read_bytes()

    def test_creates_parent_directories(self, tmp_path):
        encoded, _ = _encoded(n=3)
        path = tmp_path / "deep" / "nested" / "out.jsonl"
        save_encoded(path, encoded)
        assert path.exists() and len(load_encoded(path)) == 3
