"""Encoder tests: node initialization, target-centered weights, graph updates."""

import numpy as np
import pytest
import torch

import oracles
from helpers import random_batch, random_example, tiny_config
from tagsum.data import collate
from tagsum.encoder import (
    DocumentNodeRefiner,
    GraphAdjacency,
    GraphDocumentEncoder,
    TargetCenteredAttention,
    init_nodes,
)


def _double_encoder(config, seed=0):
    torch.manual_seed(seed)
    return GraphDocumentEncoder(config, torch.nn.Embedding(config.vocab_size,
                                                           config.hidden_size,
                                                           padding_idx=0)).double().eval()


class TestInitNodes:
    def test_masked_mean_matches_scalar_loop(self):
        rng = np.random.default_rng(0)
        states = torch.tensor(rng.standard_normal((3, 5, 4)))
        pad = torch.tensor(rng.random((3, 5)) < 0.4)
        pad[:, 0] = False  # keep one valid position per document
        nodes = init_nodes(states, pad)
        for b in range(3):
            expected = oracles.init_node(oracles.to_np(states[b]), oracles.to_np(pad[b]))
            np.testing.assert_allclose(oracles.to_np(nodes[b]), expected, atol=1e-12)

    def test_all_pad_document_gives_zero_vector(self):
        states = torch.randn(2, 4, 6)
        pad = torch.ones(2, 4, dtype=torch.bool)
        assert torch.all(init_nodes(states, pad) == 0.0)

    def test_invariant_to_pad_position_content(self):
        states = torch.randn(1, 4, 6)
        pad = torch.tensor([[False, False, True, True]])
        altered = states.clone()
        altered[0, 2:] = 99.0
        np.testing.assert_allclose(
            oracles.to_np(init_nodes(states, pad)), oracles.to_np(init_nodes(altered, pad)), atol=0
        )


class TestTargetCenteredAttention:
    def test_beta_matches_scalar_oracle(self):
        """beta is the softmax over non-pad references of a learned score of
        each reference's dot product with the target node."""
        cfg = tiny_config()
        torch.manual_seed(1)
        att = TargetCenteredAttention(cfg).double().eval()
        rng = np.random.default_rng(2)
        refs = torch.tensor(rng.standard_normal((2, 3, cfg.hidden_size)))
        target = torch.tensor(rng.standard_normal((2, cfg.hidden_size)))
        pad = torch.tensor([[False, False, True], [False, True, True]])
        beta, weighted = att(refs, target, pad)

        att_params = oracles.p_mha(att.self_attn)
        score_params = oracles.p_ffn(att.score_ffn)
        for b in range(2):
            exp_beta, exp_weighted = oracles.target_centered(
                att_params, score_params,
                oracles.to_np(refs[b]), oracles.to_np(target[b]), oracles.to_np(pad[b]),
            )
            np.testing.assert_allclose(oracles.to_np(beta[b]), exp_beta, atol=1e-10)
            np.testing.assert_allclose(oracles.to_np(weighted[b]), exp_weighted, atol=1e-10)

    def test_beta_sums_to_one_and_zero_on_pads(self):
        cfg = tiny_config()
        torch.manual_seed(3)
        att = TargetCenteredAttention(cfg).eval()
        refs = torch.randn(4, 3, cfg.hidden_size)
        target = torch.randn(4, cfg.hidden_size)
        pad = torch.tensor([[False] * 3, [False, False, True],
                            [False, True, True], [False, False, False]])
        beta, _ = att(refs, target, pad)
        np.testing.assert_allclose(oracles.to_np(beta.sum(dim=-1)), 1.0, atol=1e-6)
        assert torch.all(beta[pad] == 0.0)

    def test_rejects_example_without_references(self):
        cfg = tiny_config()
        att = TargetCenteredAttention(cfg)
        refs = torch.randn(1, 3, cfg.hidden_size)
        target = torch.randn(1, cfg.hidden_size)
        with pytest.raises(ValueError):
            att(refs, target, torch.ones(1, 3, dtype=torch.bool))


class TestGraphEncoder:
    def test_output_shapes_and_pad_zeroing(self):
        cfg = tiny_config()
        rng = np.random.default_rng(4)
        batch = random_batch(rng, cfg, n=3)
        enc = _double_encoder(cfg)(batch)
        d = cfg.hidden_size
        assert enc.target_tokens.shape == (3, cfg.max_target_len, d)
        assert enc.ref_nodes.shape == (3, cfg.max_refs, d)
        assert enc.key_nodes.shape == (3, cfg.max_keyphrases, d)
        assert len(enc.betas) == cfg.graph_layers
        # pad token positions and all-pad node rows are exactly zero
        assert torch.all(enc.target_tokens[batch.target_pad] == 0.0)
        assert torch.all(enc.ref_tokens[batch.ref_pad] == 0.0)
        assert torch.all(enc.key_tokens[batch.key_pad] == 0.0)
        assert torch.all(enc.ref_nodes[enc.ref_node_pad] == 0.0)
        assert torch.all(enc.key_nodes[enc.key_node_pad] == 0.0)

    def test_beta_rows_sum_to_one(self):
        cfg = tiny_config(graph_layers=2)
        rng = np.random.default_rng(5)
        batch = random_batch(rng, cfg, n=4)
        enc = _double_encoder(cfg)(batch)
        for beta in enc.betas:
            np.testing.assert_allclose(oracles.to_np(beta.sum(dim=-1)), 1.0, atol=1e-10)

    def test_keyphrase_update_ignores_non_adjacent_reference(self):
        """After one graph layer, a keyphrase node only depends on the
        references its edges connect it to (plus the target and the other
        keyphrases)."""
        cfg = tiny_config()
        rng = np.random.default_rng(6)
        base = random_example(rng, cfg, n_refs=3, n_keys=2)
        # keyphrase 0 connects only to reference 0
        base_edges = frozenset({(0, 0), (1, 0), (1, 1), (1, 2)})
        import dataclasses
        base = dataclasses.replace(base, edges=base_edges)

        altered_refs = base.reference_ids.copy()
        altered_refs[2] = altered_refs[2][::-1].copy()  # permute reference 2's tokens
        altered = dataclasses.replace(
            base, reference_ids=altered_refs, reference_pad=altered_refs == 0
        )

        encoder = _double_encoder(cfg)
        out_base = encoder(collate([base], trim=False))
        out_alt = encoder(collate([altered], trim=False))
        np.testing.assert_allclose(
            oracles.to_np(out_base.key_nodes[0, 0]),
            oracles.to_np(out_alt.key_nodes[0, 0]),
            atol=1e-12,
        )
        # the connected keyphrase does change
        assert not np.allclose(
            oracles.to_np(out_base.key_nodes[0, 1]),
            oracles.to_np(out_alt.key_nodes[0, 1]),
        )

    def test_negatives_keep_initialization_states_only(self):
        """Negative papers never pass the graph stage: their exported states
        must equal a plain token-encode + mean-pool of the same rows."""
        cfg = tiny_config()
        rng = np.random.default_rng(7)
        batch = random_batch(rng, cfg, n=2)
        encoder = _double_encoder(cfg)
        enc = encoder(batch)
        bsz, n_neg, l_neg = batch.neg_ids.shape
        flat = encoder.token_encoder(
            batch.neg_ids.reshape(bsz * n_neg, l_neg),
            batch.neg_pad.reshape(bsz * n_neg, l_neg),
        ).view(bsz, n_neg, l_neg, -1)
        np.testing.assert_allclose(
            oracles.to_np(enc.init_neg_tokens), oracles.to_np(flat), atol=1e-12
        )
        np.testing.assert_allclose(
            oracles.to_np(enc.init_neg_nodes),
            oracles.to_np(init_nodes(flat, batch.neg_pad)),
            atol=1e-12,
        )

    def test_encode_without_negatives_gives_empty_negative_states(self):
        cfg = tiny_config()
        rng = np.random.default_rng(8)
        batch = random_batch(rng, cfg, n=2)
        enc = _double_encoder(cfg)(batch, encode_negatives=False)
        assert enc.init_neg_tokens.shape[1] == 0
        assert enc.init_neg_nodes.shape[1] == 0
        assert enc.neg_node_pad.shape[1] == 0

    def test_word_fusion_matches_oracle(self):
        """Fused token states are FFN(token state + document node)."""
        cfg = tiny_config()
        rng = np.random.default_rng(9)
        batch = random_batch(rng, cfg, n=1)
        encoder = _double_encoder(cfg)
        enc = encoder(batch)

        tok = encoder.token_encoder(batch.target_ids, batch.target_pad)
        params = oracles.p_ffn(encoder.fuse_target.ffn)
        node = oracles.to_np(enc.target_node[0])
        for i in range(batch.target_ids.shape[1]):
            if bool(batch.target_pad[0, i]):
                assert torch.all(enc.target_tokens[0, i] == 0.0)
                continue
            expected = oracles.word_fusion(params, oracles.to_np(tok[0, i]), node)
            np.testing.assert_allclose(
                oracles.to_np(enc.target_tokens[0, i]), expected, atol=1e-10
            )


class TestGraphFreeFallback:
    def test_shapes_and_no_betas(self):
        cfg = tiny_config(use_graph_encoder=False)
        rng = np.random.default_rng(10)
        batch = random_batch(rng, cfg, n=2)
        enc = _double_encoder(cfg)(batch)
        assert enc.betas == []
        assert enc.target_node.shape == (2, cfg.hidden_size)
        assert enc.ref_nodes.shape == (2, cfg.max_refs, cfg.hidden_size)

    def test_refiner_masks_padded_reference_nodes(self):
        cfg = tiny_config(use_graph_encoder=False)
        torch.manual_seed(11)
        refiner = DocumentNodeRefiner(cfg).eval()
        target = torch.randn(2, cfg.hidden_size)
        refs = torch.randn(2, 3, cfg.hidden_size)
        pad = torch.tensor([[False, True, True], [False, False, True]])
        new_target, new_refs = refiner(target, refs, pad)
        assert torch.all(new_refs[pad] == 0.0)
        assert torch.isfinite(new_target).all()


class TestGraphAdjacency:
    def test_node_pad_derived_from_all_pad_rows(self):
        cfg = tiny_config()
        rng = np.random.default_rng(12)
        batch = random_batch(rng, cfg, n=3)
        adj = GraphAdjacency.from_batch(batch)
        np.testing.assert_array_equal(
            oracles.to_np(adj.ref_node_pad).astype(bool),
            oracles.to_np(batch.ref_pad.all(dim=-1)).astype(bool),
        )
        np.testing.assert_array_equal(
            oracles.to_np(adj.key_node_pad).astype(bool),
            oracles.to_np(batch.key_pad.all(dim=-1)).astype(bool),
        )
