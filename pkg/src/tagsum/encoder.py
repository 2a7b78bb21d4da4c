"""Document encoding: token-level transformer, target-centered graph, fusion.

The encoder runs in four stages:

1. token encoding: every document (target, references, keyphrases, and
   sampled negatives) goes through the same stack of self-attention layers,
   each document independently;
2. node initialization: one vector per document by mean-pooling its
   non-pad token states;
3. graph encoding: node updates over the target-centered graph (keyphrases
   first, then references from three attention sources including the
   target-conditioned weights, then the target itself);
4. word fusion: token states are refreshed with their document's final
   node state.

With ``use_graph_encoder=False`` stage 3 is replaced by a single
cross-attention block over the document nodes (target and references) and
no target-conditioned weights are produced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from tagsum.config import ModelConfig
from tagsum.data import Batch
from tagsum.layers import (
    FeedForward,
    MultiHeadAttention,
    SourceFusion,
    TransformerLayer,
    sinusoidal_positions,
)


@dataclass
class GraphAdjacency:
    """Boolean adjacency of one batch's target-centered graphs.

    The target connects to every reference and every keyphrase; nodes of
    the same level are pairwise connected.  Only the keyphrase-reference
    edges vary per example.
    """

    key_ref: Tensor       # (B, C, R) True where keyphrase c links reference r
    ref_node_pad: Tensor  # (B, R) True for all-pad reference rows
    key_node_pad: Tensor  # (B, C) True for all-pad keyphrase rows

    @classmethod
    def from_batch(cls, batch: Batch) -> "GraphAdjacency":
        return cls(
            key_ref=batch.edge_mask,
            ref_node_pad=batch.ref_pad.all(dim=-1),
            key_node_pad=batch.key_pad.all(dim=-1),
        )


@dataclass
class EncoderOutput:
    """Everything the decoder and the matching networks consume."""

    # fused word-level states
    target_tokens: Tensor   # (B, La, d)
    ref_tokens: Tensor      # (B, R, Lr, d)
    key_tokens: Tensor      # (B, C, Lc, d)
    # node states after graph encoding
    target_node: Tensor     # (B, d)
    ref_nodes: Tensor       # (B, R, d)
    key_nodes: Tensor       # (B, C, d)
    # pre-graph states, used by the contrastive matchers
    init_ref_tokens: Tensor     # (B, R, Lr, d)
    init_ref_nodes: Tensor      # (B, R, d)
    init_neg_tokens: Tensor     # (B, K, Lr, d)
    init_neg_nodes: Tensor      # (B, K, d)
    # masks (True = pad)
    target_pad: Tensor
    ref_pad: Tensor         # (B, R, Lr)
    key_pad: Tensor         # (B, C, Lc)
    neg_pad: Tensor         # (B, K, Lr)
    ref_node_pad: Tensor    # (B, R)
    key_node_pad: Tensor    # (B, C)
    neg_node_pad: Tensor    # (B, K)
    # target-conditioned reference weights, one (B, R) tensor per graph layer
    betas: list[Tensor] = field(default_factory=list)


def mask_tokens(states: Tensor, pad: Tensor) -> Tensor:
    """Zero the states at pad positions."""
    return states.masked_fill(pad.unsqueeze(-1), 0.0)


def init_nodes(token_states: Tensor, pad: Tensor) -> Tensor:
    """Mean of the non-pad token states; all-pad documents give zero vectors.

    ``token_states``: (..., L, d), ``pad``: (..., L).
    """
    keep = (~pad).to(token_states.dtype).unsqueeze(-1)
    total = (token_states * keep).sum(dim=-2)
    count = keep.sum(dim=-2).clamp(min=1.0)
    return total / count


class TokenEncoder(nn.Module):
    """Per-document contextual token states (shared weights for all streams)."""

    def __init__(self, config: ModelConfig, embedding: nn.Embedding):
        super().__init__()
        self.embedding = embedding
        self.scale = math.sqrt(config.hidden_size)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            TransformerLayer(config.hidden_size, config.num_heads, config.ff_size, config.dropout)
            for _ in range(config.token_layers)
        )

    def forward(self, ids: Tensor, pad: Tensor) -> Tensor:
        """ids, pad: (N, L) -> states (N, L, d), zeroed at pads."""
        x = self.embedding(ids) * self.scale
        pos = sinusoidal_positions(ids.shape[-1], x.shape[-1], device=x.device, dtype=x.dtype)
        x = self.dropout(x + pos)
        for layer in self.layers:
            x = layer(x, key_pad_mask=pad)
        return mask_tokens(x, pad)


class TargetCenteredAttention(nn.Module):
    """Reference self-attention reweighted under the target's guidance.

    The references first exchange information through self-attention; each
    reference then receives a weight from the softmax (over references) of
    a small feed-forward network applied to its dot product with the
    target node.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(config.hidden_size, config.num_heads, config.dropout)
        self.score_ffn = FeedForward(1, config.ff_size, config.dropout, out_size=1)

    def forward(self, ref_nodes: Tensor, target_node: Tensor, ref_node_pad: Tensor):
        """-> (beta (B, R), weighted reference states (B, R, d))."""
        if bool(ref_node_pad.all(dim=-1).any()):
            raise ValueError("target-centered attention needs at least one non-pad reference")
        mixed = self.self_attn(ref_nodes, ref_nodes, ref_nodes, key_pad_mask=ref_node_pad)
        dots = (ref_nodes * target_node.unsqueeze(1)).sum(dim=-1, keepdim=True)  # (B, R, 1)
        logits = self.score_ffn(dots).squeeze(-1)
        logits = logits.masked_fill(ref_node_pad, float("-inf"))
        beta = torch.softmax(logits, dim=-1)
        return beta, beta.unsqueeze(-1) * mixed


class GraphLayer(nn.Module):
    """One round of staged node updates: keyphrases, references, target."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h, f, p = config.hidden_size, config.num_heads, config.ff_size, config.dropout
        self.key_self = MultiHeadAttention(d, h, p)
        self.key_papers = MultiHeadAttention(d, h, p)
        self.key_fuse = SourceFusion(d, f, 2, p)
        self.ref_self = MultiHeadAttention(d, h, p)
        self.ref_keys = MultiHeadAttention(d, h, p)
        self.target_centered = TargetCenteredAttention(config)
        self.ref_fuse = SourceFusion(d, f, 3, p)
        self.tgt_refs = MultiHeadAttention(d, h, p)
        self.tgt_keys = MultiHeadAttention(d, h, p)
        self.tgt_fuse = SourceFusion(d, f, 2, p)

    def forward(self, target: Tensor, refs: Tensor, keys: Tensor, adj: GraphAdjacency):
        """-> (target (B, d), refs (B, R, d), keys (B, C, d), beta (B, R))."""
        bsz, n_refs, _ = refs.shape
        n_keys = keys.shape[1]
        tgt = target.unsqueeze(1)  # (B, 1, d)

        # keyphrase nodes: intra-level self-attention plus attention over the
        # adjacent papers (the target is adjacent to every keyphrase)
        key_self = self.key_self(keys, keys, keys, key_pad_mask=adj.key_node_pad)
        papers = torch.cat([tgt, refs], dim=1)  # (B, 1+R, d)
        ref_blocked = ~adj.key_ref | adj.ref_node_pad.unsqueeze(1)  # (B, C, R)
        paper_mask = torch.cat(
            [torch.zeros(bsz, n_keys, 1, dtype=torch.bool, device=refs.device), ref_blocked], dim=2
        )
        key_papers = self.key_papers(keys, papers, papers, attn_mask=paper_mask)
        new_keys = self.key_fuse(keys, [key_self, key_papers])
        new_keys = new_keys.masked_fill(adj.key_node_pad.unsqueeze(-1), 0.0)

        # reference nodes: three sources, using the freshly updated keyphrases
        ref_self = self.ref_self(refs, refs, refs, key_pad_mask=adj.ref_node_pad)
        key_blocked = ~adj.key_ref.transpose(1, 2) | adj.key_node_pad.unsqueeze(1)  # (B, R, C)
        ref_keys = self.ref_keys(refs, new_keys, new_keys, attn_mask=key_blocked)
        beta, ref_target = self.target_centered(refs, target, adj.ref_node_pad)
        new_refs = self.ref_fuse(refs, [ref_self, ref_keys, ref_target])
        new_refs = new_refs.masked_fill(adj.ref_node_pad.unsqueeze(-1), 0.0)

        # target node: cross-attention over the updated references and keyphrases
        tgt_refs = self.tgt_refs(tgt, new_refs, new_refs, key_pad_mask=adj.ref_node_pad)
        tgt_keys = self.tgt_keys(tgt, new_keys, new_keys, key_pad_mask=adj.key_node_pad)
        new_target = self.tgt_fuse(tgt, [tgt_refs, tgt_keys]).squeeze(1)

        return new_target, new_refs, new_keys, beta


class DocumentNodeRefiner(nn.Module):
    """Graph-free fallback: one cross-attention block over document nodes."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.layer = TransformerLayer(
            config.hidden_size, config.num_heads, config.ff_size, config.dropout
        )

    def forward(self, target: Tensor, refs: Tensor, ref_node_pad: Tensor):
        nodes = torch.cat([target.unsqueeze(1), refs], dim=1)  # (B, 1+R, d)
        pad = torch.cat(
            [torch.zeros_like(ref_node_pad[:, :1]), ref_node_pad], dim=1
        )
        refined = self.layer(nodes, key_pad_mask=pad)
        refined = refined.masked_fill(pad.unsqueeze(-1), 0.0)
        return refined[:, 0], refined[:, 1:]


class WordFusion(nn.Module):
    """Refresh token states with their document node: FFN(token + node)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ffn = FeedForward(config.hidden_size, config.ff_size, config.dropout)

    def forward(self, token_states: Tensor, node: Tensor, pad: Tensor) -> Tensor:
        fused = self.ffn(token_states + node.unsqueeze(-2))
        return mask_tokens(fused, pad)


class GraphDocumentEncoder(nn.Module):
    """Full encoder stack producing an :class:`EncoderOutput`."""

    def __init__(self, config: ModelConfig, embedding: nn.Embedding):
        super().__init__()
        self.config = config
        self.token_encoder = TokenEncoder(config, embedding)
        if config.use_graph_encoder:
            self.graph_layers = nn.ModuleList(
                GraphLayer(config) for _ in range(config.graph_layers)
            )
        else:
            self.node_refiner = DocumentNodeRefiner(config)
        self.fuse_target = WordFusion(config)
        self.fuse_refs = WordFusion(config)
        self.fuse_keys = WordFusion(config)

    def forward(self, batch: Batch, encode_negatives: bool = True) -> EncoderOutput:
        cfg = self.config
        bsz = batch.size()
        adj = GraphAdjacency.from_batch(batch)

        tgt_tok = self.token_encoder(batch.target_ids, batch.target_pad)
        n_refs, l_ref = batch.ref_ids.shape[1], batch.ref_ids.shape[2]
        ref_tok = self.token_encoder(
            batch.ref_ids.reshape(bsz * n_refs, l_ref), batch.ref_pad.reshape(bsz * n_refs, l_ref)
        ).view(bsz, n_refs, l_ref, -1)
        n_keys, l_key = batch.key_ids.shape[1], batch.key_ids.shape[2]
        key_tok = self.token_encoder(
            batch.key_ids.reshape(bsz * n_keys, l_key), batch.key_pad.reshape(bsz * n_keys, l_key)
        ).view(bsz, n_keys, l_key, -1)

        target_node = init_nodes(tgt_tok, batch.target_pad)
        ref_nodes = init_nodes(ref_tok, batch.ref_pad)
        key_nodes = init_nodes(key_tok, batch.key_pad)
        init_ref_nodes = ref_nodes

        if encode_negatives:
            n_negs, l_neg = batch.neg_ids.shape[1], batch.neg_ids.shape[2]
            neg_tok = self.token_encoder(
                batch.neg_ids.reshape(bsz * n_negs, l_neg),
                batch.neg_pad.reshape(bsz * n_negs, l_neg),
            ).view(bsz, n_negs, l_neg, -1)
            neg_nodes = init_nodes(neg_tok, batch.neg_pad)
        else:
            neg_tok = tgt_tok.new_zeros(bsz, 0, 1, tgt_tok.shape[-1])
            neg_nodes = tgt_tok.new_zeros(bsz, 0, tgt_tok.shape[-1])
            batch = batch  # negatives skipped at inference time

        betas: list[Tensor] = []
        if cfg.use_graph_encoder:
            for layer in self.graph_layers:
                target_node, ref_nodes, key_nodes, beta = layer(
                    target_node, ref_nodes, key_nodes, adj
                )
                betas.append(beta)
        else:
            target_node, ref_nodes = self.node_refiner(target_node, ref_nodes, adj.ref_node_pad)

        fused_tgt = self.fuse_target(tgt_tok, target_node, batch.target_pad)
        fused_ref = self.fuse_refs(ref_tok, ref_nodes, batch.ref_pad)
        fused_key = self.fuse_keys(key_tok, key_nodes, batch.key_pad)

        neg_pad = batch.neg_pad if encode_negatives else batch.neg_pad[:, :0, :1]
        return EncoderOutput(
            target_tokens=fused_tgt,
            ref_tokens=fused_ref,
            key_tokens=fused_key,
            target_node=target_node,
            ref_nodes=ref_nodes,
            key_nodes=key_nodes,
            init_ref_tokens=ref_tok,
            init_ref_nodes=init_ref_nodes,
            init_neg_tokens=neg_tok,
            init_neg_nodes=neg_nodes,
            target_pad=batch.target_pad,
            ref_pad=batch.ref_pad,
            key_pad=batch.key_pad,
            neg_pad=neg_pad,
            ref_node_pad=adj.ref_node_pad,
            key_node_pad=adj.key_node_pad,
            neg_node_pad=neg_pad.all(dim=-1),
            betas=betas,
        )
