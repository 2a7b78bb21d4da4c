"""Matching networks and contrastive losses.

The local matcher scores how well the decoded summary matches one paper
at the token level: the summary state is paired with every token state,
a 1-D convolution plus masked max-pooling condenses the pairs, and a
feed-forward head squashes to (0, 1).  The global matcher scores the
summary against a pooled set of paper nodes.  Both use the
initialization-stage paper states so that sampled negatives (which have
no place in the example's graph) are encoded identically to positives.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from tagsum.config import ModelConfig
from tagsum.encoder import EncoderOutput, init_nodes
from tagsum.layers import FeedForward

logger = logging.getLogger(__name__)

LOG_EPS = 1e-7


@dataclass
class MatchScores:
    """Local and global matching scores for one batch."""

    local_pos: Tensor   # (B, R) score per reference
    local_neg: Tensor   # (B, K) score per sampled negative
    global_pos: Tensor  # (B,) score for the pooled references
    global_neg: Tensor  # (B,) score for the pooled negatives
    pos_valid: Tensor   # (B, R) False for all-pad reference slots
    neg_valid: Tensor   # (B, K)

    def mean_local(self) -> tuple[float, float]:
        """(mean positive score, mean negative score) over valid slots."""
        pos = self.local_pos.detach()[self.pos_valid]
        neg = self.local_neg.detach()[self.neg_valid]
        mean_pos = float(pos.mean()) if pos.numel() else 0.5
        mean_neg = float(neg.mean()) if neg.numel() else 0.5
        return mean_pos, mean_neg


class LocalMatcher(nn.Module):
    """Token-level matching: conv over [summary; token] pairs, pool, score."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden_size
        self.conv = nn.Conv1d(2 * d, d, kernel_size=3, padding=1)
        self.head = FeedForward(d, config.ff_size, config.dropout, out_size=1)

    def forward(self, summary: Tensor, token_states: Tensor, pad: Tensor) -> Tensor:
        """summary (B, d), token_states (B, N, L, d), pad (B, N, L) -> (B, N)."""
        bsz, n_docs, length, d = token_states.shape
        states = token_states.masked_fill(pad.unsqueeze(-1), 0.0)
        expanded = summary.view(bsz, 1, 1, d).expand(bsz, n_docs, length, d)
        pairs = torch.cat([expanded, states], dim=-1)           # (B, N, L, 2d)
        conv_in = pairs.reshape(bsz * n_docs, length, 2 * d).transpose(1, 2)
        feat = torch.relu(self.conv(conv_in))                   # (B*N, d, L)
        flat_pad = pad.reshape(bsz * n_docs, 1, length)
        feat = feat.masked_fill(flat_pad, float("-inf"))
        pooled = feat.max(dim=-1).values                        # (B*N, d)
        all_pad = pad.all(dim=-1).reshape(bsz * n_docs)
        pooled = torch.where(all_pad.unsqueeze(-1), torch.zeros_like(pooled), pooled)
        scores = torch.sigmoid(self.head(pooled).squeeze(-1))
        # all-pad papers carry no evidence either way
        scores = torch.where(all_pad, torch.full_like(scores, 0.5), scores)
        n_empty = int(all_pad.sum())
        if n_empty:
            logger.debug("local matcher scored %d all-pad papers at 0.5", n_empty)
        return scores.view(bsz, n_docs)


class GlobalMatcher(nn.Module):
    """Set-level matching: summary against a mean-pooled node collection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.head = FeedForward(2 * config.hidden_size, config.ff_size, config.dropout, out_size=1)

    def forward(self, summary: Tensor, nodes: Tensor, node_pad: Tensor) -> Tensor:
        """summary (B, d), nodes (B, N, d), node_pad (B, N) -> (B,)."""
        pooled = init_nodes(nodes, node_pad)
        return torch.sigmoid(self.head(torch.cat([summary, pooled], dim=-1)).squeeze(-1))


class ContrastiveScorer(nn.Module):
    """Bundle of the two matchers, applied to a batch's encoder output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.local = LocalMatcher(config)
        self.global_ = GlobalMatcher(config)

    def forward(self, summary: Tensor, enc: EncoderOutput) -> MatchScores:
        return MatchScores(
            local_pos=self.local(summary, enc.init_ref_tokens, enc.ref_pad),
            local_neg=self.local(summary, enc.init_neg_tokens, enc.neg_pad),
            global_pos=self.global_(summary, enc.init_ref_nodes, enc.ref_node_pad),
            global_neg=self.global_(summary, enc.init_neg_nodes, enc.neg_node_pad),
            pos_valid=~enc.ref_node_pad,
            neg_valid=~enc.neg_node_pad,
        )


def _masked_mean(values: Tensor, valid: Tensor) -> Tensor:
    kept = values * valid.to(values.dtype)
    return kept.sum() / valid.sum().clamp(min=1).to(values.dtype)


def local_loss(scores: MatchScores) -> Tensor:
    """-(mean log pos + mean log(1 - neg)) over valid papers."""
    log_pos = torch.log(scores.local_pos.clamp(min=LOG_EPS))
    log_neg = torch.log((1.0 - scores.local_neg).clamp(min=LOG_EPS))
    return -(_masked_mean(log_pos, scores.pos_valid) + _masked_mean(log_neg, scores.neg_valid))


def global_loss(scores: MatchScores) -> Tensor:
    """-(mean log pos + mean log(1 - neg)) over the batch's pooled scores."""
    log_pos = torch.log(scores.global_pos.clamp(min=LOG_EPS))
    log_neg = torch.log((1.0 - scores.global_neg).clamp(min=LOG_EPS))
    return -(log_pos.mean() + log_neg.mean())


def total_loss(l_s: Tensor, l_local: Tensor, l_global: Tensor) -> Tensor:
    """Unweighted sum of the generation and matching losses."""
    return l_s + l_local + l_global
