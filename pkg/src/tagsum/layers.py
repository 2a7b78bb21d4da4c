"""Shared transformer building blocks.

Attention is standard scaled dot-product attention (QK^T / sqrt(d_head)
inside the softmax) with two masking conventions used throughout the
package: ``key_pad_mask`` is True at padded keys, ``attn_mask`` is True at
blocked (query, key) pairs.  A query whose keys are all blocked yields an
exact zero output vector instead of NaN.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def sinusoidal_positions(length: int, dim: int, device=None, dtype=None) -> Tensor:
    """Fixed sine/cosine position encodings, shape (length, dim)."""
    dtype = dtype or torch.get_default_dtype()
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, device=device, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    angles = position * freq
    enc = torch.zeros(length, dim, device=device, dtype=dtype)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return enc


class MultiHeadAttention(nn.Module):
    """Multi-head attention with pad-safe masking.

    ``attn_mask`` may be (Lq, Lk) shared across the batch or (B, Lq, Lk)
    per-example (used for graph adjacency).
    """

    def __init__(self, hidden_size: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if hidden_size % num_heads != 0:
            raise ValueError(f"hidden_size {hidden_size} not divisible by num_heads {num_heads}")
        self.hidden_size = hidden_size
        self.num_heads = num_heads
        self.head_dim = hidden_size // num_heads
        self.q_proj = nn.Linear(hidden_size, hidden_size)
        self.k_proj = nn.Linear(hidden_size, hidden_size)
        self.v_proj = nn.Linear(hidden_size, hidden_size)
        self.out_proj = nn.Linear(hidden_size, hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_pad_mask: Tensor | None = None,
        attn_mask: Tensor | None = None,
        return_weights: bool = False,
    ):
        bsz, q_len, _ = query.shape
        k_len = key.shape[1]
        q = self.q_proj(query).view(bsz, q_len, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(key).view(bsz, k_len, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(value).view(bsz, k_len, self.num_heads, self.head_dim).transpose(1, 2)

        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)

        blocked = None  # (B, Lq, Lk) bool
        if key_pad_mask is not None:
            blocked = key_pad_mask.unsqueeze(1).expand(bsz, q_len, k_len)
        if attn_mask is not None:
            am = attn_mask.unsqueeze(0).expand(bsz, -1, -1) if attn_mask.dim() == 2 else attn_mask
            blocked = am if blocked is None else (blocked | am)

        if blocked is not None:
            dead_query = blocked.all(dim=-1)  # (B, Lq): nothing to attend to
            # leave dead rows unmasked so softmax stays finite, zero them after
            fill = blocked & ~dead_query.unsqueeze(-1)
            scores = scores.masked_fill(fill.unsqueeze(1), float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if blocked is not None:
            probs = probs.masked_fill(dead_query.unsqueeze(1).unsqueeze(-1), 0.0)
        probs = self.dropout(probs)

        context = torch.matmul(probs, v).transpose(1, 2).reshape(bsz, q_len, self.hidden_size)
        out = self.out_proj(context)
        if blocked is not None:
            out = out.masked_fill(dead_query.unsqueeze(-1), 0.0)
        if return_weights:
            return out, probs.mean(dim=1)  # head-averaged (B, Lq, Lk)
        return out


class FeedForward(nn.Module):
    """Position-wise feed-forward: Linear -> ReLU -> Linear."""

    def __init__(self, hidden_size: int, ff_size: int, dropout: float = 0.0, out_size: int = 0):
        super().__init__()
        self.inner = nn.Linear(hidden_size, ff_size)
        self.outer = nn.Linear(ff_size, out_size or hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(self.dropout(torch.relu(self.inner(x))))


class TransformerLayer(nn.Module):
    """One encoder-style layer: self-attention + FFN, post-norm residuals."""

    def __init__(self, hidden_size: int, num_heads: int, ff_size: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(hidden_size, num_heads, dropout)
        self.ffn = FeedForward(hidden_size, ff_size, dropout)
        self.norm_attn = nn.LayerNorm(hidden_size)
        self.norm_ffn = nn.LayerNorm(hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_pad_mask: Tensor | None = None) -> Tensor:
        x = self.norm_attn(x + self.dropout(self.attn(x, x, x, key_pad_mask=key_pad_mask)))
        x = self.norm_ffn(x + self.dropout(self.ffn(x)))
        return x


class SourceFusion(nn.Module):
    """Merge several context vectors into a node state.

    concat -> linear to hidden -> residual add on the node -> layer norm,
    then a position-wise FFN sublayer with its own residual and norm.
    """

    def __init__(self, hidden_size: int, ff_size: int, n_sources: int, dropout: float = 0.0):
        super().__init__()
        self.reduce = nn.Linear(n_sources * hidden_size, hidden_size)
        self.ffn = FeedForward(hidden_size, ff_size, dropout)
        self.norm_merge = nn.LayerNorm(hidden_size)
        self.norm_ffn = nn.LayerNorm(hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, residual: Tensor, sources: list[Tensor]) -> Tensor:
        x = self.norm_merge(residual + self.dropout(self.reduce(torch.cat(sources, dim=-1))))
        x = self.norm_ffn(x + self.dropout(self.ffn(x)))
        return x
