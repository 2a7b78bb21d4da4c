"""Keyphrase-guided hierarchical decoder and the generation loss.

Each decoder layer first runs masked self-attention, then consults the
encoder memories in a fixed order: the keyphrase word states produce a
guide context, which in turn queries the target abstract and the
reference abstracts.  The three contexts are fused back into the decoder
state before the position-wise feed-forward sublayer.  The output
distribution is predicted from the concatenation of the final decoder
state with the three final-layer contexts.

With ``use_hierarchical_decoder=False`` the keyphrase stage is dropped:
the decoder state queries the target and reference memories directly and
the output projection sees only those two contexts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from tagsum.config import PAD_ID, ModelConfig
from tagsum.encoder import EncoderOutput
from tagsum.layers import FeedForward, MultiHeadAttention, sinusoidal_positions


def causal_mask(length: int, device: torch.device | None = None) -> Tensor:
    """(L, L) bool mask, True above the diagonal (future positions blocked)."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


@dataclass
class DecoderMemory:
    """Encoder states flattened into the three attention memories."""

    target: Tensor       # (B, La, d)
    target_pad: Tensor   # (B, La)
    refs: Tensor         # (B, R*Lr, d)
    refs_pad: Tensor     # (B, R*Lr)
    keys: Tensor         # (B, C*Lc, d)
    keys_pad: Tensor     # (B, C*Lc)

    @classmethod
    def from_encoder(cls, enc: EncoderOutput) -> "DecoderMemory":
        bsz = enc.target_tokens.shape[0]
        d = enc.target_tokens.shape[-1]
        return cls(
            target=enc.target_tokens,
            target_pad=enc.target_pad,
            refs=enc.ref_tokens.reshape(bsz, -1, d),
            refs_pad=enc.ref_pad.reshape(bsz, -1),
            keys=enc.key_tokens.reshape(bsz, -1, d),
            keys_pad=enc.key_pad.reshape(bsz, -1),
        )

    def select(self, index: int) -> "DecoderMemory":
        """Memory of one example, kept as a batch of one."""
        return DecoderMemory(
            target=self.target[index : index + 1],
            target_pad=self.target_pad[index : index + 1],
            refs=self.refs[index : index + 1],
            refs_pad=self.refs_pad[index : index + 1],
            keys=self.keys[index : index + 1],
            keys_pad=self.keys_pad[index : index + 1],
        )

    def repeat(self, times: int) -> "DecoderMemory":
        """Tile a batch-of-one memory for decoding several prefixes at once."""
        return DecoderMemory(
            target=self.target.expand(times, -1, -1),
            target_pad=self.target_pad.expand(times, -1),
            refs=self.refs.expand(times, -1, -1),
            refs_pad=self.refs_pad.expand(times, -1),
            keys=self.keys.expand(times, -1, -1),
            keys_pad=self.keys_pad.expand(times, -1),
        )


class HierarchicalDecoderLayer(nn.Module):
    """Self-attention, keyphrase-guided context cascade, fusion, FFN."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h, f, p = config.hidden_size, config.num_heads, config.ff_size, config.dropout
        self.self_attn = MultiHeadAttention(d, h, p)
        self.self_norm = nn.LayerNorm(d)
        self.key_attn = MultiHeadAttention(d, h, p)
        self.tgt_attn = MultiHeadAttention(d, h, p)
        self.ref_attn = MultiHeadAttention(d, h, p)
        self.fuse = nn.Linear(3 * d, d)
        self.fuse_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d, f, p)
        self.ffn_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(p)

    def forward(self, g: Tensor, mem: DecoderMemory, attn_mask: Tensor,
                collect: dict[str, Tensor] | None = None) -> tuple[Tensor, tuple[Tensor, ...]]:
        g = self.self_norm(g + self.dropout(self.self_attn(g, g, g, attn_mask=attn_mask)))
        if collect is None:
            c_key = self.key_attn(g, mem.keys, mem.keys, key_pad_mask=mem.keys_pad)
            c_tgt = self.tgt_attn(c_key, mem.target, mem.target, key_pad_mask=mem.target_pad)
            c_ref = self.ref_attn(c_key, mem.refs, mem.refs, key_pad_mask=mem.refs_pad)
        else:
            c_key, w_key = self.key_attn(
                g, mem.keys, mem.keys, key_pad_mask=mem.keys_pad, return_weights=True
            )
            c_tgt, w_tgt = self.tgt_attn(
                c_key, mem.target, mem.target, key_pad_mask=mem.target_pad, return_weights=True
            )
            c_ref, w_ref = self.ref_attn(
                c_key, mem.refs, mem.refs, key_pad_mask=mem.refs_pad, return_weights=True
            )
            collect.update(keyphrase=w_key, target=w_tgt, reference=w_ref)
        g = self.fuse_norm(g + self.dropout(self.fuse(torch.cat([c_key, c_tgt, c_ref], dim=-1))))
        g = self.ffn_norm(g + self.dropout(self.ffn(g)))
        return g, (c_key, c_tgt, c_ref)


class FlatDecoderLayer(nn.Module):
    """Decoder layer without the keyphrase guide stage."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h, f, p = config.hidden_size, config.num_heads, config.ff_size, config.dropout
        self.self_attn = MultiHeadAttention(d, h, p)
        self.self_norm = nn.LayerNorm(d)
        self.tgt_attn = MultiHeadAttention(d, h, p)
        self.ref_attn = MultiHeadAttention(d, h, p)
        self.fuse = nn.Linear(2 * d, d)
        self.fuse_norm = nn.LayerNorm(d)
        self.ffn = FeedForward(d, f, p)
        self.ffn_norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(p)

    def forward(self, g: Tensor, mem: DecoderMemory, attn_mask: Tensor,
                collect: dict[str, Tensor] | None = None) -> tuple[Tensor, tuple[Tensor, ...]]:
        g = self.self_norm(g + self.dropout(self.self_attn(g, g, g, attn_mask=attn_mask)))
        if collect is None:
            c_tgt = self.tgt_attn(g, mem.target, mem.target, key_pad_mask=mem.target_pad)
            c_ref = self.ref_attn(g, mem.refs, mem.refs, key_pad_mask=mem.refs_pad)
        else:
            c_tgt, w_tgt = self.tgt_attn(
                g, mem.target, mem.target, key_pad_mask=mem.target_pad, return_weights=True
            )
            c_ref, w_ref = self.ref_attn(
                g, mem.refs, mem.refs, key_pad_mask=mem.refs_pad, return_weights=True
            )
            collect.update(target=w_tgt, reference=w_ref)
        g = self.fuse_norm(g + self.dropout(self.fuse(torch.cat([c_tgt, c_ref], dim=-1))))
        g = self.ffn_norm(g + self.dropout(self.ffn(g)))
        return g, (c_tgt, c_ref)


@dataclass
class DecoderOutput:
    logits: Tensor                           # (B, Lg, V)
    states: Tensor                           # (B, Lg, d) final-layer decoder states
    attention: list[dict[str, Tensor]] | None = None  # per layer, head-averaged


class Decoder(nn.Module):
    """Autoregressive decoder over the encoder memories."""

    def __init__(self, config: ModelConfig, embedding: nn.Embedding):
        super().__init__()
        self.config = config
        self.embedding = embedding
        self.scale = math.sqrt(config.hidden_size)
        self.dropout = nn.Dropout(config.dropout)
        layer_cls = HierarchicalDecoderLayer if config.use_hierarchical_decoder else FlatDecoderLayer
        self.layers = nn.ModuleList(layer_cls(config) for _ in range(config.decoder_layers))
        n_contexts = 3 if config.use_hierarchical_decoder else 2
        self.out_proj = nn.Linear((1 + n_contexts) * config.hidden_size, config.vocab_size)

    def forward(self, input_ids: Tensor, enc: EncoderOutput,
                collect_attention: bool = False) -> DecoderOutput:
        """``input_ids``: (B, Lg) teacher-forcing prefix (starts with BOS)."""
        return self.forward_mem(input_ids, DecoderMemory.from_encoder(enc), collect_attention)

    def forward_mem(self, input_ids: Tensor, mem: DecoderMemory,
                    collect_attention: bool = False) -> DecoderOutput:
        x = self.embedding(input_ids) * self.scale
        pos = sinusoidal_positions(input_ids.shape[1], x.shape[-1], device=x.device, dtype=x.dtype)
        g = self.dropout(x + pos)
        mask = causal_mask(input_ids.shape[1], device=input_ids.device)
        attention: list[dict[str, Tensor]] | None = [] if collect_attention else None
        contexts: tuple[Tensor, ...] = ()
        for layer in self.layers:
            collect: dict[str, Tensor] | None = {} if collect_attention else None
            g, contexts = layer(g, mem, mask, collect)
            if collect_attention:
                attention.append(collect)
        logits = self.out_proj(torch.cat([g, *contexts], dim=-1))
        return DecoderOutput(logits=logits, states=g, attention=attention)

    def summary_state(self, out: DecoderOutput, input_ids: Tensor) -> Tensor:
        """Final-layer state at each sequence's last non-pad input position."""
        lengths = (input_ids != PAD_ID).sum(dim=-1).clamp(min=1)
        idx = (lengths - 1).view(-1, 1, 1).expand(-1, 1, out.states.shape[-1])
        return out.states.gather(1, idx).squeeze(1)


def generation_loss(logits: Tensor, targets: Tensor, smoothing: float) -> Tensor:
    """Label-smoothed negative log-likelihood, averaged over non-pad steps.

    The smoothed target puts ``1 - smoothing`` on the gold token and spreads
    ``smoothing`` uniformly over the remaining non-pad vocabulary entries;
    the pad index never receives probability mass.
    """
    vocab = logits.shape[-1]
    log_probs = F.log_softmax(logits, dim=-1)
    keep = targets != PAD_ID
    safe_targets = targets.masked_fill(~keep, 0)
    nll = -log_probs.gather(-1, safe_targets.unsqueeze(-1)).squeeze(-1)
    smooth = -(log_probs.sum(dim=-1) - log_probs[..., PAD_ID])
    per_step = (1.0 - smoothing) * nll + smoothing / (vocab - 1) * smooth
    per_step = per_step * keep.to(per_step.dtype)
    return per_step.sum() / keep.sum().clamp(min=1).to(per_step.dtype)
