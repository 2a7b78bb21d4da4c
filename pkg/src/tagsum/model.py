"""Full model: shared embeddings, encoder, decoder, matching networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from tagsum.config import PAD_ID, ConfigError, ModelConfig
from tagsum.contrastive import (
    ContrastiveScorer,
    MatchScores,
    global_loss,
    local_loss,
    total_loss,
)
from tagsum.data import Batch
from tagsum.decoder import Decoder, DecoderOutput, generation_loss
from tagsum.encoder import EncoderOutput, GraphDocumentEncoder


@dataclass
class LossBreakdown:
    """Per-batch training losses plus the matcher scores for logging."""

    l_s: Tensor
    l_local: Tensor
    l_global: Tensor
    total: Tensor
    scores: MatchScores | None

    def as_floats(self) -> dict[str, float]:
        row = {
            "l_s": float(self.l_s.detach()),
            "l_local": float(self.l_local.detach()),
            "l_global": float(self.l_global.detach()),
            "total": float(self.total.detach()),
        }
        if self.scores is not None:
            row["tau_pos_mean"], row["tau_neg_mean"] = self.scores.mean_local()
        else:
            row["tau_pos_mean"] = row["tau_neg_mean"] = float("nan")
        return row


def build_embedding(config: ModelConfig) -> nn.Embedding:
    emb = nn.Embedding(config.vocab_size, config.hidden_size, padding_idx=PAD_ID)
    nn.init.normal_(emb.weight, mean=0.0, std=0.02)
    with torch.no_grad():
        emb.weight[PAD_ID].zero_()
        if config.embedding_init_path:
            table = np.load(config.embedding_init_path)
            if tuple(table.shape) != (config.vocab_size, config.hidden_size):
                raise ConfigError(
                    f"embedding table {tuple(table.shape)} does not match "
                    f"({config.vocab_size}, {config.hidden_size})"
                )
            emb.weight.copy_(torch.from_numpy(np.asarray(table, dtype=np.float32)))
            emb.weight[PAD_ID].zero_()
    return emb


class RelatedWorkModel(nn.Module):
    """Target-aware related-work generator with matching heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.embedding = build_embedding(config)
        self.encoder = GraphDocumentEncoder(config, self.embedding)
        self.decoder = Decoder(config, self.embedding)
        self.scorer = ContrastiveScorer(config) if config.use_contrastive else None

    def encode(self, batch: Batch, with_negatives: bool | None = None) -> EncoderOutput:
        if with_negatives is None:
            with_negatives = self.config.use_contrastive
        return self.encoder(batch, encode_negatives=with_negatives)

    def decode(self, input_ids: Tensor, enc: EncoderOutput,
               collect_attention: bool = False) -> DecoderOutput:
        return self.decoder(input_ids, enc, collect_attention=collect_attention)

    def forward_losses(self, batch: Batch) -> LossBreakdown:
        enc = self.encode(batch)
        dec_input = batch.gold_ids[:, :-1]
        targets = batch.gold_ids[:, 1:]
        out = self.decoder(dec_input, enc)
        l_s = generation_loss(out.logits, targets, self.config.label_smoothing)
        if self.scorer is not None:
            summary = self.decoder.summary_state(out, dec_input)
            scores = self.scorer(summary, enc)
            l_local = local_loss(scores)
            l_global = global_loss(scores)
        else:
            scores = None
            l_local = l_s.new_zeros(())
            l_global = l_s.new_zeros(())
        return LossBreakdown(
            l_s=l_s,
            l_local=l_local,
            l_global=l_global,
            total=total_loss(l_s, l_local, l_global),
            scores=scores,
        )

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)
