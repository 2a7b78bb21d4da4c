"""Joint training loop: Adam over the summed losses, validation, checkpoints.

Batch order is a pure function of (seed, epoch), so a checkpoint only
needs the step counter plus the torch RNG state to resume bitwise: the
resumed run revisits exactly the batches and dropout draws the
uninterrupted run would have seen.  Every step appends one metrics.csv
row; the total column always equals l_s + l_local + l_global.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from tagsum.config import ConfigError, RunConfig
from tagsum.corpus import (
    EncodedExample,
    PaperPool,
    RawExample,
    Vocabulary,
    replace_negatives,
)
from tagsum.data import Batch, collate
from tagsum.inference import generate_predictions
from tagsum.model import RelatedWorkModel
from tagsum.rouge import evaluate_texts

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "l_s", "l_local", "l_global", "total", "val_loss", "tau_pos_mean", "tau_neg_mean"
)

ABLATION_FLAGS = {
    "graph_encoder": "use_graph_encoder",
    "hierarchical_decoder": "use_hierarchical_decoder",
    "contrastive": "use_contrastive",
}

_EPOCH_SALT = 104729


class TrainingError(RuntimeError):
    pass


def ablate(config: RunConfig, flag: str) -> RunConfig:
    """Copy of ``config`` with one model component switched off."""
    if flag not in ABLATION_FLAGS:
        valid = ", ".join(sorted(ABLATION_FLAGS))
        raise ConfigError(f"unknown ablation flag '{flag}'; valid flags: {valid}")
    ablated = copy.deepcopy(config)
    setattr(ablated.model, ABLATION_FLAGS[flag], False)
    return ablated


def build_model(config: RunConfig) -> RelatedWorkModel:
    """Seed torch and construct the model (deterministic weights)."""
    torch.manual_seed(config.seed)
    return RelatedWorkModel(config.model)


def epoch_order(seed: int, epoch: int, n_examples: int) -> np.ndarray:
    """Deterministic shuffle of example indices for one epoch."""
    rng = np.random.default_rng([seed, _EPOCH_SALT, epoch])
    return rng.permutation(n_examples)


def batch_for_step(examples: Sequence[EncodedExample], step: int, batch_size: int,
                   seed: int) -> Batch:
    """The batch the fixed schedule assigns to (0-based) ``step``."""
    per_epoch = max(1, math.ceil(len(examples) / batch_size))
    epoch, slot = divmod(step, per_epoch)
    order = epoch_order(seed, epoch, len(examples))
    chosen = order[slot * batch_size : (slot + 1) * batch_size]
    return collate([examples[i] for i in chosen])


@dataclass
class TrainState:
    step: int = 0
    best_val_loss: float = math.inf
    bad_validations: int = 0
    seed: int = 0


@dataclass
class ResampleContext:
    """What per-epoch negative resampling needs (aligned with the encoded list)."""

    raw: Sequence[RawExample]
    pool: PaperPool
    vocab: Vocabulary


@dataclass
class TrainResult:
    state: TrainState
    model: RelatedWorkModel
    metrics_path: Path
    best_path: Path
    last_path: Path
    stopped_early: bool


def save_checkpoint(path: Path, model: RelatedWorkModel, optimizer: torch.optim.Optimizer,
                    state: TrainState, config: RunConfig) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "step": state.step,
            "best_val_loss": state.best_val_loss,
            "bad_validations": state.bad_validations,
            "seed": state.seed,
        },
        path,
    )
    sidecar = {
        "step": state.step,
        "best_val_loss": state.best_val_loss,
        "seed": state.seed,
        "config": config.to_dict(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path, model: RelatedWorkModel,
                    optimizer: torch.optim.Optimizer | None = None) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model.load_state_dict(blob["model"])
    if optimizer is not None:
        optimizer.load_state_dict(blob["optimizer"])
    torch.set_rng_state(blob["torch_rng"])
    return TrainState(
        step=blob["step"],
        best_val_loss=blob["best_val_loss"],
        bad_validations=blob.get("bad_validations", 0),
        seed=blob["seed"],
    )


def validation_loss(model: RelatedWorkModel, examples: Sequence[EncodedExample],
                    batch_size: int) -> float:
    """Mean total loss over the validation set, dropout off."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = collate(list(examples[start : start + batch_size]))
            losses = model.forward_losses(batch)
            total += float(losses.total) * batch.size()
            count += batch.size()
    if was_training:
        model.train()
    return total / max(count, 1)


def validation_rouge1(model: RelatedWorkModel, examples: Sequence[EncodedExample],
                      raw: Sequence[RawExample], vocab: Vocabulary, config: RunConfig) -> float:
    """Corpus-mean ROUGE-1 F1 of decoded validation outputs."""
    batches = [collate(list(examples[i : i + config.training.batch_size]))
               for i in range(0, len(examples), config.training.batch_size)]
    rows = generate_predictions(model, batches, vocab, config.inference)
    by_id = {ex.id: ex.related_work for ex in raw}
    ids = [row["id"] for row in rows]
    candidates = [row["prediction"] for row in rows]
    references = [by_id[i] for i in ids]
    report = evaluate_texts(ids, candidates, references)
    return report.means["rouge_1"].f1


def _write_metrics_row(writer, step: int, floats: dict[str, float],
                       val_loss: float | None) -> None:
    writer.writerow([
        step,
        f"{floats['l_s']:.8f}",
        f"{floats['l_local']:.8f}",
        f"{floats['l_global']:.8f}",
        f"{floats['total']:.8f}",
        "" if val_loss is None else f"{val_loss:.8f}",
        f"{floats['tau_pos_mean']:.8f}",
        f"{floats['tau_neg_mean']:.8f}",
    ])


def train(config: RunConfig,
          train_examples: Sequence[EncodedExample],
          val_examples: Sequence[EncodedExample],
          out_dir: str | Path,
          resume: str | Path | None = None,
          lr_schedule: Callable[[int], float] | None = None,
          resample: ResampleContext | None = None) -> TrainResult:
    """Run the optimization loop and leave checkpoints + metrics in ``out_dir``.

    ``lr_schedule`` maps the upcoming step number to a multiplier on the
    configured learning rate; by default the rate is fixed.  With
    ``training.resample_negatives`` on, ``resample`` must be provided and
    the stored negatives are replaced by a fresh deterministic draw at
    every epoch boundary.
    """
    if not train_examples:
        raise TrainingError("no training examples")
    if config.training.resample_negatives and resample is None:
        raise TrainingError("resample_negatives=true requires a ResampleContext")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"
    tcfg = config.training

    model = build_model(config)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=tcfg.learning_rate,
        betas=(tcfg.adam_beta1, tcfg.adam_beta2),
        eps=tcfg.adam_eps,
    )
    if resume is not None:
        state = load_checkpoint(resume, model, optimizer)
        mode = "a"
    else:
        state = TrainState(seed=config.seed)
        mode = "w"

    model.train()
    stopped_early = False
    active_examples = list(train_examples)
    active_epoch = -1
    per_epoch = max(1, math.ceil(len(train_examples) / tcfg.batch_size))
    with open(metrics_path, mode, encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)

        while state.step < tcfg.max_steps:
            if tcfg.resample_negatives:
                epoch = state.step // per_epoch
                if epoch != active_epoch:
                    epoch_seed = config.seed + (epoch + 1) * _EPOCH_SALT
                    active_examples = [
                        replace_negatives(enc, raw, resample.pool, resample.vocab,
                                          config.model, epoch_seed)
                        for enc, raw in zip(train_examples, resample.raw)
                    ]
                    active_epoch = epoch
            batch = batch_for_step(active_examples, state.step, tcfg.batch_size, config.seed)
            if lr_schedule is not None:
                factor = lr_schedule(state.step + 1)
                for group in optimizer.param_groups:
                    group["lr"] = tcfg.learning_rate * factor
            losses = model.forward_losses(batch)
            if not torch.isfinite(losses.total):
                replay = out_dir / "replay_batch.json"
                replay.write_text(json.dumps(
                    {"step": state.step + 1, "example_ids": batch.ids}, indent=2) + "\n")
                raise TrainingError(
                    f"non-finite loss at step {state.step + 1}; "
                    f"offending example ids saved to {replay}"
                )
            optimizer.zero_grad()
            losses.total.backward()
            if tcfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.clip_norm)
            optimizer.step()
            state.step += 1

            val_loss: float | None = None
            if val_examples and state.step % tcfg.val_interval == 0:
                val_loss = validation_loss(model, val_examples, tcfg.batch_size)
                if val_loss < state.best_val_loss:
                    state.best_val_loss = val_loss
                    state.bad_validations = 0
                    save_checkpoint(best_path, model, optimizer, state, config)
                else:
                    state.bad_validations += 1
            _write_metrics_row(writer, state.step, losses.as_floats(), val_loss)
            if val_loss is not None:
                handle.flush()
                if tcfg.patience > 0 and state.bad_validations >= tcfg.patience:
                    logger.info("early stop at step %d (patience %d)",
                                state.step, tcfg.patience)
                    stopped_early = True
                    break

    save_checkpoint(last_path, model, optimizer, state, config)
    if not best_path.exists():
        save_checkpoint(best_path, model, optimizer, state, config)
    return TrainResult(
        state=state,
        model=model,
        metrics_path=metrics_path,
        best_path=best_path,
        last_path=last_path,
        stopped_early=stopped_early,
    )
