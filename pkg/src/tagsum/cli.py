"""Command-line pipeline: synth, preprocess, train, generate, evaluate, inspect-attention.

Configuration precedence, lowest to highest: named profile (``--profile``,
default ``desk``), JSON config file (``--config``), then individual
command-line flags.  The ``TAGSUM_THREADS`` environment variable caps
torch's intra-op thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from tagsum.config import BOS_ID, ConfigError, RunConfig, load_profile
from tagsum.corpus import (
    CorpusError,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    load_corpus,
    matched_negatives_count,
    sample_negatives,
    save_corpus,
    save_negatives,
)
from tagsum.data import collate, encode_corpus, load_encoded, pool_from_split, save_encoded
from tagsum.decoder import DecoderMemory
from tagsum.inference import (
    beam_search,
    generate_predictions,
    read_predictions,
    write_predictions,
)
from tagsum.keyphrase import extract_example_keyphrases, save_keyphrases
from tagsum.model import RelatedWorkModel
from tagsum.rouge import evaluate_texts, pair_predictions, write_report
from tagsum.training import ResampleContext, TrainingError, load_checkpoint, train

SPLIT_NAMES = ("train", "validation", "test")


def apply_thread_cap() -> None:
    raw = os.environ.get("TAGSUM_THREADS")
    if raw:
        torch.set_num_threads(max(1, int(raw)))


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(args: argparse.Namespace) -> RunConfig:
    base = load_profile(args.profile).to_dict()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
        base = _deep_merge(base, file_values)
    config = RunConfig.from_dict(base)
    if args.seed is not None:
        config.seed = args.seed
    return config


def _encoded_path(config: RunConfig, split: str) -> Path:
    return Path(config.paths.encoded_dir) / f"{split}.jsonl"


def _load_vocab(config: RunConfig) -> Vocabulary:
    path = Path(config.paths.vocab_path)
    if not path.exists():
        raise ConfigError(f"vocabulary not found at {path}; run `tagsum preprocess` first")
    return Vocabulary.load(path)


def _load_model(config: RunConfig, checkpoint: Path, vocab: Vocabulary) -> RelatedWorkModel:
    if not checkpoint.exists():
        raise ConfigError(
            f"checkpoint not found at {checkpoint}; run `tagsum train` first "
            f"or pass --checkpoint"
        )
    sidecar = checkpoint.with_suffix(".json")
    if sidecar.exists():
        stored = json.loads(sidecar.read_text())
        model_config = RunConfig.from_dict(stored["config"]).model
    else:
        model_config = config.model
        model_config.vocab_size = len(vocab)
    if model_config.vocab_size != len(vocab):
        raise ConfigError(
            f"checkpoint vocabulary size {model_config.vocab_size} does not match "
            f"{config.paths.vocab_path} ({len(vocab)} tokens)"
        )
    model = RelatedWorkModel(model_config)
    load_checkpoint(checkpoint, model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    split = generate_synthetic_corpus(
        n_train=args.n_train,
        vocab_size=args.vocab_size,
        refs_per_example=args.refs_per_example,
        seed=config.seed,
        n_validation=args.n_validation,
        n_test=args.n_test,
    )
    out_dir = Path(args.out or config.paths.corpus_dir)
    save_corpus(split, out_dir)
    for name, count in split.sizes().items():
        print(f"{name}: {count} examples")
    print(f"corpus written to {out_dir}")
    return 0


def cmd_preprocess(args: argparse.Namespace, config: RunConfig) -> int:
    split = load_corpus(config.paths.corpus_dir, config.data.filter_min_refs)
    if not split.train:
        raise CorpusError(f"no usable training examples in {config.paths.corpus_dir}")
    vocab = build_vocabulary(
        split.train, max_size=config.data.max_vocab_size, min_freq=config.data.min_token_freq
    )
    vocab.save(config.paths.vocab_path)

    all_examples = split.all_examples()
    pool = pool_from_split(split)
    keyphrase_map = {
        ex.id: extract_example_keyphrases(ex, config.model, config.data.per_doc_keyphrases)
        for ex in all_examples
    }
    save_keyphrases(config.paths.keyphrase_path, keyphrase_map)
    negatives_map = {
        ex.id: sample_negatives(
            ex, pool,
            matched_negatives_count(ex, config.model.num_negatives, config.model.max_refs),
            config.seed,
        )
        for ex in all_examples
    }
    save_negatives(config.paths.negatives_path, negatives_map)

    for name in SPLIT_NAMES:
        examples = getattr(split, name)
        encoded = encode_corpus(
            examples, vocab, config.model,
            keyphrases=keyphrase_map, negatives=negatives_map, pool=pool,
            whole_phrase_linking=config.data.whole_phrase_linking,
        )
        save_encoded(_encoded_path(config, name), encoded)

    n_pairs = len(all_examples)
    mean_refs = sum(len(ex.references) for ex in all_examples) / max(n_pairs, 1)
    print(f"examples: {split.sizes()} (dropped: {split.drops})")
    print(f"papers in pool: {len(pool)}")
    print(f"mean references per example: {mean_refs:.2f}")
    print(f"vocabulary size: {len(vocab)}")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    if args.max_steps is not None:
        config.training.max_steps = args.max_steps
    if args.batch_size is not None:
        config.training.batch_size = args.batch_size
    if args.learning_rate is not None:
        config.training.learning_rate = args.learning_rate
    config.validate()

    vocab = _load_vocab(config)
    config.model.vocab_size = len(vocab)
    train_path = _encoded_path(config, "train")
    if not train_path.exists():
        raise ConfigError(f"encoded corpus not found at {train_path}; run `tagsum preprocess`")
    train_examples = load_encoded(train_path)
    val_path = _encoded_path(config, "validation")
    val_examples = load_encoded(val_path) if val_path.exists() else []

    resample = None
    if config.training.resample_negatives:
        split = load_corpus(config.paths.corpus_dir, config.data.filter_min_refs)
        by_id = {ex.id: ex for ex in split.train}
        resample = ResampleContext(
            raw=[by_id[enc.id] for enc in train_examples],
            pool=pool_from_split(split),
            vocab=vocab,
        )

    result = train(
        config, train_examples, val_examples, config.paths.checkpoint_dir,
        resume=args.resume, resample=resample,
    )
    print(f"trained to step {result.state.step}"
          + (" (early stop)" if result.stopped_early else ""))
    if result.state.best_val_loss != float("inf"):
        print(f"best validation loss: {result.state.best_val_loss:.6f}")
    print(f"checkpoints: {result.best_path} / {result.last_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def _inference_overrides(args: argparse.Namespace, config: RunConfig) -> None:
    if args.beam_width is not None:
        config.inference.beam_width = args.beam_width
    if args.min_len is not None:
        config.inference.min_len = args.min_len
    if args.max_len is not None:
        config.inference.max_len = args.max_len
    if args.greedy:
        config.inference.greedy = True
    config.validate()


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> int:
    _inference_overrides(args, config)
    vocab = _load_vocab(config)
    checkpoint = Path(args.checkpoint or Path(config.paths.checkpoint_dir) / "best.pt")
    model = _load_model(config, checkpoint, vocab)

    encoded_path = _encoded_path(config, args.split)
    if not encoded_path.exists():
        raise ConfigError(f"encoded split not found at {encoded_path}; run `tagsum preprocess`")
    examples = load_encoded(encoded_path)
    batch_size = config.training.batch_size
    batches = [collate(examples[i : i + batch_size]) for i in range(0, len(examples), batch_size)]

    rows = generate_predictions(model, batches, vocab, config.inference)
    out_path = Path(args.out or Path(config.paths.output_dir) / "predictions.jsonl")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(rows, out_path)
    print(f"{len(rows)} predictions written to {out_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    predictions_path = Path(args.predictions or Path(config.paths.output_dir) / "predictions.jsonl")
    if not predictions_path.exists():
        raise ConfigError(f"predictions not found at {predictions_path}; run `tagsum generate`")
    predictions = read_predictions(predictions_path)
    split = load_corpus(config.paths.corpus_dir, config.data.filter_min_refs)
    examples = getattr(split, args.split)
    ids, candidates, references = pair_predictions(predictions, examples)
    report = evaluate_texts(
        ids, candidates, references, stem=args.stem, remove_stopwords=args.remove_stopwords
    )
    out_dir = Path(config.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "rouge_report.json"
    csv_path = out_dir / "rouge_per_example.csv"
    write_report(report, json_path, csv_path)
    print(report.summary_line())
    print(f"report: {json_path}  per-example: {csv_path}")
    return 0


def cmd_inspect_attention(args: argparse.Namespace, config: RunConfig) -> int:
    _inference_overrides(args, config)
    vocab = _load_vocab(config)
    checkpoint = Path(args.checkpoint or Path(config.paths.checkpoint_dir) / "best.pt")
    model = _load_model(config, checkpoint, vocab)

    encoded_path = _encoded_path(config, args.split)
    if not encoded_path.exists():
        raise ConfigError(f"encoded split not found at {encoded_path}; run `tagsum preprocess`")
    examples = load_encoded(encoded_path)
    if args.id:
        matching = [ex for ex in examples if ex.id == args.id]
        if not matching:
            raise ConfigError(f"example id {args.id!r} not found in split {args.split!r}")
        example = matching[0]
    else:
        example = examples[0]

    batch = collate([example])
    with torch.no_grad():
        enc = model.encode(batch, with_negatives=False)
        mem = DecoderMemory.from_encoder(enc)
        result = beam_search(model.decoder, mem, config.inference)
        prefix = torch.tensor([[BOS_ID, *result.tokens]], dtype=torch.long)
        out = model.decode(prefix, enc, collect_attention=True)

    layers = []
    for collected in out.attention or []:
        layers.append({name: weights[0].tolist() for name, weights in collected.items()})
    payload = {
        "id": example.id,
        "tokens": vocab.decode(result.tokens),
        "score": result.score,
        "layers": layers,
        "betas": [beta[0].tolist() for beta in enc.betas],
    }
    out_path = Path(args.out or Path(config.paths.output_dir) / "attention.json")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"attention weights for {example.id!r} written to {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (overrides the profile)")
    common.add_argument("--profile", default="desk", choices=("desk", "paper"),
                        help="named default configuration (default: desk)")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")

    parser = argparse.ArgumentParser(
        prog="tagsum",
        description="Target-aware related-work generation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", help="corpus directory (default: paths.corpus_dir)")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-validation", type=int, default=32)
    p.add_argument("--n-test", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=120)
    p.add_argument("--refs-per-example", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common],
                       help="build vocabulary, keyphrases, negatives, encoded splits")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="run the training loop")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="decode a split with beam search")
    p.add_argument("--checkpoint", help="checkpoint path (default: <checkpoint_dir>/best.pt)")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES)
    p.add_argument("--out", help="output JSONL path")
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--greedy", action="store_true", help="width-1 decoding")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions with ROUGE")
    p.add_argument("--predictions", help="predictions JSONL (default: <output_dir>/predictions.jsonl)")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES)
    p.add_argument("--stem", action="store_true", help="apply light suffix stemming")
    p.add_argument("--remove-stopwords", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-attention", parents=[common],
                       help="decode one example and export its attention weights")
    p.add_argument("--checkpoint", help="checkpoint path (default: <checkpoint_dir>/best.pt)")
    p.add_argument("--split", default="test", choices=SPLIT_NAMES)
    p.add_argument("--id", help="example id (default: first example of the split)")
    p.add_argument("--out", help="output JSON path")
    p.add_argument("--beam-width", type=int, default=None)
    p.add_argument("--min-len", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--greedy", action="store_true")
    p.set_defaults(func=cmd_inspect_attention)

    return parser


def main(argv: list[str] | None = None) -> int:
    apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_run_config(args)
        return args.func(args, config)
    except (ConfigError, CorpusError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
