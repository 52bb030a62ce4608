"""Command-line entry point: gen | train | eval | predict.

Every command is deterministic given its flags (seeds are flags), and the
resolved configuration is echoed into each output artifact: the checkpoint
stores it in its header, report files carry it as header lines or records,
and `gen` writes a sidecar run.json (the dataset files themselves have a
fixed line format with no room for headers).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, DataFormatError, VocabError
from .evaluation import (
    decide,
    evaluate,
    probabilities,
    render_ablation_table,
    render_records,
    render_text_report,
    run_ablation_suite,
)
from .model import Model, ModelConfig, VARIANTS
from .synthetic import SyntheticConfig, generate_synthetic
from .textdata import (
    load_categories,
    load_dataset,
    load_vocab,
    save_categories,
    save_dataset,
    save_vocab,
    tokenize,
)
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


@dataclass
class RunConfig:
    """Every tunable, with desk-scale defaults."""

    d: int = 64
    l_q: int = 16
    l_c: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_ffn: int = 0
    conv_filters: int = 8
    conv_window: tuple = (3, 3)
    conv_stride: tuple = (1, 1)
    pool_window: tuple = (2, 2)
    pool_stride: tuple = (2, 2)
    conv_blocks: int = 2
    variant: str = "full"
    lr: float = 5e-5
    batch_size: int = 32
    epochs: int = 10
    threshold: float = 0.5
    seed: int = 42
    workers: int = 1

    def as_dict(self):
        out = dataclasses.asdict(self)
        for key in ("conv_window", "conv_stride", "pool_window", "pool_stride"):
            out[key] = list(out[key])
        return out


def _pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _add_model_flags(p):
    p.add_argument("--d", type=int, default=64, help="embedding width")
    p.add_argument("--l-q", type=int, default=16, help="query length after pad/truncate")
    p.add_argument("--l-c", type=int, default=32, help="category text length")
    p.add_argument("--encoder-layers", type=int, default=2)
    p.add_argument("--encoder-heads", type=int, default=4)
    p.add_argument("--encoder-ffn", type=int, default=0, help="0 means 4*d")
    p.add_argument("--conv-filters", type=int, default=8)
    p.add_argument("--conv-window", type=_pair, default=(3, 3), metavar="H,W")
    p.add_argument("--conv-stride", type=_pair, default=(1, 1), metavar="H,W")
    p.add_argument("--pool-window", type=_pair, default=(2, 2), metavar="H,W")
    p.add_argument("--pool-stride", type=_pair, default=(2, 2), metavar="H,W")
    p.add_argument("--conv-blocks", type=int, default=2)
    p.add_argument("--variant", choices=VARIANTS, default="full")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--workers", type=int, default=1)


def make_parser():
    parser = argparse.ArgumentParser(
        prog="intentmatch",
        description="Multi-label query intent classifier: synthesize data, "
        "train, evaluate, predict.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic labeled-query dataset")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--categories", type=int, default=8)
    g.add_argument("--vocab-size", type=int, default=48)
    g.add_argument("--queries-per-category", type=int, default=300)
    g.add_argument("--tail-exponent", type=float, default=0.5)
    g.add_argument("--multi-label-fraction", type=float, default=0.15)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--test-fraction", type=float, default=1.0 / 6.0)
    g.add_argument("--query-len-min", type=int, default=4)
    g.add_argument("--query-len-max", type=int, default=10)
    g.add_argument("--l-q", type=int, default=16)
    g.add_argument("--seed", type=int, default=42)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--train-file", required=True)
    t.add_argument("--categories-file", required=True)
    t.add_argument("--vocab-file", required=True)
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--loss-log", required=True)
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="score a dataset against a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-file", required=True)
    e.add_argument("--categories-file", required=True)
    e.add_argument("--vocab-file", required=True)
    e.add_argument("--report-out", required=True)
    e.add_argument("--records-out", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--ablation", action="store_true",
                   help="retrain full model and all ablations, write a comparison table")
    e.add_argument("--train-file", help="training data, required with --ablation")
    e.add_argument("--ablation-out", help="table path, required with --ablation")

    q = sub.add_parser("predict", help="rank categories for one query")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--categories-file", required=True)
    q.add_argument("--vocab-file", required=True)
    q.add_argument("--query", required=True)
    q.add_argument("--threshold", type=float, default=0.5)
    return parser


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"missing file: {p}")


def _run_config_from_args(args):
    return RunConfig(
        d=args.d, l_q=args.l_q, l_c=args.l_c,
        encoder_layers=args.encoder_layers, encoder_heads=args.encoder_heads,
        encoder_ffn=args.encoder_ffn, conv_filters=args.conv_filters,
        conv_window=args.conv_window, conv_stride=args.conv_stride,
        pool_window=args.pool_window, pool_stride=args.pool_stride,
        conv_blocks=args.conv_blocks, variant=args.variant,
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, workers=args.workers,
    )


def _model_config(run, vocab, cats):
    return ModelConfig(
        vocab_size=len(vocab), num_categories=len(cats),
        d=run.d, l_q=run.l_q, l_c=run.l_c,
        encoder_layers=run.encoder_layers, encoder_heads=run.encoder_heads,
        encoder_ffn=run.encoder_ffn, conv_filters=run.conv_filters,
        conv_window=run.conv_window, conv_stride=run.conv_stride,
        pool_window=run.pool_window, pool_stride=run.pool_stride,
        conv_blocks=run.conv_blocks, variant=run.variant,
    )


def cmd_gen(args):
    cfg = SyntheticConfig(
        num_categories=args.categories,
        vocab_size=args.vocab_size,
        queries_per_category=args.queries_per_category,
        tail_exponent=args.tail_exponent,
        seed=args.seed,
        multi_label_fraction=args.multi_label_fraction,
        noise=args.noise,
        test_fraction=args.test_fraction,
        query_len_min=args.query_len_min,
        query_len_max=args.query_len_max,
        query_l_max=args.l_q,
    )
    data = generate_synthetic(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_vocab(out / "vocab.txt", data.vocab)
    save_categories(out / "categories.tsv", data.categories)
    save_dataset(out / "train.tsv", data.train)
    save_dataset(out / "test.tsv", data.test)
    sidecar = {"command": "gen", "config": dataclasses.asdict(cfg)}
    (out / "run.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {len(data.train)} train / {len(data.test)} test queries, "
          f"{len(data.categories)} categories to {out}")
    return 0


def cmd_train(args):
    _require_files(args.train_file, args.categories_file, args.vocab_file)
    run = _run_config_from_args(args)
    vocab = load_vocab(args.vocab_file)
    cats = load_categories(args.categories_file, vocab)
    data = load_dataset(args.train_file, vocab, len(cats), l_max=run.l_q)
    model = Model(_model_config(run, vocab, cats), np.random.default_rng(run.seed))
    tc = TrainConfig(epochs=run.epochs, batch_size=run.batch_size, lr=run.lr,
                     seed=run.seed, workers=run.workers)
    lines = []

    def log_fn(epoch, loss):
        line = f"{epoch + 1}\t{loss:.10g}"
        lines.append(line)
        print(line)

    history, state = train(model, data, cats, tc, log_fn=log_fn)
    Path(args.loss_log).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    save_checkpoint(args.checkpoint_out, model, vocab, cats, state,
                    extra={"run_config": run.as_dict()})
    print(f"checkpoint: {args.checkpoint_out}")
    return 0


def _config_header_lines(extra, threshold):
    run = extra.get("run_config", {})
    pairs = " ".join(f"{k}={run[k]}" for k in sorted(run))
    return [
        f"run config (from checkpoint): {pairs}",
        f"eval threshold: {threshold:g}",
    ]


def cmd_eval(args):
    _require_files(args.checkpoint, args.data_file, args.categories_file, args.vocab_file)
    vocab = load_vocab(args.vocab_file)
    cats = load_categories(args.categories_file, vocab)
    loaded = load_checkpoint(args.checkpoint, vocab, cats)
    model = loaded.model
    data = load_dataset(args.data_file, vocab, len(cats), l_max=model.config.l_q)
    report = evaluate(model, data, cats, threshold=args.threshold)

    header = _config_header_lines(loaded.extra, args.threshold)
    text = "".join(h + "\n" for h in header) + "\n" + render_text_report(report)
    Path(args.report_out).write_text(text, encoding="utf-8")

    records = render_records(report)
    run_cfg = loaded.extra.get("run_config", {})
    run_rows = "".join(
        f"run\t-\t{k}\t{run_cfg[k]}\n" for k in sorted(run_cfg)
    )
    Path(args.records_out).write_text(run_rows + records, encoding="utf-8")
    print(render_text_report(report), end="")

    if args.ablation:
        if not args.train_file or not args.ablation_out:
            raise ConfigError("--ablation requires --train-file and --ablation-out")
        _require_files(args.train_file)
        train_data = load_dataset(args.train_file, vocab, len(cats), l_max=model.config.l_q)
        base = dataclasses.replace(model.config, variant="full")
        # retrain with the settings the checkpoint was built with
        tc = TrainConfig(
            epochs=int(run_cfg.get("epochs", 10)),
            batch_size=int(run_cfg.get("batch_size", 32)),
            lr=float(run_cfg.get("lr", 5e-5)),
            seed=int(run_cfg.get("seed", 42)),
            workers=int(run_cfg.get("workers", 1)),
        )
        results = run_ablation_suite(train_data, data, cats, base, tc, model_seed=tc.seed)
        table = "".join(h + "\n" for h in header) + "\n" + render_ablation_table(results)
        Path(args.ablation_out).write_text(table, encoding="utf-8")
        print(render_ablation_table(results), end="")
    return 0


def cmd_predict(args):
    _require_files(args.checkpoint, args.categories_file, args.vocab_file)
    vocab = load_vocab(args.vocab_file)
    cats = load_categories(args.categories_file, vocab)
    loaded = load_checkpoint(args.checkpoint, vocab, cats)
    model = loaded.model
    seq = tokenize(args.query, vocab, model.config.l_q)
    logits = model.forward_with_categories(seq, cats)
    probs = probabilities(logits)
    chosen = decide(logits, args.threshold)
    order = np.argsort(-probs, kind="stable")
    print(f"# query: {args.query!r}  threshold: {args.threshold:g}")
    run_cfg = loaded.extra.get("run_config", {})
    if run_cfg:
        pairs = " ".join(f"{k}={run_cfg[k]}" for k in sorted(run_cfg))
        print(f"# run config: {pairs}")
    for rank, cid in enumerate(order, start=1):
        mark = "*" if chosen[cid] else " "
        print(f"{rank}\t{cid}\t{cats[int(cid)].name}\t{probs[cid]:.6f}\t{mark}")
    return 0


_HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DataFormatError, VocabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
