"""Single `unilog` binary exposing the full pipeline: data preparation,
pretraining, finetuning, and the four task commands.

Exit codes: 0 success, 1 usage error, 2 data/model error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import report
from .coder import CodingError
from .ingest import (DataError, SyntheticCorpusSpec, generate_synthetic_corpus,
                     load_labels, load_log_lines, window_logs)
from .model import ModelConfig, TaskKind
from .tokenizer import (UnigramTable, Vocabulary, VocabularyError, build_vocab,
                        default_table, tokenize)
from .training import (Checkpoint, CheckpointError, TrainConfig, finetune,
                       load_checkpoint, pretrain)

DATA_DIR_ENV = "UNILOG_DATA_DIR"

OBJECTIVE_NAMES = {"unilog": "unilog_span", "bert": "bert_style",
                   "prefix": "prefix_lm"}


def _resolve(path: str) -> str:
    if os.path.exists(path):
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root:
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _table(args) -> UnigramTable:
    if getattr(args, "unigram_table", None):
        return UnigramTable.load(_resolve(args.unigram_table))
    return default_table()


def _load_vocab(args) -> Vocabulary:
    return Vocabulary.load(_resolve(args.vocab))


def _load_ckpt(args) -> Checkpoint:
    return load_checkpoint(_resolve(args.ckpt))


def _check_vocab_hash(ckpt: Checkpoint, vocab: Vocabulary) -> None:
    if ckpt.vocab_hash not in (b"\x00" * 32, vocab.content_hash()):
        raise CheckpointError("checkpoint was trained with a different vocabulary")


def _dataset_sources(args):
    """(name, path) per --data flag, honoring --exclude-dataset."""
    excluded = set(getattr(args, "exclude_dataset", None) or [])
    out = []
    for spec in args.data:
        name, _, path = spec.partition("=")
        if not path:
            name, path = os.path.splitext(os.path.basename(spec))[0], spec
        if name in excluded:
            continue
        out.append((name, _resolve(path)))
    if not out:
        raise DataError("all datasets excluded; nothing to train on")
    return out


def _window_token_ids(records, table, vocab, window, stride):
    windows = window_logs(records, window=window, stride=stride)
    ids = [sum((vocab.encode(tokenize(r.raw_text, table)) for r in w.records), [])
           for w in windows]
    return windows, ids


def _train_config(args, steps_attr: str) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, lr=args.lr, seed=args.seed,
        pretrain_steps=max(1, args.steps) if steps_attr == "pretrain_steps" else 1,
        finetune_steps=args.steps if steps_attr == "finetune_steps" else 1,
        dtype=args.dtype, use_dropout=not args.no_dropout)


def _deterministic(args) -> None:
    if args.deterministic:
        import torch
        torch.manual_seed(args.seed)
        torch.set_num_threads(1)


# ---- subcommands ----

def cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec(n_templates=args.templates, n_lines=args.lines,
                               anomaly_rate=args.anomaly_rate, rng_seed=args.seed)
    records, labels, summaries = generate_synthetic_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "logs.txt"), "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(r.raw_text + "\n")
    with open(os.path.join(args.out, "labels.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        for k in sorted(labels, key=int):
            w.writerow([k, labels[k]])
    with open(os.path.join(args.out, "summaries.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        for k in sorted(summaries, key=int):
            w.writerow([k, " ".join(summaries[k])])
    print(f"wrote {len(records)} lines to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    table = _table(args)
    corpus = []
    for _, path in _dataset_sources(args):
        for rec in load_log_lines(path, source_id=path):
            corpus.append(tokenize(rec.raw_text, table))
    vocab = build_vocab(corpus, min_count=args.min_count)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens written to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    _deterministic(args)
    table = _table(args)
    vocab = _load_vocab(args)
    corpus = []
    names = []
    for name, path in _dataset_sources(args):
        names.append(name)
        for rec in load_log_lines(path, source_id=name):
            ids = vocab.encode(tokenize(rec.raw_text, table))
            if ids:
                corpus.append(ids)
    model_cfg = ModelConfig(
        vocab_size=len(vocab), n_blocks=args.n_blocks, n_heads=args.n_heads,
        d_head=args.d_head, d_model=args.d_model, d_ffn=args.d_ffn,
        dropout=args.dropout, max_len=args.max_len)
    cfg = _train_config(args, "pretrain_steps")
    ckpt = pretrain(corpus, OBJECTIVE_NAMES[args.objective], cfg, model_cfg,
                    provenance={"datasets": ",".join(names),
                                "lr": str(args.lr), "batch_size": str(args.batch_size)},
                    vocab_hash=vocab.content_hash())
    ckpt.save(args.out)
    if args.metrics:
        report.write_metrics_log(ckpt.loss_history, args.metrics)
    if args.figure:
        report.plot_loss_curve(ckpt.loss_history, args.figure, title="pretraining loss")
    print(f"pretrained {args.steps} steps (objective={args.objective}); "
          f"checkpoint written to {args.out}")
    return 0


def _finetune_dataset(args, task, table, vocab):
    records = load_log_lines(_resolve(args.input), source_id="finetune")
    if task is TaskKind.summarization:
        if not args.summaries:
            raise DataError("summarization finetune requires --summaries")
        summaries = {}
        with open(_resolve(args.summaries), newline="", encoding="utf-8") as f:
            for row in csv.reader(f):
                if row:
                    summaries[row[0]] = row[1].split()
        out = []
        for rec in records:
            key = str(rec.line_index)
            if key in summaries:
                out.append((vocab.encode(tokenize(rec.raw_text, table)),
                            vocab.encode(summaries[key])))
        return out
    if task is TaskKind.compression:
        return [ids for ids in (vocab.encode(tokenize(r.raw_text, table))
                                for r in records) if ids]
    if not args.labels:
        raise DataError(f"{task.name} finetune requires --labels")
    labels = load_labels(_resolve(args.labels), scheme=args.label_scheme)
    windows, ids = _window_token_ids(records, table, vocab, args.window, args.stride)
    out = []
    for w, seq in zip(windows, ids):
        anomalous = any(labels.get(str(r.line_index)) == "anomalous" for r in w.records)
        if task is TaskKind.anomaly:
            if not anomalous and seq:
                out.append(seq)
        else:
            if seq:
                out.append((seq, 1 if anomalous else 0))
    return out


def cmd_finetune(args) -> int:
    _deterministic(args)
    task = TaskKind[args.task]
    table = _table(args)
    vocab = _load_vocab(args)
    ckpt = _load_ckpt(args)
    _check_vocab_hash(ckpt, vocab)
    dataset = _finetune_dataset(args, task, table, vocab)
    cfg = _train_config(args, "finetune_steps")
    new = finetune(ckpt, task, dataset, cfg)
    new.save(args.out)
    if args.metrics:
        report.write_metrics_log(new.loss_history, args.metrics)
    if args.figure:
        report.plot_loss_curve(new.loss_history, args.figure,
                               title=f"{task.name} finetuning loss")
    print(f"finetuned {task.name} for {args.steps} steps; written to {args.out}")
    return 0


def cmd_detect(args) -> int:
    from .tasks import detect_anomaly
    table, vocab, ckpt = _table(args), _load_vocab(args), _load_ckpt(args)
    _check_vocab_hash(ckpt, vocab)
    records = load_log_lines(_resolve(args.input), source_id="detect")
    windows, ids = _window_token_ids(records, table, vocab, args.window, args.stride)
    rows = []
    for w, seq in zip(windows, ids):
        v = detect_anomaly(ckpt, seq or [vocab.token_to_id["<unk>"]],
                           threshold=args.threshold)
        rows.append((w.records[0].line_index, v.score, v.label))
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    for start, score, label in rows:
        out.write(f"{start}\t{score:.6g}\t{label}\n")
    if args.out:
        out.close()
    n_anom = sum(1 for r in rows if r[2] == "anomalous")
    print(f"{n_anom}/{len(rows)} windows anomalous at threshold {args.threshold:g}")
    return 0


def cmd_predict(args) -> int:
    from .tasks import predict_failure
    table, vocab, ckpt = _table(args), _load_vocab(args), _load_ckpt(args)
    _check_vocab_hash(ckpt, vocab)
    records = load_log_lines(_resolve(args.input), source_id="predict")
    windows, ids = _window_token_ids(records, table, vocab, args.window, args.stride)
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    for w, seq in zip(windows, ids):
        p = predict_failure(ckpt, seq or [vocab.token_to_id["<unk>"]])
        label = "failure" if p >= 0.5 else "no_failure"
        out.write(f"{w.records[0].line_index}\t{p:.6f}\t{label}\n")
    if args.out:
        out.close()
    return 0


def cmd_summarize(args) -> int:
    from .tasks import summarize
    table, vocab, ckpt = _table(args), _load_vocab(args), _load_ckpt(args)
    _check_vocab_hash(ckpt, vocab)
    records = load_log_lines(_resolve(args.input), source_id="summarize")
    out = open(args.out, "w", encoding="utf-8", newline="\n") if args.out else sys.stdout
    for rec in records:
        ids = vocab.encode(tokenize(rec.raw_text, table))
        decoded = summarize(ckpt, ids, max_out=args.max_out)
        out.write(" ".join(vocab.decode(decoded)) + "\n")
    if args.out:
        out.close()
    return 0


def cmd_compress(args) -> int:
    from .compression import compress_file
    from .tasks import compression_rate
    table, vocab, ckpt = _table(args), _load_vocab(args), _load_ckpt(args)
    _check_vocab_hash(ckpt, vocab)
    stats = compress_file(ckpt, vocab, _resolve(args.input), args.out, table=table)
    rate = compression_rate(stats["compressed_bytes"], stats["original_bytes"])
    print(f"{stats['original_bytes']} -> {stats['compressed_bytes']} bytes "
          f"({stats['n_tokens']} tokens, {stats['payload_bits']} payload bits); "
          f"compression rate {100 * rate:.1f}%")
    return 0


def cmd_decompress(args) -> int:
    from .compression import decompress_file
    vocab, ckpt = _load_vocab(args), _load_ckpt(args)
    n = decompress_file(ckpt, vocab, _resolve(args.input), args.out)
    print(f"restored {n} bytes to {args.out}")
    return 0


def _read_label_csv(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if row and len(row) >= 2:
                out[row[0].strip()] = row[1].strip()
    return out


def cmd_eval(args) -> int:
    from .tasks import precision_recall_f1
    pred = _read_label_csv(_resolve(args.pred))
    truth = _read_label_csv(_resolve(args.truth))
    keys = sorted(truth)
    missing = [k for k in keys if k not in pred]
    if missing:
        raise DataError(f"predictions missing for {len(missing)} keys (e.g. {missing[0]!r})")
    m = precision_recall_f1([pred[k] for k in keys], [truth[k] for k in keys])
    values = {"task": args.task, "precision": f"{m.precision:.4f}",
              "recall": f"{m.recall:.4f}", "f1": f"{m.f1:.4f}",
              "tp": m.tp, "fp": m.fp, "fn": m.fn}
    for k, v in values.items():
        print(f"{k}\t{v}")
    if args.report:
        report.write_report(values, args.report)
    if args.figure:
        report.plot_metric_bars({"precision": m.precision, "recall": m.recall,
                                 "f1": m.f1}, args.figure,
                                title=f"{args.task} evaluation")
    return 0


# ---- parser ----

def _add_common(p, vocab=True, ckpt=True):
    if vocab:
        p.add_argument("--vocab", required=True, help="vocabulary file")
    if ckpt:
        p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--unigram-table", default=None,
                   help="override the embedded segmentation word list")
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=True, help="single-threaded deterministic mode")


def _add_train_flags(p):
    p.add_argument("--batch-size", type=int, default=128, help="examples per step")
    p.add_argument("--lr", type=float, default=5e-4, help="initial learning rate")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="training precision")
    p.add_argument("--no-dropout", action="store_true", help="disable dropout")
    p.add_argument("--metrics", default=None, help="write step/loss/lr TSV here")
    p.add_argument("--figure", default=None, help="render the loss curve here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unilog",
        description="Unified log analysis: pretrain one model, specialize it "
                    "for anomaly detection, failure prediction, summarization, "
                    "and lossless compression.")
    parser.add_argument("--config", default=None,
                        help="key=value defaults file (flags take precedence)")
    sub = parser.add_subparsers(dest="command", required=True)

    def _sub(name, **kw):
        return sub.add_parser(
            name, formatter_class=argparse.ArgumentDefaultsHelpFormatter, **kw)

    p = _sub("synth", help="generate a seeded synthetic log corpus")
    p.add_argument("--templates", type=int, default=10)
    p.add_argument("--lines", type=int, default=1000)
    p.add_argument("--anomaly-rate", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = _sub("prepare", help="build a vocabulary from raw logs")
    p.add_argument("--data", action="append", required=True,
                   help="log file (repeatable; NAME=PATH to name a dataset)")
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--unigram-table", default=None)
    p.add_argument("--exclude-dataset", action="append", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = _sub("pretrain", help="pretrain on unlabeled logs")
    p.add_argument("--data", action="append", required=True,
                   help="log file (repeatable; NAME=PATH to name a dataset)")
    p.add_argument("--exclude-dataset", action="append", default=None,
                   help="leave one dataset out of pretraining")
    p.add_argument("--objective", choices=("unilog", "bert", "prefix"),
                   default="unilog", help="pretraining objective")
    p.add_argument("--steps", type=int, default=2048,
                   help="optimizer steps (full scale: 65536)")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-blocks", type=int, default=3)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-head", type=int, default=32)
    p.add_argument("--d-ffn", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.3)
    p.add_argument("--max-len", type=int, default=180)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p, ckpt=False)
    p.set_defaults(func=cmd_pretrain)

    p = _sub("finetune", help="specialize a pretrained checkpoint")
    p.add_argument("--task", choices=[t.name for t in TaskKind], required=True)
    p.add_argument("--input", required=True, help="log file")
    p.add_argument("--labels", default=None, help="key,label CSV")
    p.add_argument("--label-scheme", choices=("per_line", "per_block"),
                   default="per_line")
    p.add_argument("--summaries", default=None, help="key,summary CSV")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=20)
    p.add_argument("--steps", type=int, default=2048)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = _sub("detect", help="anomaly verdicts per window")
    p.add_argument("--input", required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=20)
    p.add_argument("--threshold", type=float, default=1e-3,
                   help="reconstruction-loss decision threshold")
    p.add_argument("--out", default=None, help="verdict TSV (default stdout)")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = _sub("predict", help="failure probability per window")
    p.add_argument("--input", required=True)
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--stride", type=int, default=20)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = _sub("summarize", help="summarize each log line")
    p.add_argument("--input", required=True)
    p.add_argument("--max-out", type=int, default=16)
    p.add_argument("--out", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_summarize)

    p = _sub("compress", help="losslessly compress a log file")
    p.add_argument("input", help="log file")
    p.add_argument("-o", "--out", required=True, help="output .ulzc blob")
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = _sub("decompress", help="restore a compressed log file")
    p.add_argument("input", help=".ulzc blob")
    p.add_argument("-o", "--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_decompress)

    p = _sub("eval", help="precision/recall/F1 from label CSVs")
    p.add_argument("--task", choices=[t.name for t in TaskKind], required=True)
    p.add_argument("--pred", required=True, help="key,label CSV of predictions")
    p.add_argument("--truth", required=True, help="key,label CSV of ground truth")
    p.add_argument("--report", default=None, help="key-value report file")
    p.add_argument("--figure", default=None, help="render metric bars here")
    p.set_defaults(func=cmd_eval)

    return parser


def _apply_config_file(parser, argv):
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    defaults = {}
    with open(_resolve(path), encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                defaults[k.strip().replace("-", "_")] = v.strip()
    for action_parser in parser._subparsers._group_actions[0].choices.values():
        known = {a.dest: a for a in action_parser._actions}
        for k, v in defaults.items():
            if k in known and known[k].default is not None or k in known:
                a = known.get(k)
                if a is not None:
                    action_parser.set_defaults(**{k: a.type(v) if a.type else v})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (DataError, CheckpointError, VocabularyError, CodingError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
