"""Unified log analysis: one pretrained transformer specialized for anomaly
detection, failure prediction, summarization, and lossless compression."""

from .coder import (ArithmeticDecoder, ArithmeticEncoder, CodingError,
                    QuantizedPmf, ac_decode, ac_encode, quantize_pmf)
from .compression import BlobError, compress_file, decompress_file
from .ingest import (DataError, LogRecord, SyntheticCorpusSpec,
                     generate_synthetic_corpus, load_labels, load_log_lines,
                     window_logs)
from .model import ModelConfig, TaskKind, UniLogModel
from .tasks import (calibrate_threshold, detect_anomaly, precision_recall_f1,
                    predict_failure, summarize)
from .tokenizer import (UnigramTable, Vocabulary, VocabularyError, build_vocab,
                        default_table, normalize, segment_unigram, tokenize)
from .training import (Checkpoint, CheckpointError, TrainConfig, bert_mask,
                       finetune, load_checkpoint, prefix_lm_example, pretrain,
                       span_mask)

__version__ = "0.1.0"

__all__ = [
    "ArithmeticDecoder", "ArithmeticEncoder", "BlobError", "Checkpoint",
    "CheckpointError", "CodingError", "DataError", "LogRecord", "ModelConfig",
    "QuantizedPmf", "SyntheticCorpusSpec", "TaskKind", "TrainConfig",
    "UniLogModel", "UnigramTable", "Vocabulary", "VocabularyError",
    "ac_decode", "ac_encode", "bert_mask", "build_vocab",
    "calibrate_threshold", "compress_file", "decompress_file",
    "default_table", "detect_anomaly", "finetune",
    "generate_synthetic_corpus", "load_checkpoint", "load_labels",
    "load_log_lines", "normalize", "precision_recall_f1", "predict_failure",
    "prefix_lm_example", "pretrain", "quantize_pmf", "segment_unigram",
    "span_mask", "summarize", "tokenize", "window_logs",
]
