"""Task-specific inference (anomaly verdicts, failure probabilities, greedy
summaries) and the evaluation metrics.

All operations are read-only over a frozen checkpoint.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import torch

from .model import TaskKind
from .tokenizer import EOS_ID, PAD_ID
from .training import Checkpoint, _pad_batch, _shift_right, span_mask

DEFAULT_ANOMALY_THRESHOLD = 1e-3
EVAL_SEED = 20240601
# Anomaly scores average this many deterministic mask draws so short anomalous
# regions cannot dodge the masks of a single draw.
N_EVAL_MASK_DRAWS = 4


@dataclass(frozen=True)
class AnomalyVerdict:
    score: float
    threshold: float
    label: str  # "normal" | "anomalous"


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def detect_anomaly(ckpt: Checkpoint, ids: list[int],
                   threshold: float = DEFAULT_ANOMALY_THRESHOLD,
                   eval_seed: int = EVAL_SEED) -> AnomalyVerdict:
    """Span-mask the sequence with a fixed evaluation seed and compare the
    embedding-space reconstruction loss to the threshold. Dropout disabled."""
    if not ids:
        raise ValueError("cannot score an empty sequence")
    score = anomaly_score(ckpt, ids, eval_seed=eval_seed)
    label = "anomalous" if score > threshold else "normal"
    return AnomalyVerdict(score=score, threshold=threshold, label=label)


def anomaly_score(ckpt: Checkpoint, ids: list[int],
                  eval_seed: int = EVAL_SEED) -> float:
    model = ckpt.model
    task = TaskKind.anomaly
    ids = list(ids)[: ckpt.config.max_len - 1]
    losses = []
    with torch.no_grad():
        for draw in range(N_EVAL_MASK_DRAWS):
            rng = random.Random(eval_seed + draw)
            ex = span_mask(ids, rng=rng)
            enc = _pad_batch([[task.prefix_id] + ex.input_ids])
            tgt = _pad_batch([ex.target_ids])
            mask = torch.zeros_like(tgt, dtype=torch.bool)
            mask[0, ex.mask_positions] = True
            out = model(enc, _shift_right(tgt), task=task, targets=tgt,
                        mask_positions=mask)
            losses.append(float(out.loss))
    return sum(losses) / len(losses)


def predict_failure(ckpt: Checkpoint, ids: list[int]) -> float:
    """Failure-class probability from the 2-way softmax over the failure head."""
    task = TaskKind.failure
    enc = _pad_batch([[task.prefix_id] + list(ids)[: ckpt.config.max_len - 1]])
    dec = torch.full((1, 1), PAD_ID, dtype=torch.long)
    with torch.no_grad():
        out = ckpt.model(enc, dec, task=task)
        probs = torch.softmax(out.head_output[0], dim=-1)
    return float(probs[1])


def summarize(ckpt: Checkpoint, ids: list[int], max_out: int = 16) -> list[int]:
    """Greedy autoregressive decoding, stopping at EOS or max_out tokens."""
    task = TaskKind.summarization
    enc = _pad_batch([[task.prefix_id] + list(ids)[: ckpt.config.max_len - 1]])
    decoded: list[int] = []
    with torch.no_grad():
        for _ in range(max_out):
            dec = torch.tensor([[PAD_ID] + decoded], dtype=torch.long)
            out = ckpt.model(enc, dec, task=task)
            nxt = int(out.logits[0, -1].argmax())
            if nxt == EOS_ID:
                break
            decoded.append(nxt)
    return decoded


def precision_recall_f1(predicted: list, truth: list,
                        positive=None) -> MetricsReport:
    """Counts over the positive class; 0/0 conventions resolve to 0.

    The positive class defaults to the conventional anomalous/failure/1 labels.
    """
    if len(predicted) != len(truth):
        raise ValueError("predicted and truth must have equal length")

    def is_pos(x):
        if positive is not None:
            return x == positive
        return str(x).strip().lower() in ("1", "true", "anomalous", "anomaly",
                                          "failure", "abnormal", "positive")

    tp = sum(1 for p, t in zip(predicted, truth) if is_pos(p) and is_pos(t))
    fp = sum(1 for p, t in zip(predicted, truth) if is_pos(p) and not is_pos(t))
    fn = sum(1 for p, t in zip(predicted, truth) if not is_pos(p) and is_pos(t))
    return metrics_from_counts(tp, fp, fn)


def metrics_from_counts(tp: int, fp: int, fn: int) -> MetricsReport:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = f1_from(precision, recall)
    return MetricsReport(precision=precision, recall=recall, f1=f1,
                         tp=tp, fp=fp, fn=fn)


def f1_from(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def token_f1(predicted_tokens: list, truth_tokens: list) -> MetricsReport:
    """Bag-of-tokens precision/recall/F1 for summaries."""
    pred = list(predicted_tokens)
    tp = 0
    pool = list(truth_tokens)
    for t in pred:
        if t in pool:
            pool.remove(t)
            tp += 1
    return metrics_from_counts(tp, fp=len(pred) - tp, fn=len(pool))


def compression_rate(compressed_bytes: int, original_bytes: int) -> float:
    """size of compressed logs / size of original logs."""
    if original_bytes <= 0:
        raise ValueError("original size must be positive")
    return compressed_bytes / original_bytes


def calibrate_threshold(normal_scores: list[float],
                        anomalous_scores: list[float]) -> float:
    """Threshold maximizing F1 on a labeled calibration split.

    The fixed 1e-3 default presumes full-scale training; at desk scale the
    decision boundary is calibrated on held-out validation data instead.
    """
    if not normal_scores or not anomalous_scores:
        raise ValueError("calibration needs scores from both classes")
    candidates = sorted(set(normal_scores) | set(anomalous_scores))
    best_i, best_f1 = 0, -1.0
    for i, t in enumerate(candidates):
        tp = sum(1 for s in anomalous_scores if s > t)
        fp = sum(1 for s in normal_scores if s > t)
        fn = len(anomalous_scores) - tp
        f1 = metrics_from_counts(tp, fp, fn).f1
        if f1 > best_f1:
            best_f1, best_i = f1, i
    # The decision boundary sits mid-gap between the optimal cut point and the
    # next observed score, rather than on a calibration data point.
    if best_i + 1 < len(candidates):
        return (candidates[best_i] + candidates[best_i + 1]) / 2.0
    return candidates[best_i]
