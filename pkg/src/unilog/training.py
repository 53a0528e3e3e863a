"""Pretraining objectives (consecutive-span masking plus baselines), the
optimization loop, and the checkpoint lifecycle.

Masking operates on plain id lists with a caller-supplied random.Random so
objectives are testable in isolation. The train loop is single-writer over the
weights and bit-deterministic for a fixed seed on one platform.
"""

from __future__ import annotations

import copy
import hashlib
import io
import math
import random
import struct
import zlib
from dataclasses import dataclass, field

import torch

from .model import ModelConfig, TaskKind, UniLogModel, reconstruction_l2
from .tokenizer import EOS_ID, PAD_ID, Vocabulary, sentinel_id

OBJECTIVES = ("unilog_span", "bert_style", "prefix_lm")

CKPT_MAGIC = b"ULOG"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class MaskedExample:
    input_ids: list[int]
    target_ids: list[int]
    mask_positions: list[int]


def bert_mask(ids: list[int], rate: float = 0.15, rng: random.Random | None = None,
              random_token_rate: float = 0.0, vocab_size: int = 0) -> MaskedExample:
    """Independent per-position masking at probability `rate`.

    With random_token_rate > 0, that fraction of selected positions is
    corrupted with a random token instead of a sentinel (BERT-style baseline).
    """
    if not ids:
        raise ValueError("cannot mask an empty sequence")
    rng = rng or random.Random()
    inp = list(ids)
    positions = [i for i in range(len(ids)) if rng.random() < rate]
    n_sent = 0
    for i in positions:
        if random_token_rate > 0.0 and rng.random() < random_token_rate:
            inp[i] = rng.randrange(vocab_size)
        else:
            inp[i] = sentinel_id(n_sent)
            n_sent += 1
    return MaskedExample(inp, list(ids), positions)


def span_mask(ids: list[int], budget: float = 0.15,
              rng: random.Random | None = None) -> MaskedExample:
    """Mask disjoint, non-adjacent runs of 2 or 3 consecutive tokens until the
    masked fraction reaches `budget`.

    Anchors are the argmax of one uniform draw per currently unmasked
    position; a span that would overrun the end instead covers the tokens
    preceding the anchor. Sequences shorter than 4 fall back to bert_mask.
    """
    rng = rng or random.Random()
    n = len(ids)
    if n < 4:
        return bert_mask(ids, rate=budget, rng=rng)
    masked: set[int] = set()
    stalled = 0
    while len(masked) / n < budget and stalled < 100:
        candidates = [i for i in range(n) if i not in masked]
        draws = [rng.random() for _ in candidates]
        anchor = candidates[max(range(len(candidates)), key=draws.__getitem__)]
        length = rng.randint(2, 3)
        if anchor + length - 1 >= n:
            span = range(anchor - length + 1, anchor + 1)
        else:
            span = range(anchor, anchor + length)
        # Keep runs at exactly the span length: reject overlap and adjacency.
        lo, hi = span[0], span[-1]
        if lo < 0 or any(p in masked for p in range(lo - 1, hi + 2)):
            stalled += 1
            continue
        masked.update(span)
        stalled = 0
    positions = sorted(masked)
    inp = list(ids)
    for k, i in enumerate(positions):
        inp[i] = sentinel_id(k)
    return MaskedExample(inp, list(ids), positions)


def prefix_lm_example(ids: list[int], split: float = 0.5) -> tuple[list[int], list[int]]:
    """Deterministic prefix/suffix split at ceil(split * len)."""
    if len(ids) < 2:
        raise ValueError("prefix split needs at least 2 tokens")
    k = min(math.ceil(split * len(ids)), len(ids) - 1)
    return list(ids[:k]), list(ids[k:])


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 5e-4
    pretrain_steps: int = 2048
    finetune_steps: int = 2048
    seed: int = 42
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # lr decays exponentially to lr * decay_floor over the step budget.
    decay_floor: float = 0.01
    dtype: str = "float32"
    # Training dropout uses the model config's rate when True.
    use_dropout: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.pretrain_steps < 1 or self.finetune_steps < 0:
            raise ValueError("lr must be positive and step budgets non-negative")

    def lr_at(self, step: int, total_steps: int) -> float:
        gamma = self.decay_floor ** (1.0 / total_steps)
        return self.lr * gamma ** step


@dataclass
class Checkpoint:
    model: UniLogModel
    config: ModelConfig
    vocab_hash: bytes
    provenance: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)  # (step, loss, lr)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<H", CKPT_VERSION))
        meta = dict(self.config.to_dict())
        for k in sorted(self.provenance):
            meta[f"prov.{k}"] = self.provenance[k]
        blob = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        buf.write(self.vocab_hash)
        state = self.model.state_dict()
        buf.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            nb = name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<B", tensor.dim()))
            for d in tensor.shape:
                buf.write(struct.pack("<I", d))
            buf.write(tensor.detach().to(torch.float64).numpy().tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body))

    def content_hash(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    def clone(self) -> "Checkpoint":
        return Checkpoint(
            model=copy.deepcopy(self.model), config=self.config,
            vocab_hash=self.vocab_hash, provenance=dict(self.provenance),
            loss_history=list(self.loss_history))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    return checkpoint_from_bytes(data, origin=str(path))


def checkpoint_from_bytes(data: bytes, origin: str = "<bytes>") -> Checkpoint:
    if len(data) < 14 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{origin}: not a ULOG checkpoint")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise CheckpointError(f"{origin}: checksum mismatch")
    buf = io.BytesIO(data[:-4])
    buf.seek(4)
    (version,) = struct.unpack("<H", buf.read(2))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{origin}: unsupported version {version}")
    (blob_len,) = struct.unpack("<I", buf.read(4))
    meta: dict[str, str] = {}
    for line in buf.read(blob_len).decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    vocab_hash = buf.read(32)
    cfg = ModelConfig(
        vocab_size=int(meta["vocab_size"]), n_blocks=int(meta["n_blocks"]),
        n_heads=int(meta["n_heads"]), d_head=int(meta["d_head"]),
        d_model=int(meta["d_model"]), d_ffn=int(meta["d_ffn"]),
        dropout=float(meta["dropout"]), max_len=int(meta["max_len"]),
        n_rel_buckets=int(meta["n_rel_buckets"]))
    provenance = {k[5:]: v for k, v in meta.items() if k.startswith("prov.")}
    model = UniLogModel(cfg)
    (n_tensors,) = struct.unpack("<I", buf.read(4))
    state = model.state_dict()
    loaded = {}
    import numpy as np
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape)
        if name not in state:
            raise CheckpointError(f"{origin}: unexpected tensor {name!r}")
        loaded[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
    if set(loaded) != set(state):
        raise CheckpointError(f"{origin}: missing tensors")
    model.load_state_dict(loaded)
    return Checkpoint(model=model, config=cfg, vocab_hash=vocab_hash,
                      provenance=provenance)


def _pad_batch(seqs: list[list[int]]) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    return torch.tensor([s + [PAD_ID] * (width - len(s)) for s in seqs], dtype=torch.long)


def _shift_right(targets: torch.Tensor) -> torch.Tensor:
    dec = torch.full_like(targets, PAD_ID)
    dec[:, 1:] = targets[:, :-1]
    return dec


def _make_pretrain_batch(seqs, objective, rng, max_len):
    enc_in, targets, mask_pos = [], [], []
    for ids in seqs:
        ids = ids[:max_len]
        if objective == "unilog_span":
            ex = span_mask(ids, rng=rng)
        elif objective == "bert_style":
            ex = bert_mask(ids, rng=rng)
        elif objective == "prefix_lm":
            if len(ids) < 2:
                ids = ids + [EOS_ID]
            prefix, suffix = prefix_lm_example(ids)
            enc_in.append(prefix)
            targets.append(suffix)
            mask_pos.append([])
            continue
        else:
            raise ValueError(f"unknown objective {objective!r}")
        enc_in.append(ex.input_ids)
        targets.append(ex.target_ids)
        mask_pos.append(ex.mask_positions)
    return enc_in, targets, mask_pos


def _run_steps(model, make_batch, cfg: TrainConfig, n_steps: int, label: str,
               metrics_sink=None):
    """Shared optimizer loop; make_batch(step) returns (loss_tensor_fn)."""
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                            eps=cfg.eps, weight_decay=cfg.weight_decay)
    history = []
    for step in range(n_steps):
        lr = cfg.lr_at(step, n_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad()
        loss = make_batch(step)
        loss.backward()
        opt.step()
        history.append((step, float(loss.detach()), lr))
        if metrics_sink is not None:
            metrics_sink(step, float(loss.detach()), lr)
    return history


def pretrain(corpus: list[list[int]], objective: str, cfg: TrainConfig,
             model_cfg: ModelConfig, metrics_sink=None,
             provenance: dict | None = None,
             vocab_hash: bytes = b"\x00" * 32) -> Checkpoint:
    """Train a fresh model to reconstruct corrupted log sequences.

    corpus: tokenized sequences (vocabulary ids, no task prefix).
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    corpus = [ids for ids in corpus if ids]
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    torch.manual_seed(cfg.seed)
    model = UniLogModel(model_cfg).to(_torch_dtype(cfg.dtype))
    rng = random.Random(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed) if cfg.use_dropout else None

    def step_fn(step):
        seqs = [corpus[rng.randrange(len(corpus))] for _ in range(cfg.batch_size)]
        enc_in, targets, _ = _make_pretrain_batch(seqs, objective, rng, model_cfg.max_len)
        enc = _pad_batch(enc_in)
        tgt = _pad_batch(targets)
        return model(enc, _shift_right(tgt), task=None, targets=tgt, g=g).loss

    history = _run_steps(model, step_fn, cfg, cfg.pretrain_steps, "pretrain",
                         metrics_sink)
    prov = dict(provenance or {})
    prov.setdefault("objective", objective)
    prov.setdefault("seed", str(cfg.seed))
    prov.setdefault("pretrain_steps", str(cfg.pretrain_steps))
    return Checkpoint(model=model, config=model_cfg, vocab_hash=vocab_hash,
                      provenance=prov, loss_history=history)


def finetune(ckpt: Checkpoint, task: TaskKind, dataset, cfg: TrainConfig,
             metrics_sink=None) -> Checkpoint:
    """Continue training all transformer parameters plus the selected task
    head; the other heads stay bit-identical.

    dataset by task:
      anomaly       list of id sequences (normal traffic)
      failure       list of (id sequence, 0/1 label)
      summarization list of (id sequence, summary id sequence)
      compression   list of id sequences
    """
    if not isinstance(task, TaskKind):
        raise ValueError(f"unknown task {task!r}")
    if not dataset:
        raise ValueError("finetune dataset is empty")
    new = ckpt.clone()
    model = new.model.to(_torch_dtype(cfg.dtype))
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed) if cfg.use_dropout else None
    max_len = new.config.max_len
    frozen = {name: p.detach().clone() for name, p in model.named_parameters()
              if name.startswith("heads.") and not name.startswith(f"heads.{task.name}.")}

    def step_fn(step):
        batch = [dataset[rng.randrange(len(dataset))] for _ in range(cfg.batch_size)]
        return _task_loss(model, task, batch, rng, g, max_len)

    if cfg.finetune_steps > 0:
        history = _run_steps(model, step_fn, cfg, cfg.finetune_steps, task.name,
                             metrics_sink)
        new.loss_history = history
    # Optimizer weight decay must not touch unselected heads.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name in frozen:
                p.copy_(frozen[name])
    new.provenance["finetuned_task"] = task.name
    new.provenance["finetune_steps"] = str(cfg.finetune_steps)
    return new


def _task_loss(model, task, batch, rng, g, max_len):
    if task is TaskKind.anomaly:
        enc_in, targets, masks = [], [], []
        for ids in batch:
            ids = list(ids)[: max_len - 1]
            ex = span_mask(ids, rng=rng)
            enc_in.append([task.prefix_id] + ex.input_ids)
            targets.append(ex.target_ids)
            masks.append(ex.mask_positions)
        enc = _pad_batch(enc_in)
        tgt = _pad_batch(targets)
        mask = torch.zeros_like(tgt, dtype=torch.bool)
        for b, pos in enumerate(masks):
            mask[b, pos] = True
        return model(enc, _shift_right(tgt), task=task, targets=tgt,
                     mask_positions=mask, g=g).loss
    if task is TaskKind.failure:
        enc_in = [[task.prefix_id] + list(ids)[: max_len - 1] for ids, _ in batch]
        labels = torch.tensor([int(lbl) for _, lbl in batch], dtype=torch.long)
        enc = _pad_batch(enc_in)
        dec = torch.full((enc.shape[0], 1), PAD_ID, dtype=torch.long)
        return model(enc, dec, task=task, targets=labels, g=g).loss
    if task is TaskKind.summarization:
        enc_in = [[task.prefix_id] + list(ids)[: max_len - 1] for ids, _ in batch]
        tgt = _pad_batch([list(summary) + [EOS_ID] for _, summary in batch])
        return model(_pad_batch(enc_in), _shift_right(tgt), task=task,
                     targets=tgt, g=g).loss
    if task is TaskKind.compression:
        # Causal LM objective: the encoder sees only the prefix token so the
        # finetuned decoder matches how the compressor queries it.
        enc = _pad_batch([[task.prefix_id]] * len(batch))
        tgt = _pad_batch([list(ids)[: max_len - 1] + [EOS_ID] for ids in batch])
        return model(enc, _shift_right(tgt), task=task, targets=tgt, g=g).loss
    raise ValueError(f"unknown task {task!r}")


def _torch_dtype(name: str) -> torch.dtype:
    try:
        return {"float32": torch.float32, "float64": torch.float64}[name]
    except KeyError:
        raise ValueError(f"unsupported dtype {name!r}")
