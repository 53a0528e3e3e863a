"""Encoder-decoder transformer with Pre-LN blocks, LogAct feed-forward
activation, a single bucketed relative-position bias table shared across all
layers, tied input/output embeddings, and four task-aware heads.

Dropout is only active when the caller supplies a torch.Generator, so frozen
checkpoints are safe for concurrent inference.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .tokenizer import PAD_ID, TASK_PREFIX_BASE, TASK_PREFIX_TOKENS

LN_EPS = 1e-6


class TaskKind(enum.Enum):
    anomaly = "<anomaly>"
    failure = "<failure>"
    summarization = "<summarization>"
    compression = "<compression>"

    @property
    def prefix_token(self) -> str:
        return self.value

    @property
    def prefix_id(self) -> int:
        return TASK_PREFIX_BASE + TASK_PREFIX_TOKENS.index(self.value)


@dataclass
class ModelConfig:
    vocab_size: int
    n_blocks: int = 3
    n_heads: int = 4
    d_head: int = 32
    d_model: int = 128
    d_ffn: int = 512
    dropout: float = 0.3
    max_len: int = 180
    n_rel_buckets: int = 32

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError("n_heads * d_head must equal d_model")
        if min(self.vocab_size, self.n_blocks, self.d_model, self.d_ffn, self.max_len) < 1:
            raise ValueError("all dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "n_blocks", "n_heads", "d_head", "d_model",
            "d_ffn", "dropout", "max_len", "n_rel_buckets")}


def swish(x: torch.Tensor, beta) -> torch.Tensor:
    """x * sigmoid(beta * x)."""
    return x * torch.sigmoid(beta * x)


def glu(x, W, V, b, c) -> torch.Tensor:
    """sigmoid(xW + b) * (xV + c)."""
    return torch.sigmoid(x @ W + b) * (x @ V + c)


def logact(x, W, V, b, c, beta) -> torch.Tensor:
    """Swish-gated linear unit: swish(xW + b, beta) * (xV + c)."""
    return swish(x @ W + b, beta) * (x @ V + c)


def _dropout(x: torch.Tensor, p: float, g: torch.Generator | None) -> torch.Tensor:
    if g is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=g, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def relative_bucket(relative_position: torch.Tensor, bidirectional: bool,
                    num_buckets: int, max_distance: int) -> torch.Tensor:
    """Map signed relative positions (key - query) to bias-table buckets.

    Near offsets get exact buckets; farther ones share log-spaced buckets.
    """
    rel = relative_position
    ret = torch.zeros_like(rel)
    if bidirectional:
        num_buckets //= 2
        ret = ret + (rel > 0).long() * num_buckets
        rel = rel.abs()
    else:
        rel = -torch.minimum(rel, torch.zeros_like(rel))
    max_exact = num_buckets // 2
    is_small = rel < max_exact
    large = max_exact + (
        torch.log(rel.float().clamp(min=1) / max_exact)
        / math.log(max_distance / max_exact) * (num_buckets - max_exact)
    ).long()
    large = torch.minimum(large, torch.full_like(large, num_buckets - 1))
    return ret + torch.where(is_small, rel, large)


def attention(q_in, k_in, v_in, rel_bias=None, causal=False, key_mask=None,
              dropout_p=0.0, g=None):
    """Scaled dot-product attention over per-head projections.

    q_in/k_in/v_in: (B, H, L, d_head). rel_bias: (H, Lq, Lk) added to the
    pre-softmax scores. key_mask: (B, Lk) bool, True = attendable.
    """
    d = q_in.shape[-1]
    scores = q_in @ k_in.transpose(-1, -2) / math.sqrt(d)
    if rel_bias is not None:
        scores = scores + rel_bias.unsqueeze(0)
    if causal:
        lq, lk = scores.shape[-2:]
        mask = torch.ones(lq, lk, dtype=torch.bool).tril()
        scores = scores.masked_fill(~mask, float("-inf"))
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    weights = _dropout(weights, dropout_p, g)
    return weights @ v_in


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.cfg.n_heads, self.cfg.d_head).transpose(1, 2)

    def forward(self, q, kv, rel_bias=None, causal=False, key_mask=None, g=None):
        if q.shape[1] > self.cfg.max_len or kv.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence longer than max_len {self.cfg.max_len}")
        out = attention(
            self._split(self.wq(q)), self._split(self.wk(kv)), self._split(self.wv(kv)),
            rel_bias=rel_bias, causal=causal, key_mask=key_mask,
            dropout_p=self.cfg.dropout, g=g)
        b, _, l, _ = out.shape
        return self.wo(out.transpose(1, 2).reshape(b, l, self.cfg.d_model))


class LogActFFN(nn.Module):
    """FFN whose activation is LogAct; beta is a learnable scalar per layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.w = nn.Linear(cfg.d_model, cfg.d_ffn)   # weight W, bias b
        self.v = nn.Linear(cfg.d_model, cfg.d_ffn)   # weight V, bias c
        self.beta = nn.Parameter(torch.tensor(1.0))
        self.out = nn.Linear(cfg.d_ffn, cfg.d_model)
        self.p = cfg.dropout

    def forward(self, x, g=None):
        h = logact(x, self.w.weight.t(), self.v.weight.t(),
                   self.w.bias, self.v.bias, self.beta)
        return self.out(_dropout(h, self.p, g))


class Block(nn.Module):
    """Pre-LN transformer block: x + Attn(LN(x)), then y + FFN(LN(y)).

    Decoder blocks insert a cross-attention sublayer between the two.
    """

    def __init__(self, cfg: ModelConfig, is_decoder: bool):
        super().__init__()
        self.p = cfg.dropout
        self.ln_attn = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.attn = MultiHeadAttention(cfg)
        self.is_decoder = is_decoder
        if is_decoder:
            self.ln_cross = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
            self.cross = MultiHeadAttention(cfg)
        self.ln_ffn = nn.LayerNorm(cfg.d_model, eps=LN_EPS)
        self.ffn = LogActFFN(cfg)

    def forward(self, x, rel_bias=None, key_mask=None, memory=None,
                memory_mask=None, g=None):
        normed = self.ln_attn(x)
        h = self.attn(normed, normed, rel_bias=rel_bias,
                      causal=self.is_decoder, key_mask=key_mask, g=g)
        x = x + _dropout(h, self.p, g)
        if self.is_decoder:
            h = self.cross(self.ln_cross(x), memory, key_mask=memory_mask, g=g)
            x = x + _dropout(h, self.p, g)
        h = self.ffn(self.ln_ffn(x), g=g)
        return x + _dropout(h, self.p, g)


class TaskHead(nn.Module):
    """Two consecutive affine layers with a nonlinearity between.

    The final layer is zero-initialized so an unfinetuned head is neutral:
    residual heads start as the identity, the failure head at probability 0.5.
    """

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_in)
        self.fc2 = nn.Linear(d_in, d_out)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass
class ForwardOutput:
    logits: torch.Tensor | None = None
    head_output: torch.Tensor | None = None
    loss: torch.Tensor | None = None


class UniLogModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # Tied with the output projection (single storage).
        self.emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        # One table shared by every layer, encoder and decoder alike.
        self.rel_bias = nn.Parameter(torch.zeros(cfg.n_rel_buckets, cfg.n_heads))
        self.encoder = nn.ModuleList(Block(cfg, is_decoder=False) for _ in range(cfg.n_blocks))
        self.decoder = nn.ModuleList(Block(cfg, is_decoder=True) for _ in range(cfg.n_blocks))
        self._bucket_cache: dict = {}
        self.heads = nn.ModuleDict({
            TaskKind.anomaly.name: TaskHead(cfg.d_model, cfg.d_model),
            TaskKind.failure.name: TaskHead(cfg.d_model, 2),
            TaskKind.summarization.name: TaskHead(cfg.d_model, cfg.d_model),
            TaskKind.compression.name: TaskHead(cfg.d_model, cfg.d_model),
        })
        self._init_weights()

    def _init_weights(self):
        for name, p in self.named_parameters():
            if p.dim() >= 2 and not name.startswith("heads.") and "rel_bias" not in name:
                nn.init.normal_(p, std=0.02)
            elif p.dim() == 1 and "weight" in name:  # layer-norm gains
                nn.init.ones_(p)
            elif p.dim() == 1 and "bias" in name:
                nn.init.zeros_(p)
        for head in self.heads.values():
            nn.init.normal_(head.fc1.weight, std=0.02)
            nn.init.zeros_(head.fc1.bias)
            nn.init.zeros_(head.fc2.weight)
            nn.init.zeros_(head.fc2.bias)

    def _rel_buckets_for(self, lq: int, lk: int, bidirectional: bool) -> torch.Tensor:
        key = (lq, lk, bidirectional)
        cached = self._bucket_cache.get(key)
        if cached is None:
            pos_q = torch.arange(lq)[:, None]
            pos_k = torch.arange(lk)[None, :]
            cached = relative_bucket(pos_k - pos_q, bidirectional,
                                     self.cfg.n_rel_buckets, self.cfg.max_len)
            if len(self._bucket_cache) < 4096:
                self._bucket_cache[key] = cached
        return cached

    def _rel_bias_for(self, lq: int, lk: int, bidirectional: bool) -> torch.Tensor:
        buckets = self._rel_buckets_for(lq, lk, bidirectional)
        return self.rel_bias[buckets].permute(2, 0, 1)  # (H, Lq, Lk)

    def encode(self, input_ids: torch.Tensor, g=None) -> tuple[torch.Tensor, torch.Tensor]:
        mask = input_ids != PAD_ID
        x = _dropout(self.emb[input_ids], self.cfg.dropout, g)
        bias = self._rel_bias_for(input_ids.shape[1], input_ids.shape[1], bidirectional=True)
        for block in self.encoder:
            x = block(x, rel_bias=bias, key_mask=mask, g=g)
        return _dropout(x, self.cfg.dropout, g), mask

    def decode(self, decoder_ids: torch.Tensor, memory: torch.Tensor,
               memory_mask: torch.Tensor, g=None) -> torch.Tensor:
        x = _dropout(self.emb[decoder_ids], self.cfg.dropout, g)
        bias = self._rel_bias_for(decoder_ids.shape[1], decoder_ids.shape[1], bidirectional=False)
        for block in self.decoder:
            x = block(x, rel_bias=bias, memory=memory, memory_mask=memory_mask, g=g)
        return _dropout(x, self.cfg.dropout, g)

    def logits_from(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.emb.t()

    def forward(self, input_ids, decoder_ids, task: TaskKind | None = None,
                targets=None, mask_positions=None, g=None) -> ForwardOutput:
        """Full encoder-decoder pass.

        When `task` is given, input_ids[:, 0] must be that task's prefix token
        and the matching head is applied. `targets` selects the loss: token
        cross-entropy by default, embedding-space reconstruction at
        `mask_positions` for the anomaly task, class cross-entropy for failure.
        """
        if input_ids.dim() == 1:
            input_ids = input_ids.unsqueeze(0)
            decoder_ids = decoder_ids.unsqueeze(0)
        if task is not None:
            if not isinstance(task, TaskKind):
                raise ValueError(f"unknown task {task!r}")
            if (input_ids[:, 0] != task.prefix_id).any():
                raise ValueError(
                    f"input must start with the {task.prefix_token} prefix token")
        memory, memory_mask = self.encode(input_ids, g=g)
        hidden = self.decode(decoder_ids, memory, memory_mask, g=g)

        out = ForwardOutput()
        if task is TaskKind.failure:
            pooled = (memory * memory_mask[..., None]).sum(1) / memory_mask.sum(1, keepdim=True)
            out.head_output = self.heads[task.name](pooled)
            out.logits = self.logits_from(hidden)
            if targets is not None:
                out.loss = nn.functional.cross_entropy(out.head_output, targets)
            return out

        if task is TaskKind.anomaly:
            predicted = hidden + self.heads[task.name](hidden)
            out.head_output = predicted
            out.logits = self.logits_from(hidden)
            if targets is not None:
                if mask_positions is None:
                    raise ValueError("anomaly loss requires mask_positions")
                out.loss = reconstruction_l2(
                    predicted, self.emb[targets].detach(), mask_positions)
            return out

        if task in (TaskKind.summarization, TaskKind.compression):
            hidden = hidden + self.heads[task.name](hidden)
        out.head_output = hidden
        out.logits = self.logits_from(hidden)
        if targets is not None:
            out.loss = nn.functional.cross_entropy(
                out.logits.reshape(-1, self.cfg.vocab_size),
                targets.reshape(-1), ignore_index=PAD_ID)
        return out


def reconstruction_l2(pred_embedding: torch.Tensor, target_embedding: torch.Tensor,
                      mask) -> torch.Tensor:
    """Mean over masked positions of squared distance / d_model.

    mask: (B, L) bool selecting the masked positions.
    """
    if pred_embedding.shape != target_embedding.shape:
        raise ValueError("prediction and target embeddings must have equal shape")
    if not mask.any():
        return pred_embedding.sum() * 0.0
    diff = (pred_embedding - target_embedding)[mask]
    return (diff ** 2).sum(-1).mean() / pred_embedding.shape[-1]
