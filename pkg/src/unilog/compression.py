"""Lossless log compression: the model's next-token conditional probabilities
drive an arithmetic coder over normalized token ids, while a residual stream
(separators, casing, numerals, OOV spellings, undecodable lines) carries what
the lossy tokenizer discards, so files round-trip byte-exactly.

The predictor is queried identically during encode and decode: one forward
pass over the current line prefix per symbol, with the encoder fed only the
compression prefix token. That symmetry is what makes decoding bit-exact.
"""

from __future__ import annotations

import re
import struct
import zlib

import numpy as np
import torch

from .coder import (CodingError, QuantizedPmf, ac_decode, ac_encode,
                    byte_decode, byte_encode, quantize_pmf)
from .model import TaskKind
from .tokenizer import (EOS_ID, FIRST_TOKEN_ID, NUM_ID, PAD_ID, UNK_ID,
                        UnigramTable, Vocabulary, default_table, normalize,
                        segment_unigram)
from .training import Checkpoint

BLOB_MAGIC = b"ULZC"
BLOB_VERSION = 1
HEADER_FMT = "<4sH32s32sQQIQ"  # magic, version, ckpt hash, vocab hash, w, nbytes, window, residual len
HEADER_SIZE = struct.calcsize(HEADER_FMT)

_PART_RE = re.compile(r'([ \t.,:/;_=\-"]+)')


class BlobError(ValueError):
    pass


class ModelPredictor:
    """Next-token pmf from the compression-task decoder.

    Context is the token stream since the last EOS (one log line), truncated
    to the model's window. Probabilities are evaluated in float64 and
    quantized so identical contexts give bit-identical pmfs.
    """

    def __init__(self, ckpt: Checkpoint, vocab: Vocabulary):
        self.ckpt = ckpt
        self.vocab = vocab
        self.window = ckpt.config.max_len
        # Codeable symbols: real tokens plus UNK, NUM, and the EOS terminator.
        self.support = np.array(
            [UNK_ID, NUM_ID, EOS_ID] + list(range(FIRST_TOKEN_ID, len(vocab))),
            dtype=np.int64)
        enc = torch.tensor([[TaskKind.compression.prefix_id]], dtype=torch.long)
        with torch.no_grad():
            self._memory, self._memory_mask = ckpt.model.encode(enc)
        self._head = ckpt.model.heads[TaskKind.compression.name]

    def __call__(self, prefix: list[int]) -> QuantizedPmf:
        return self.next_token_pmf(prefix)

    def next_token_pmf(self, context: list[int]) -> QuantizedPmf:
        # Reset at line boundaries; keep at most window-1 context ids.
        try:
            start = len(context) - 1 - context[::-1].index(EOS_ID)
        except ValueError:
            start = -1
        ctx = context[start + 1:][-(self.window - 1):]
        dec = torch.tensor([[PAD_ID] + ctx], dtype=torch.long)
        model = self.ckpt.model
        with torch.no_grad():
            hidden = model.decode(dec, self._memory, self._memory_mask)[:, -1]
            hidden = hidden + self._head(hidden)
            logits = (hidden[0] @ model.emb.t()).to(torch.float64).numpy()
        logits = logits[self.support]
        logits = logits - logits.max()
        probs = np.exp(logits)
        return quantize_pmf(self.support, probs / probs.sum())


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def varint(self) -> int:
        shift = n = 0
        while True:
            if self.pos >= len(self.data):
                raise BlobError("truncated residual stream")
            b = self.data[self.pos]
            self.pos += 1
            n |= (b & 0x7F) << shift
            if not b & 0x80:
                return n
            shift += 7

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise BlobError("truncated residual stream")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _tokenize_fragment(fragment: str, table: UnigramTable) -> list[str]:
    return [t for t in (normalize(p, table) for p in segment_unigram(fragment, table)) if t]


def analyze_file(data: bytes, vocab: Vocabulary, table: UnigramTable | None = None):
    """Split raw bytes into the codeable token stream and the residual record.

    Returns (token_ids, residual_plain_bytes).
    """
    table = table or default_table()
    parts_split = data.split(b"\n")
    trailing = 1 if data.endswith(b"\n") else 0
    lines = parts_split[:-1] if trailing else parts_split
    if not data:
        lines = []
    residual = bytearray()
    residual += _varint(len(lines))
    residual.append(trailing)
    token_ids: list[int] = []
    for raw in lines:
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            text = None
        if text is None:
            residual.append(1)  # raw line
            residual += _varint(len(raw))
            residual += raw
            continue
        residual.append(0)  # structured line
        parts = _PART_RE.split(text)
        residual += _varint(len(parts))
        for i, part in enumerate(parts):
            pb = part.encode("utf-8")
            if i % 2 == 1:  # separator run
                residual += _varint(len(pb))
                residual += pb
            else:
                tokens = _tokenize_fragment(part, table) if part else []
                ids = vocab.encode(tokens)
                surface = "".join(vocab.decode(ids))
                override = 0 if surface == part else 1
                residual += _varint(len(tokens) << 1 | override)
                if override:
                    residual += _varint(len(pb))
                    residual += pb
                token_ids.extend(ids)
        token_ids.append(EOS_ID)
    return token_ids, bytes(residual)


def reassemble_file(token_ids: list[int], residual_plain: bytes,
                    vocab: Vocabulary) -> bytes:
    """Inverse of analyze_file."""
    r = _Reader(residual_plain)
    n_lines = r.varint()
    trailing = r.take(1)[0]
    pos = 0
    out_lines: list[bytes] = []
    for _ in range(n_lines):
        kind = r.take(1)[0]
        if kind == 1:
            out_lines.append(bytes(r.take(r.varint())))
            continue
        n_parts = r.varint()
        pieces: list[str] = []
        for i in range(n_parts):
            if i % 2 == 1:
                pieces.append(r.take(r.varint()).decode("utf-8"))
            else:
                head = r.varint()
                k, override = head >> 1, head & 1
                toks = token_ids[pos:pos + k]
                if len(toks) != k:
                    raise BlobError("token stream shorter than residual record")
                pos += k
                if override:
                    pieces.append(r.take(r.varint()).decode("utf-8"))
                else:
                    pieces.append("".join(vocab.decode(toks)))
        if pos >= len(token_ids) or token_ids[pos] != EOS_ID:
            raise BlobError("missing line terminator in token stream")
        pos += 1
        out_lines.append("".join(pieces).encode("utf-8"))
    if pos != len(token_ids):
        raise BlobError("unconsumed tokens in stream")
    body = b"\n".join(out_lines)
    if trailing:
        body += b"\n"
    return body


def write_blob(out_path, ckpt_hash: bytes, vocab_hash: bytes, w: int,
               original_bytes: int, window: int, residual: bytes,
               payload: bytes) -> int:
    header = struct.pack(HEADER_FMT, BLOB_MAGIC, BLOB_VERSION, ckpt_hash,
                         vocab_hash, w, original_bytes, window, len(residual))
    body = header + residual + payload
    blob = body + struct.pack("<I", zlib.crc32(body))
    with open(out_path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_blob(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_SIZE + 4:
        raise BlobError(f"{path}: truncated blob")
    if zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise BlobError(f"{path}: checksum mismatch")
    magic, version, ckpt_hash, vocab_hash, w, nbytes, window, res_len = \
        struct.unpack(HEADER_FMT, data[:HEADER_SIZE])
    if magic != BLOB_MAGIC:
        raise BlobError(f"{path}: bad magic")
    if version != BLOB_VERSION:
        raise BlobError(f"{path}: unsupported version {version}")
    residual = data[HEADER_SIZE:HEADER_SIZE + res_len]
    payload = data[HEADER_SIZE + res_len:-4]
    return dict(ckpt_hash=ckpt_hash, vocab_hash=vocab_hash, w=w,
                original_bytes=nbytes, window=window, residual=residual,
                payload=payload)


def compress_file(ckpt: Checkpoint, vocab: Vocabulary, in_path, out_path,
                  table: UnigramTable | None = None) -> dict:
    """Compress a log file into a self-describing ULZC blob.

    Returns size statistics including the exact payload bit count.
    """
    with open(in_path, "rb") as f:
        data = f.read()
    token_ids, residual_plain = analyze_file(data, vocab, table)
    predictor = ModelPredictor(ckpt, vocab)
    payload, payload_bits = ac_encode(token_ids, predictor)
    residual = struct.pack("<Q", len(residual_plain)) + byte_encode(residual_plain)
    blob_size = write_blob(out_path, ckpt.content_hash(), vocab.content_hash(),
                           len(token_ids), len(data), predictor.window,
                           residual, payload)
    return dict(original_bytes=len(data), compressed_bytes=blob_size,
                n_tokens=len(token_ids), payload_bits=payload_bits,
                residual_bytes=len(residual))


def decompress_file(ckpt: Checkpoint, vocab: Vocabulary, in_path, out_path) -> int:
    """Reconstruct the original file byte-exactly; refuses on any hash or
    checksum mismatch before emitting output."""
    blob = read_blob(in_path)
    if blob["ckpt_hash"] != ckpt.content_hash():
        raise BlobError(f"{in_path}: blob was written with a different checkpoint")
    if blob["vocab_hash"] != vocab.content_hash():
        raise BlobError(f"{in_path}: blob was written with a different vocabulary")
    residual = blob["residual"]
    if len(residual) < 8:
        raise BlobError(f"{in_path}: truncated residual stream")
    (plain_len,) = struct.unpack("<Q", residual[:8])
    residual_plain = byte_decode(residual[8:], plain_len)
    predictor = ModelPredictor(ckpt, vocab)
    token_ids = ac_decode(blob["payload"], predictor, blob["w"])
    data = reassemble_file(token_ids, residual_plain, vocab)
    if len(data) != blob["original_bytes"]:
        raise BlobError(f"{in_path}: reconstructed size mismatch")
    with open(out_path, "wb") as f:
        f.write(data)
    return len(data)
