import pytest
import torch

from unilog.ingest import SyntheticCorpusSpec, generate_synthetic_corpus
from unilog.model import ModelConfig
from unilog.tokenizer import build_vocab, default_table, tokenize
from unilog.training import Checkpoint, TrainConfig, pretrain

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def table():
    return default_table()


@pytest.fixture(scope="session")
def synth():
    """(records, labels, summaries) for a small seeded corpus."""
    spec = SyntheticCorpusSpec(n_templates=10, n_lines=400, anomaly_rate=0.08,
                               rng_seed=42)
    return generate_synthetic_corpus(spec)


@pytest.fixture(scope="session")
def vocab(synth, table):
    records, _, _ = synth
    return build_vocab(tokenize(r.raw_text, table) for r in records)


@pytest.fixture(scope="session")
def corpus_ids(synth, table, vocab):
    records, _, _ = synth
    return [vocab.encode(tokenize(r.raw_text, table)) for r in records]


@pytest.fixture(scope="session")
def tiny_ckpt(vocab, corpus_ids):
    """Minimally trained checkpoint for plumbing tests (not for quality)."""
    cfg = ModelConfig(vocab_size=len(vocab), n_blocks=1, n_heads=2, d_head=8,
                      d_model=16, d_ffn=32, dropout=0.0, max_len=64)
    tc = TrainConfig(batch_size=4, pretrain_steps=2, finetune_steps=2, seed=0,
                     use_dropout=False)
    return pretrain(corpus_ids, "unilog_span", tc, cfg,
                    vocab_hash=vocab.content_hash())
