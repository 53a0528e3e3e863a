"""End-to-end acceptance suite. One test per criterion, ordered; each prints a
single summary line. Desk-scale model sizes keep the runtime caps honest on a
single CPU core.
"""

import itertools
import math
import random
import time
from collections import Counter

import numpy as np
import pytest
import torch

from unilog.coder import ac_encode, quantize_pmf, uniform_pmf
from unilog.compression import (HEADER_SIZE, BlobError, ModelPredictor,
                                analyze_file, compress_file, decompress_file)
from unilog.ingest import SyntheticCorpusSpec, generate_synthetic_corpus
from unilog.model import (Block, ModelConfig, TaskKind, UniLogModel,
                          reconstruction_l2, relative_bucket)
from unilog.tasks import (anomaly_score, calibrate_threshold, f1_from,
                          compression_rate, metrics_from_counts,
                          precision_recall_f1, predict_failure, summarize,
                          token_f1)
from unilog.tokenizer import (build_vocab, default_table, segment_unigram,
                              tokenize)
from unilog.training import (TrainConfig, bert_mask, finetune, pretrain,
                             span_mask)

torch.set_num_threads(1)


# ---- shared desk-scale corpus ----

@pytest.fixture(scope="module")
def acorpus():
    spec = SyntheticCorpusSpec(n_templates=10, n_lines=2400, anomaly_rate=0.08,
                               rng_seed=42)
    records, labels, summaries = generate_synthetic_corpus(spec)
    table = default_table()
    toks = [tokenize(r.raw_text, table) for r in records]
    vocab = build_vocab(toks)
    ids = [vocab.encode(t) for t in toks]
    lab = [labels[str(r.line_index)] for r in records]
    norm_sum = {k: [t for w in v for t in tokenize(w, table)]
                for k, v in summaries.items()}
    return dict(records=records, labels=lab, summaries=norm_sum, table=table,
                vocab=vocab, ids=ids)


@pytest.fixture(scope="module")
def fast_ckpt(acorpus):
    """Small untrained-quality checkpoint; losslessness does not need quality."""
    cfg = ModelConfig(vocab_size=len(acorpus["vocab"]), n_blocks=1, n_heads=2,
                      d_head=8, d_model=16, d_ffn=32, dropout=0.0, max_len=64)
    tc = TrainConfig(batch_size=4, pretrain_steps=2, seed=0, use_dropout=False)
    return pretrain(acorpus["ids"][:50], "unilog_span", tc, cfg,
                    vocab_hash=acorpus["vocab"].content_hash())


def _public_format_sample(path, n_lines=2000):
    """Deterministic HDFS-style sample file."""
    rng = random.Random(20081109)
    msgs = [
        "Receiving block blk_{b} src: /10.251.{o}.{o}:{p} dest: /10.251.{o}.{o}:50010",
        "PacketResponder 1 for block blk_{b} terminating",
        "BLOCK* NameSystem.addStoredBlock: blockMap updated: 10.251.{o}.{o}:50010 is added to blk_{b} size {s}",
        "Served block blk_{b} to /10.251.{o}.{o}",
        "Verification succeeded for blk_{b}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i in range(n_lines):
            msg = rng.choice(msgs)
            line = (f"081109 {203615 + i % 86400:06d} {i % 700} INFO "
                    "dfs.DataNode$PacketResponder: " + msg)
            line = line.replace("{b}", str(rng.randrange(-9, 9) * 10 ** 17 + rng.getrandbits(40)))
            while "{o}" in line:
                line = line.replace("{o}", str(rng.randrange(256)), 1)
            line = line.replace("{p}", str(rng.randrange(30000, 60000)))
            line = line.replace("{s}", str(rng.randrange(10 ** 8)))
            f.write(line + "\n")


def test_criterion_01_losslessness(acorpus, fast_ckpt, tmp_path):
    """100/100 randomized files round-trip byte-exactly in under 5 minutes and
    decode refuses every single-bit header corruption."""
    vocab, table = acorpus["vocab"], acorpus["table"]
    t0 = time.time()
    files = []
    sample = tmp_path / "sample.log"
    _public_format_sample(sample)
    files.append(sample)
    rng = random.Random(99)
    lines = [r.raw_text for r in acorpus["records"]]
    for i in range(99):
        p = tmp_path / f"f{i:02d}.log"
        kind = i % 5
        if kind == 0:
            body = "\n".join(rng.choice(lines) for _ in range(rng.randint(1, 30)))
            p.write_text(body + ("\n" if rng.random() < 0.8 else ""))
        elif kind == 1:
            p.write_bytes(bytes(rng.randrange(256) for _ in range(rng.randint(0, 400))))
        elif kind == 2:
            p.write_text("".join(chr(rng.randrange(32, 0x2600)) + "\n"
                                 for _ in range(rng.randint(1, 20))))
        elif kind == 3:
            p.write_bytes(b"\n" * rng.randint(0, 5))
        else:
            p.write_text("".join(f"key={rng.getrandbits(32):08x} "
                                 f"v-{rng.randrange(10)}.{rng.randrange(10)}\n"
                                 for _ in range(rng.randint(1, 25))))
        files.append(p)
    ok = 0
    for p in files:
        blob = p.with_suffix(".ulzc")
        out = p.with_suffix(".out")
        compress_file(fast_ckpt, vocab, p, blob, table=table)
        decompress_file(fast_ckpt, vocab, blob, out)
        assert out.read_bytes() == p.read_bytes(), p
        ok += 1
    # every single-bit header corruption must be refused
    blob = files[5].with_suffix(".ulzc")
    good = blob.read_bytes()
    bad_path = tmp_path / "corrupt.ulzc"
    for bit in range(HEADER_SIZE * 8):
        raw = bytearray(good)
        raw[bit // 8] ^= 1 << (bit % 8)
        bad_path.write_bytes(bytes(raw))
        with pytest.raises(BlobError):
            decompress_file(fast_ckpt, vocab, bad_path, tmp_path / "x.out")
    elapsed = time.time() - t0
    assert elapsed < 300.0
    print(f"\ncriterion 1 PASS: {ok}/100 files byte-exact, "
          f"{HEADER_SIZE * 8} header corruptions refused, {elapsed:.0f}s < 300s")


def test_criterion_02_code_length_bound():
    """payload bits <= sum(ceil(-log2 p_q)) + 32; uniform-4 x 100 in [200, 232]."""
    pmf = uniform_pmf(4)
    rng = random.Random(17)
    tokens = [rng.randrange(4) for _ in range(100)]
    _, bits = ac_encode(tokens, lambda prefix: pmf)
    assert 200 <= bits <= 232

    worst = 0.0
    for seed in range(20):
        rng = random.Random(1000 + seed)
        n = rng.randint(2, 50)

        def predictor(prefix, seed=seed, n=n):
            g = np.random.default_rng(seed * 7919 + len(prefix) * 31 +
                                      (prefix[-1] if prefix else 0))
            return quantize_pmf(np.arange(n), g.random(n) + 1e-9)

        stream = [rng.randrange(n) for _ in range(rng.randint(1, 300))]
        bound = sum(math.ceil(predictor(stream[:i]).bit_cost(t))
                    for i, t in enumerate(stream))
        _, b = ac_encode(stream, predictor)
        assert b <= bound + 32
        worst = max(worst, b - bound)
    print(f"\ncriterion 2 PASS: uniform fixture {bits} bits in [200, 232]; "
          f"bound slack max {worst:.0f} <= 32 over 20 streams")


def test_criterion_03_compression_win(tmp_path):
    """Model-coded token stream <= 50% of the static unigram-entropy baseline
    on the seeded 10-template 10k-line corpus."""
    spec = SyntheticCorpusSpec(n_templates=10, n_lines=10000, anomaly_rate=0.0,
                               rng_seed=42)
    records, _, _ = generate_synthetic_corpus(spec)
    data = ("\n".join(r.raw_text for r in records) + "\n").encode()
    table = default_table()
    toks = [tokenize(r.raw_text, table) for r in records]
    vocab = build_vocab(toks)
    ids = [vocab.encode(t) for t in toks if t]
    tokens, _ = analyze_file(data, vocab, table)

    counts = Counter(tokens)
    total = len(tokens)
    baseline_bits = sum(-math.log2(counts[t] / total) for t in tokens)

    cfg = ModelConfig(vocab_size=len(vocab), n_blocks=2, n_heads=2, d_head=16,
                      d_model=32, d_ffn=128, dropout=0.1, max_len=48)
    tc = TrainConfig(batch_size=32, pretrain_steps=512, finetune_steps=3072,
                     seed=0)
    ckpt = pretrain(ids[:2000], "unilog_span", tc, cfg,
                    vocab_hash=vocab.content_hash())
    ckpt = finetune(ckpt, TaskKind.compression, ids[:2000], tc)
    _, payload_bits = ac_encode(tokens, ModelPredictor(ckpt, vocab))
    ratio = payload_bits / baseline_bits
    assert ratio <= 0.5
    print(f"\ncriterion 3 PASS: model {payload_bits} bits vs unigram baseline "
          f"{baseline_bits:.0f} bits, ratio {ratio:.3f} <= 0.5")


def test_criterion_04_gradient_correctness():
    """Central finite differences agree with backprop within 1e-4 relative
    error over sampled coordinates of every parameter tensor (2 blocks,
    d_model=8, float64, dropout off)."""
    cfg = ModelConfig(vocab_size=80, n_blocks=2, n_heads=2, d_head=4, d_model=8,
                      d_ffn=16, dropout=0.0, max_len=24, n_rel_buckets=8)
    torch.manual_seed(0)
    model = UniLogModel(cfg).double()
    rng = random.Random(0)
    L = 8
    seq = [rng.randrange(72, 80) for _ in range(L)]
    enc_plain = torch.tensor([seq])
    ex = span_mask(seq, rng=random.Random(1))
    mask = torch.zeros(1, L, dtype=torch.bool)
    mask[0, ex.mask_positions] = True

    def dec(tgt):
        d = torch.full_like(tgt, 0)
        d[:, 1:] = tgt[:, :-1]
        return d

    a_enc = torch.tensor([[TaskKind.anomaly.prefix_id] + ex.input_ids])
    # The anomaly loss detaches the target embedding; freeze it as a constant
    # so finite differences and backprop describe the same function.
    with torch.no_grad():
        anomaly_target = model.emb[torch.tensor([seq])].clone()

    def total_loss():
        tgt = torch.tensor([seq])
        loss = model(enc_plain, dec(tgt), targets=tgt).loss
        memory, memory_mask = model.encode(a_enc)
        hidden = model.decode(dec(tgt), memory, memory_mask)
        predicted = hidden + model.heads[TaskKind.anomaly.name](hidden)
        loss = loss + reconstruction_l2(predicted, anomaly_target, mask)
        f_enc = torch.tensor([[TaskKind.failure.prefix_id] + seq])
        loss = loss + model(f_enc, torch.zeros(1, 1, dtype=torch.long),
                            task=TaskKind.failure,
                            targets=torch.tensor([1])).loss
        s_enc = torch.tensor([[TaskKind.summarization.prefix_id] + seq])
        s_tgt = torch.tensor([seq[:4]])
        loss = loss + model(s_enc, dec(s_tgt), task=TaskKind.summarization,
                            targets=s_tgt).loss
        c_enc = torch.tensor([[TaskKind.compression.prefix_id]])
        loss = loss + model(c_enc, dec(tgt), task=TaskKind.compression,
                            targets=tgt).loss
        return loss

    model.zero_grad()
    total_loss().backward()
    h = 1e-5
    worst = 0.0
    sampler = random.Random(7)
    for name, p in model.named_parameters():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        n = flat.numel()
        for idx in {sampler.randrange(n) for _ in range(min(4, n))}:
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(total_loss())
                flat[idx] = orig - h
                down = float(total_loss())
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grad.view(-1)[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            assert rel <= 1e-4, (name, idx, analytic, numeric)
            worst = max(worst, rel)
    print(f"\ncriterion 4 PASS: max relative gradient error {worst:.2e} <= 1e-4")


def test_criterion_05_architecture_invariants():
    cfg = ModelConfig(vocab_size=80, n_blocks=2, n_heads=2, d_head=4, d_model=8,
                      d_ffn=16, dropout=0.0, max_len=32, n_rel_buckets=8)
    torch.manual_seed(1)
    model = UniLogModel(cfg).double()
    enc = torch.randint(72, 80, (1, 7))
    dec = torch.randint(72, 80, (1, 7))

    # causal mask: perturbing decoder position t+1 is invisible at <= t
    dec2 = dec.clone()
    dec2[0, 5] = 72 + (int(dec2[0, 5]) - 72 + 1) % 8
    with torch.no_grad():
        a = model(enc, dec).logits
        b = model(enc, dec2).logits
    assert torch.equal(a[0, :5], b[0, :5])

    # Pre-LN zero-sublayer identity
    block = Block(cfg, is_decoder=False).double()
    with torch.no_grad():
        block.attn.wo.weight.zero_()
        block.ffn.out.weight.zero_()
        block.ffn.out.bias.zero_()
    x = torch.randn(1, 5, 8, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(block(x), x)

    # softmax rows sum to 1 +- 1e-6
    sums = torch.softmax(a, dim=-1).sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    # tied embedding is single storage
    h = torch.randn(1, 2, 8, dtype=torch.float64)
    before = model.logits_from(h)[..., 75].clone()
    with torch.no_grad():
        model.emb[75] += 1.0
    assert not torch.equal(model.logits_from(h)[..., 75], before)

    # relative-shift invariance of the attention bias
    base = torch.arange(6)
    for bidir in (True, False):
        rel0 = base[None, :] - base[:, None]
        rel1 = (base + 53)[None, :] - (base + 53)[:, None]
        assert torch.equal(relative_bucket(rel0, bidir, 8, 32),
                           relative_bucket(rel1, bidir, 8, 32))
    print("\ncriterion 5 PASS: causal/Pre-LN/softmax/tying/relative-shift "
          "invariants hold")


def test_criterion_06_masking_statistics():
    ids = list(range(100, 200))
    rng = random.Random(20240601)
    span_frac, bert_frac = [], []
    for _ in range(10000):
        ex = span_mask(ids, rng=rng)
        span_frac.append(len(ex.mask_positions) / 100)
        # run-length encode and verify every maximal run is 2 or 3
        lengths = []
        cur = 0
        prev = None
        for p in ex.mask_positions:
            if prev is not None and p == prev + 1:
                cur += 1
            else:
                if cur:
                    lengths.append(cur)
                cur = 1
            prev = p
        if cur:
            lengths.append(cur)
        assert all(l in (2, 3) for l in lengths)
        bert_frac.append(len(bert_mask(ids, rng=rng).mask_positions) / 100)
    span_mean = sum(span_frac) / len(span_frac)
    bert_mean = sum(bert_frac) / len(bert_frac)
    assert 0.15 <= span_mean <= 0.18
    assert abs(bert_mean - 0.15) <= 0.01
    print(f"\ncriterion 6 PASS: span fraction mean {span_mean:.4f} in "
          f"[0.15, 0.18], runs all 2-3; bert mean {bert_mean:.4f} = 0.15 +- 0.01")


def test_criterion_07_task_f1_at_desk_scale(acorpus):
    """2,048-step pretrain + 2,048-step finetunes reach F1 >= 0.9 for anomaly,
    failure, and summarization in under 30 minutes."""
    t0 = time.time()
    ids, lab, records = acorpus["ids"], acorpus["labels"], acorpus["records"]
    vocab, summaries = acorpus["vocab"], acorpus["summaries"]
    train, val, test = slice(0, 1800), slice(1800, 2100), slice(2100, 2400)
    normal_train = [s for s, l in zip(ids[train], lab[train]) if l == "normal"]

    cfg = ModelConfig(vocab_size=len(vocab), n_blocks=3, n_heads=4, d_head=16,
                      d_model=64, d_ffn=256, dropout=0.1, max_len=48)
    tc = TrainConfig(batch_size=32, pretrain_steps=2048, finetune_steps=2048,
                     seed=1)
    base = pretrain(normal_train, "unilog_span", tc, cfg,
                    vocab_hash=vocab.content_hash())

    # anomaly: threshold calibrated on the labeled validation split
    ck = finetune(base, TaskKind.anomaly, normal_train, tc)
    val_scores = [anomaly_score(ck, s) for s in ids[val]]
    thr = calibrate_threshold(
        [x for x, l in zip(val_scores, lab[val]) if l == "normal"],
        [x for x, l in zip(val_scores, lab[val]) if l == "anomalous"])
    pred = ["anomalous" if anomaly_score(ck, s) > thr else "normal"
            for s in ids[test]]
    anomaly_f1 = precision_recall_f1(pred, lab[test]).f1

    ck = finetune(base, TaskKind.failure,
                  [(s, 1 if l == "anomalous" else 0)
                   for s, l in zip(ids[train], lab[train])], tc)
    pred = ["failure" if predict_failure(ck, s) >= 0.5 else "no_failure"
            for s in ids[test]]
    failure_f1 = precision_recall_f1(pred, lab[test]).f1

    ck = finetune(base, TaskKind.summarization,
                  [(s, vocab.encode(summaries[str(r.line_index)]))
                   for s, r in zip(ids[train], records[train])], tc)
    tp = fp = fn = 0
    for s, r in zip(ids[test], records[test]):
        out = vocab.decode(summarize(ck, s, max_out=8))
        m = token_f1(out, summaries[str(r.line_index)])
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    summ_f1 = metrics_from_counts(tp, fp, fn).f1

    elapsed = time.time() - t0
    assert anomaly_f1 >= 0.9
    assert failure_f1 >= 0.9
    assert summ_f1 >= 0.9
    assert elapsed < 1800.0
    print(f"\ncriterion 7 PASS: anomaly F1 {anomaly_f1:.3f}, failure F1 "
          f"{failure_f1:.3f}, summarization token-F1 {summ_f1:.3f} "
          f"(all >= 0.9), {elapsed:.0f}s < 1800s")


def test_criterion_08_objective_ablation(acorpus):
    """mean anomaly F1 of span-mask pretraining >= prefix-LM pretraining over
    3 seeds with identical budgets."""
    ids, lab, vocab = acorpus["ids"], acorpus["labels"], acorpus["vocab"]
    cfg = ModelConfig(vocab_size=len(vocab), n_blocks=3, n_heads=4, d_head=16,
                      d_model=64, d_ffn=256, dropout=0.1, max_len=48)
    normal = [s for s, l in zip(ids[:1800], lab[:1800]) if l == "normal"]

    def run(objective, seed):
        tc = TrainConfig(batch_size=32, pretrain_steps=800, finetune_steps=256,
                         seed=seed)
        ck = pretrain(normal, objective, tc, cfg)
        ck = finetune(ck, TaskKind.anomaly, normal, tc)
        val = [(anomaly_score(ck, s), l)
               for s, l in zip(ids[1800:2100], lab[1800:2100])]
        thr = calibrate_threshold([x for x, l in val if l == "normal"],
                                  [x for x, l in val if l == "anomalous"])
        pred = ["anomalous" if anomaly_score(ck, s) > thr else "normal"
                for s in ids[2100:2400]]
        return precision_recall_f1(pred, lab[2100:2400]).f1

    unilog = [run("unilog_span", s) for s in (1, 2, 3)]
    prefix = [run("prefix_lm", s) for s in (1, 2, 3)]
    mean_u = sum(unilog) / 3
    mean_p = sum(prefix) / 3
    assert mean_u >= mean_p
    print(f"\ncriterion 8 PASS: mean F1 span-mask {mean_u:.3f} "
          f"({[round(f, 3) for f in unilog]}) >= prefix-LM {mean_p:.3f} "
          f"({[round(f, 3) for f in prefix]})")


def test_criterion_09_tokenizer_walkthrough_and_dp():
    table = default_table()
    assert tokenize("LocalFaultAlarm_clear", table) == \
        ["local", "fault", "alarm", "clear"]

    def brute(fragment):
        best, best_cost = None, float("inf")
        n = len(fragment)
        for cuts in itertools.product([0, 1], repeat=n - 1):
            pts = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [n]
            pieces = [fragment[a:b] for a, b in zip(pts, pts[1:])]
            cost = sum(table.word_cost(p) for p in pieces)
            if cost < best_cost:
                best, best_cost = pieces, cost
        return best_cost

    rng = random.Random(4242)
    words = ["up", "link", "status", "eth", "node", "fault", "alarm", "log",
             "port", "user"]
    checked = 0
    for _ in range(200):
        if rng.randrange(2):
            frag = "".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
        else:
            frag = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz")
                           for _ in range(rng.randint(1, 12)))
        frag = frag[:12]
        got = segment_unigram(frag, table)
        assert "".join(got) == frag
        got_cost = sum(table.word_cost(p) for p in got)
        assert got_cost == pytest.approx(brute(frag), abs=1e-9), frag
        checked += 1
    print(f"\ncriterion 9 PASS: walkthrough verbatim; DP == brute force on "
          f"{checked}/200 fuzzed fragments")


def test_criterion_10_metrics_fixtures():
    f1 = f1_from(0.98, 1.00)
    assert f1 == pytest.approx(0.9899, abs=5e-5)
    rate = compression_rate(29, 1000)
    assert rate == pytest.approx(0.029)
    print(f"\ncriterion 10 PASS: F1(0.98, 1.00) = {f1:.4f}; "
          f"rate 29/1000 = {rate * 100:.1f}%")
