"""Log text tokenization: delimiter splitting, unigram segmentation, normalization,
and the vocabulary that maps tokens to model ids.

The pipeline is tokenize = normalize . segment_unigram . split_delimiters.
All stages are pure functions; a built vocabulary is immutable.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass
from importlib import resources

# Delimiter set used to split raw log text (whitespace is included).
DELIMITERS = '.,:/;_=-"'
_SPLIT_RE = re.compile(r'[\s.,:/;_=\-"]+')

# Reserved low id range. Real tokens start at FIRST_TOKEN_ID.
PAD_ID = 0
UNK_ID = 1
NUM_ID = 2
EOS_ID = 3
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
NUM_TOKEN = "<num>"
EOS_TOKEN = "</s>"

TASK_PREFIX_TOKENS = ("<anomaly>", "<failure>", "<summarization>", "<compression>")
TASK_PREFIX_BASE = 4  # ids 4..7

N_SENTINELS = 64
SENTINEL_BASE = 8  # ids 8..71
FIRST_TOKEN_ID = SENTINEL_BASE + N_SENTINELS


def sentinel_id(i: int) -> int:
    """Sentinel mask id for the i-th masked position (wraps past the cap)."""
    return SENTINEL_BASE + (i % N_SENTINELS)


def _special_tokens() -> list[str]:
    toks = [PAD_TOKEN, UNK_TOKEN, NUM_TOKEN, EOS_TOKEN]
    toks += list(TASK_PREFIX_TOKENS)
    toks += [f"<m{i}>" for i in range(N_SENTINELS)]
    return toks


_NUMERIC_RE = re.compile(r"^(?:\d+|0x[0-9a-f]+|(?=.*\d)[0-9a-f]{4,})$")

# Words whose trailing "s" is not an inflection.
_SUFFIX_EXCEPTIONS = {
    "status", "is", "as", "its", "this", "was", "has", "does", "yes",
    "his", "us", "thus", "plus", "always", "perhaps", "ms", "os", "dfs",
    "hdfs", "gps", "dns", "https", "mbps", "gbps",
}


class UnigramTable:
    """Frequency-ranked word table used by the DP segmenter.

    Cost of an in-table word follows the Zipf convention
    cost(word) = log((rank + 1) * log(table size)); out-of-table chunks pay a
    large per-character penalty so dictionary words always win when available.
    """

    OOV_CHAR_COST = 15.0
    OOV_CHUNK_COST = 5.0

    def __init__(self, words: list[str]):
        if not words:
            raise ValueError("unigram table must be non-empty")
        seen: dict[str, int] = {}
        for w in words:
            lw = w.strip().lower()
            if lw and lw not in seen:
                seen[lw] = len(seen)
        scale = math.log(max(len(seen), 2))
        self._cost = {w: math.log((rank + 1) * scale) for w, rank in seen.items()}
        self.max_word_len = max(len(w) for w in seen)

    def __len__(self) -> int:
        return len(self._cost)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._cost

    def word_cost(self, word: str) -> float:
        """Segmentation cost of a candidate chunk (case-insensitive)."""
        c = self._cost.get(word.lower())
        if c is not None:
            return c
        return self.OOV_CHUNK_COST + self.OOV_CHAR_COST * len(word)

    @classmethod
    def load(cls, path) -> "UnigramTable":
        with open(path, encoding="utf-8") as f:
            return cls([line.strip() for line in f if line.strip()])


_default_table: UnigramTable | None = None


def default_table() -> UnigramTable:
    """The embedded English + log-domain word table."""
    global _default_table
    if _default_table is None:
        text = resources.files("unilog.data").joinpath("unigram_words.txt").read_text("utf-8")
        _default_table = UnigramTable([w for w in text.split("\n") if w.strip()])
    return _default_table


def split_delimiters(raw: str) -> list[str]:
    """Split on whitespace and the delimiter set, discarding the separators."""
    return [frag for frag in _SPLIT_RE.split(raw) if frag]


def segment_unigram(fragment: str, table: UnigramTable | None = None) -> list[str]:
    """Minimum-cost segmentation of a delimiter-free fragment.

    Dynamic programming over split points; returned pieces preserve the
    original casing and concatenate back to the fragment.
    """
    if not fragment:
        return []
    table = table or default_table()
    n = len(fragment)
    # best[i] = (cost, split point) for the first i characters
    best: list[tuple[float, int]] = [(0.0, 0)]
    for i in range(1, n + 1):
        lo = max(0, i - max(table.max_word_len, 24))
        cand = min(
            ((best[j][0] + table.word_cost(fragment[j:i]), j) for j in range(lo, i)),
            key=lambda t: t[0],
        )
        best.append(cand)
    pieces = []
    i = n
    while i > 0:
        j = best[i][1]
        pieces.append(fragment[j:i])
        i = j
    return pieces[::-1]


def normalize(token: str, table: UnigramTable | None = None) -> str:
    """Case folding, numeric collapsing, and light inflection stripping.

    Pure-numeric and hex-like tokens map to the NUM placeholder. One of the
    suffixes ed/ing/s is stripped when the stem keeps length >= 3; the table
    is consulted only to restore a dropped final "e" (changed -> change).
    """
    if not token:
        raise ValueError("normalize requires a non-empty token")
    t = token.lower()
    if _NUMERIC_RE.match(t):
        return NUM_TOKEN
    if t in _SUFFIX_EXCEPTIONS:
        return t
    table = table or default_table()
    if t.endswith("ed") and len(t) - 2 >= 3:
        if t[:-1] in table:  # changed -> change
            return t[:-1]
        return t[:-2]
    if t.endswith("ing") and len(t) - 3 >= 3:
        stem = t[:-3]
        if stem not in table and stem + "e" in table:  # storing -> store
            return stem + "e"
        return stem
    if t.endswith("s") and not t.endswith("ss") and len(t) - 1 >= 3:
        return t[:-1]
    return t


def tokenize(raw: str, table: UnigramTable | None = None) -> list[str]:
    """Full preprocessing pipeline for one piece of raw log text."""
    table = table or default_table()
    out = []
    for frag in split_delimiters(raw):
        for piece in segment_unigram(frag, table):
            tok = normalize(piece, table)
            if tok:
                out.append(tok)
    return out


@dataclass(frozen=True)
class TokenSequence:
    """Normalized tokens paired with their vocabulary ids."""

    tokens: tuple[str, ...]
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.ids):
            raise ValueError("tokens and ids must have equal length")


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Bidirectional token <-> id map with a reserved special range.

    Real tokens receive ids in descending-frequency order starting at
    FIRST_TOKEN_ID. Sentinel and prefix ids never correspond to corpus tokens.
    """

    def __init__(self, tokens_by_rank: list[str]):
        self.id_to_token: list[str] = _special_tokens() + list(tokens_by_rank)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabularyError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def n_specials(self) -> int:
        return FIRST_TOKEN_ID

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise VocabularyError(f"id {i} out of range (vocab size {len(self)})")
            out.append(self.id_to_token[i])
        return out

    def prefix_id(self, prefix_token: str) -> int:
        try:
            return TASK_PREFIX_BASE + TASK_PREFIX_TOKENS.index(prefix_token)
        except ValueError:
            raise VocabularyError(f"unknown task prefix {prefix_token!r}")

    def to_text(self) -> str:
        """Canonical, platform-stable serialization (hashing and persistence)."""
        lines = ["#unilog-vocab v1"]
        lines.append("#specials " + " ".join(
            f"{t}={i}" for i, t in enumerate(self.id_to_token[:FIRST_TOKEN_ID])))
        for i in range(FIRST_TOKEN_ID, len(self.id_to_token)):
            lines.append(f"{self.id_to_token[i]}\t{i}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if not lines or lines[0] != "#unilog-vocab v1":
            raise VocabularyError(f"{path}: not a unilog vocabulary file")
        toks = []
        for line in lines[1:]:
            if not line or line.startswith("#"):
                continue
            tok, _, idx = line.partition("\t")
            if not idx:
                raise VocabularyError(f"{path}: malformed line {line!r}")
            if int(idx) != FIRST_TOKEN_ID + len(toks):
                raise VocabularyError(f"{path}: non-contiguous id {idx}")
            toks.append(tok)
        return cls(toks)


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Count tokens across an iterable of token lists and build the vocabulary."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for tokens in corpus:
        for t in tokens:
            counts[t] = counts.get(t, 0) + 1
    specials = set(_special_tokens())
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in specials),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(ranked)
