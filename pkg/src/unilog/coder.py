"""Integer arithmetic coding: 32-bit low/high registers with pending-bit
renormalization, fixed 2^16 probability totals, and the deterministic
largest-remainder quantizer that turns model probabilities into counts.

Everything here is integer arithmetic, so encode and decode are bit-exact
whenever they are driven by the same probability sequence.
"""

from __future__ import annotations

import numpy as np

PRECISION_BITS = 32
FULL = 1 << PRECISION_BITS
HALF = FULL >> 1
QUARTER = FULL >> 2
MASK = FULL - 1

PMF_TOTAL_BITS = 16
PMF_TOTAL = 1 << PMF_TOTAL_BITS


class CodingError(ValueError):
    pass


class QuantizedPmf:
    """Integer counts over an explicit symbol support, summing to exactly 2^16
    with a per-symbol floor of 1."""

    def __init__(self, symbols: np.ndarray, counts: np.ndarray):
        self.symbols = np.asarray(symbols, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if (self.counts < 1).any():
            raise CodingError("every symbol needs a count >= 1")
        if int(self.counts.sum()) != PMF_TOTAL:
            raise CodingError(f"counts must total {PMF_TOTAL}")
        self.cum = np.zeros(len(self.counts) + 1, dtype=np.int64)
        np.cumsum(self.counts, out=self.cum[1:])
        self._index = {int(s): i for i, s in enumerate(self.symbols)}

    def interval(self, symbol: int) -> tuple[int, int]:
        """(cumulative low, cumulative high) of the symbol, in count units."""
        try:
            i = self._index[int(symbol)]
        except KeyError:
            raise CodingError(f"symbol {symbol} outside pmf support")
        return int(self.cum[i]), int(self.cum[i + 1])

    def locate(self, scaled: int) -> tuple[int, int, int]:
        """Symbol whose cumulative interval contains `scaled`."""
        i = int(np.searchsorted(self.cum, scaled, side="right")) - 1
        return int(self.symbols[i]), int(self.cum[i]), int(self.cum[i + 1])

    def bit_cost(self, symbol: int) -> float:
        lo, hi = self.interval(symbol)
        return float(-np.log2((hi - lo) / PMF_TOTAL))


def quantize_pmf(symbols, probs) -> QuantizedPmf:
    """Deterministic largest-remainder quantization of a probability vector to
    integer counts totalling 2^16, floor 1 per symbol."""
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if n < 1 or n > PMF_TOTAL:
        raise CodingError("support size out of range")
    probs = probs / probs.sum()
    ideal = probs * PMF_TOTAL
    counts = np.floor(ideal).astype(np.int64)
    remainder = ideal - counts
    deficit = PMF_TOTAL - int(counts.sum())
    if deficit > 0:
        # Ties break on the lower index for platform-stable output.
        order = np.lexsort((np.arange(n), -remainder))
        counts[order[:deficit]] += 1
    # Enforce the floor by taking from the largest counts.
    need = counts < 1
    shortfall = int((1 - counts[need]).sum())
    counts[need] = 1
    while shortfall > 0:
        i = int(counts.argmax())
        take = min(shortfall, int(counts[i]) - 1)
        counts[i] -= take
        shortfall -= take
    return QuantizedPmf(np.asarray(symbols), counts)


class BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._n = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._n += 1
        if self._n == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._n = 0

    @property
    def bit_length(self) -> int:
        return len(self._bytes) * 8 + self._n

    def getvalue(self) -> bytes:
        """Byte-aligned output; trailing bits padded with zeros."""
        out = bytearray(self._bytes)
        if self._n:
            out.append(self._acc << (8 - self._n))
        return bytes(out)


class BitReader:
    """Reads bits MSB-first; returns zeros past the end of the buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self) -> int:
        byte_i, bit_i = divmod(self._pos, 8)
        self._pos += 1
        if byte_i >= len(self._data):
            return 0
        return (self._data[byte_i] >> (7 - bit_i)) & 1


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = MASK
        self.pending = 0
        self.out = BitWriter()

    def _emit(self, bit: int) -> None:
        self.out.write(bit)
        other = bit ^ 1
        for _ in range(self.pending):
            self.out.write(other)
        self.pending = 0

    def encode(self, pmf: QuantizedPmf, symbol: int) -> None:
        lo, hi = pmf.interval(symbol)
        span = self.high - self.low + 1
        self.high = self.low + span * hi // PMF_TOTAL - 1
        self.low = self.low + span * lo // PMF_TOTAL
        while True:
            if self.high < HALF:
                self._emit(0)
            elif self.low >= HALF:
                self._emit(1)
                self.low -= HALF
                self.high -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.pending += 1
                self.low -= QUARTER
                self.high -= QUARTER
            else:
                break
            self.low = (self.low << 1) & MASK
            self.high = ((self.high << 1) | 1) & MASK

    def finish(self) -> bytes:
        self.pending += 1
        self._emit(0 if self.low < QUARTER else 1)
        return self.out.getvalue()


class ArithmeticDecoder:
    def __init__(self, data: bytes):
        self._bits = BitReader(data)
        self.low = 0
        self.high = MASK
        self.code = 0
        for _ in range(PRECISION_BITS):
            self.code = (self.code << 1) | self._bits.read()

    def decode(self, pmf: QuantizedPmf) -> int:
        span = self.high - self.low + 1
        scaled = ((self.code - self.low + 1) * PMF_TOTAL - 1) // span
        symbol, lo, hi = pmf.locate(scaled)
        self.high = self.low + span * hi // PMF_TOTAL - 1
        self.low = self.low + span * lo // PMF_TOTAL
        while True:
            if self.high < HALF:
                pass
            elif self.low >= HALF:
                self.low -= HALF
                self.high -= HALF
                self.code -= HALF
            elif self.low >= QUARTER and self.high < HALF + QUARTER:
                self.low -= QUARTER
                self.high -= QUARTER
                self.code -= QUARTER
            else:
                break
            self.low = (self.low << 1) & MASK
            self.high = ((self.high << 1) | 1) & MASK
            self.code = ((self.code << 1) | self._bits.read()) & MASK
        return symbol


def ac_encode(tokens, predictor) -> tuple[bytes, int]:
    """Arithmetic-code a symbol stream under a predictive model.

    predictor(prefix) -> QuantizedPmf for the next symbol. Returns the
    byte-aligned payload and the exact bit length before padding.
    """
    enc = ArithmeticEncoder()
    prefix: list[int] = []
    for t in tokens:
        enc.encode(predictor(prefix), int(t))
        prefix.append(int(t))
    if not prefix:
        return b"", 0
    payload = enc.finish()
    return payload, enc.out.bit_length


def ac_decode(payload: bytes, predictor, w: int) -> list[int]:
    """Inverse of ac_encode given the identical predictor and symbol count."""
    if w == 0:
        return []
    dec = ArithmeticDecoder(payload)
    prefix: list[int] = []
    for _ in range(w):
        prefix.append(dec.decode(predictor(prefix)))
    return prefix


def uniform_pmf(n_symbols: int) -> QuantizedPmf:
    return quantize_pmf(np.arange(n_symbols), np.full(n_symbols, 1.0 / n_symbols))


# ---- static order-0 byte coder (residual stream) ----

def byte_encode(raw: bytes) -> bytes:
    """Order-0 arithmetic coding of bytes under a quantized static frequency
    table stored in the header (256 little-endian u16 counts, count-1 each)."""
    if not raw:
        return b""
    freqs = np.bincount(np.frombuffer(raw, dtype=np.uint8), minlength=256).astype(np.float64)
    pmf = quantize_pmf(np.arange(256), np.maximum(freqs, 1e-9))
    header = (pmf.counts - 1).astype("<u2").tobytes()
    enc = ArithmeticEncoder()
    for b in raw:
        enc.encode(pmf, b)
    return header + enc.finish()


def byte_decode(data: bytes, n: int) -> bytes:
    if n == 0:
        return b""
    if len(data) < 512:
        raise CodingError("truncated byte-coder table")
    counts = np.frombuffer(data[:512], dtype="<u2").astype(np.int64) + 1
    pmf = QuantizedPmf(np.arange(256), counts)
    dec = ArithmeticDecoder(data[512:])
    return bytes(dec.decode(pmf) for _ in range(n))
