"""Deterministic range coder, CDF tables and the bitstream container.

The coder is a carry-less (Subbotin-style) range coder on a 64-bit state
with 16-bit frequency precision.  Symbols outside a table's range are sent
as an escape symbol followed by a raw 16-bit value.
"""
from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION

_STATE_BITS = 64
_MASK = (1 << _STATE_BITS) - 1
_TOP = 1 << (_STATE_BITS - 8)
_BOT = 1 << (_STATE_BITS - 16)

RAW_BITS = 16
RAW_OFFSET = 1 << (RAW_BITS - 1)


class DecodeError(ValueError):
    """The bitstream is malformed or corrupt."""


def quantize_pmf(pmf: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total``, each at least 1.

    Every slot gets one count; the remaining ``total - n`` counts are shared
    out by largest remainder.
    """
    p = np.clip(np.asarray(pmf, dtype=np.float64), 0, None)
    n = p.size
    if n == 0 or n > total:
        raise ValueError("table must have between 1 and total symbols")
    s = p.sum()
    p = np.full(n, 1.0 / n) if s <= 0 else p / s
    spare = total - n
    ideal = p * spare
    base = np.floor(ideal).astype(np.int64)
    left = spare - int(base.sum())
    if left:
        order = np.lexsort((np.arange(n), -(ideal - base)))
        base[order[:left]] += 1
    return base + 1


@dataclass
class CdfTable:
    """Per-row cumulative frequency tables.

    ``cdfs[r]`` has one more entry than row ``r`` has slots, starts at 0 and
    ends at ``TOTAL``.  Row ``r`` covers the integers ``offsets[r]`` onward;
    when ``escape`` is set its last slot is the escape symbol.
    """

    cdfs: list
    offsets: np.ndarray
    escape: bool = True
    _lists: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        self.cdfs = [np.asarray(c, dtype=np.int64) for c in self.cdfs]
        if len(self.cdfs) != self.offsets.size:
            raise ValueError("one offset per row required")
        for c in self.cdfs:
            if c[0] != 0 or c[-1] != TOTAL or np.any(np.diff(c) <= 0):
                raise ValueError("cumulative table must be strictly increasing from 0 to TOTAL")
        self._lists = [c.tolist() for c in self.cdfs]

    @property
    def rows(self) -> int:
        return len(self.cdfs)

    def slots(self, row: int) -> int:
        return len(self._lists[row]) - 1

    def symbol_range(self, row: int) -> tuple[int, int]:
        n = self.slots(row) - (1 if self.escape else 0)
        lo = int(self.offsets[row])
        return lo, lo + n - 1

    def escape_index(self, row: int) -> Optional[int]:
        return self.slots(row) - 1 if self.escape else None

    def frequencies(self, row: int) -> np.ndarray:
        return np.diff(self.cdfs[row])

    def bits(self, symbols: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
        """Ideal code length of ``symbols`` under this table, in bits."""
        symbols = np.asarray(symbols, dtype=np.int64).ravel()
        rows = np.zeros_like(symbols) if rows is None else np.asarray(rows, dtype=np.int64).ravel()
        total = 0.0
        for r in np.unique(rows):
            sel = symbols[rows == r]
            freqs = self.frequencies(int(r))
            lo, hi = self.symbol_range(int(r))
            inside = (sel >= lo) & (sel <= hi)
            total += float(-np.log2(freqs[sel[inside] - lo] / TOTAL).sum())
            n_out = int((~inside).sum())
            if n_out:
                if not self.escape:
                    raise ValueError("symbol outside table without escape")
                total += n_out * (RAW_BITS - np.log2(freqs[-1] / TOTAL))
        return total


def build_cdf_from_pmf(pmfs: Sequence[np.ndarray], offsets, escape: bool = True) -> CdfTable:
    """Tables from explicit probability vectors (escape mass last if ``escape``)."""
    cdfs = []
    for p in pmfs:
        freqs = quantize_pmf(p)
        cdfs.append(np.concatenate([[0], np.cumsum(freqs)]))
    return CdfTable(cdfs, offsets, escape)


def build_cdf(cdf_fn: Callable[[int, np.ndarray], np.ndarray], lo, hi, escape: bool = True) -> CdfTable:
    """Discretize continuous per-row CDFs onto the integers ``lo[r]..hi[r]``.

    ``cdf_fn(row, v)`` evaluates row ``row``'s CDF at the points ``v``.
    Symbol ``k`` gets mass ``F(k + 1/2) - F(k - 1/2)``; the escape slot gets
    both tails.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.int64))
    pmfs = []
    for r in range(lo.size):
        edges = np.arange(lo[r], hi[r] + 2, dtype=np.float64) - 0.5
        c = np.asarray(cdf_fn(r, edges), dtype=np.float64)
        mass = np.diff(c)
        if escape:
            mass = np.concatenate([mass, [c[0] + (1.0 - c[-1])]])
        pmfs.append(mass)
    return build_cdf_from_pmf(pmfs, lo, escape)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()
        self.count = 0

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = -self.low & (_BOT - 1)
            else:
                return
            self.out.append((self.low >> (_STATE_BITS - 8)) & 0xFF)
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK

    def encode_freq(self, cum: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        self.count += 1
        self._normalize()

    def encode(self, symbol: int, table: CdfTable, row: int = 0):
        cdf = table._lists[row]
        lo, hi = table.symbol_range(row)
        if lo <= symbol <= hi:
            i = symbol - lo
            self.encode_freq(cdf[i], cdf[i + 1] - cdf[i])
            return
        esc = table.escape_index(row)
        if esc is None:
            raise ValueError(f"symbol {symbol} outside table range [{lo}, {hi}]")
        raw = symbol + RAW_OFFSET
        if not 0 <= raw < 1 << RAW_BITS:
            raise ValueError(f"symbol {symbol} cannot be escape-coded in {RAW_BITS} bits")
        self.encode_freq(cdf[esc], cdf[esc + 1] - cdf[esc])
        self.encode_freq(raw, 1)

    def finish(self) -> bytes:
        """Flush the fewest bytes that still pin a value inside the final interval."""
        if self.count == 0:
            return bytes(self.out)
        for n in range(0, _STATE_BITS // 8 + 1):
            unit = 1 << (_STATE_BITS - 8 * n)
            v = -(-self.low // unit) * unit
            if v < self.low + self.range and v <= _MASK:
                for k in range(n):
                    self.out.append((v >> (_STATE_BITS - 8 * (k + 1))) & 0xFF)
                break
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(_STATE_BITS // 8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def _normalize(self):
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = -self.low & (_BOT - 1)
            else:
                return
            self.code = ((self.code << 8) | self._byte()) & _MASK
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK

    def _target(self) -> tuple[int, int]:
        r = self.range >> PRECISION
        v = (self.code - self.low) // r
        if v < 0 or v >= TOTAL:
            raise DecodeError("code value outside the coding interval")
        return r, v

    def _consume(self, r: int, cum: int, freq: int):
        self.low += r * cum
        self.range = r * freq
        self._normalize()

    def decode(self, table: CdfTable, row: int = 0) -> int:
        cdf = table._lists[row]
        r, v = self._target()
        i = bisect.bisect_right(cdf, v) - 1
        self._consume(r, cdf[i], cdf[i + 1] - cdf[i])
        if table.escape and i == table.escape_index(row):
            r, raw = self._target()
            self._consume(r, raw, 1)
            return raw - RAW_OFFSET
        return int(table.offsets[row]) + i

    def overrun(self) -> int:
        """Bytes read beyond the end of the payload, excluding look-ahead."""
        return max(0, self.pos - _STATE_BITS // 8 - len(self.data))


def encode_symbols(symbols, table: CdfTable, rows=None, encoder: Optional[RangeEncoder] = None) -> RangeEncoder:
    """Append symbols to ``encoder`` (a fresh one if omitted)."""
    enc = encoder or RangeEncoder()
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    rows = np.zeros_like(symbols) if rows is None else np.asarray(rows, dtype=np.int64).ravel()
    if rows.size != symbols.size:
        raise ValueError("one row index per symbol required")
    for s, r in zip(symbols.tolist(), rows.tolist()):
        enc.encode(s, table, r)
    return enc


def decode_symbols(decoder: RangeDecoder, table: CdfTable, count: int, rows=None) -> np.ndarray:
    rows = np.zeros(count, dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64).ravel()
    if rows.size != count:
        raise ValueError("one row index per symbol required")
    return np.array([decoder.decode(table, r) for r in rows.tolist()], dtype=np.int64)


# bitstream container ---------------------------------------------------------
_MAGIC = b"RDQB"
_VERSION = 1
_HEADER = struct.Struct("<4sBHHB8sBII")
HEADER_SIZE = _HEADER.size


@dataclass
class Bitstream:
    """Header plus entropy-coded payload.

    ``bit_width`` is 0 for a float model, else the quantized bit width.
    """

    width: int
    height: int
    lambda_index: int
    model_digest: bytes
    bit_width: int
    payload: bytes = b""

    def header_bytes(self) -> bytes:
        if len(self.model_digest) != 8:
            raise ValueError("model digest must be 8 bytes")
        return _HEADER.pack(_MAGIC, _VERSION, self.width, self.height, self.lambda_index,
                            self.model_digest, self.bit_width, len(self.payload),
                            zlib.crc32(self.payload) & 0xFFFFFFFF)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self.payload

    @classmethod
    def parse_header(cls, data: bytes) -> "Bitstream":
        """Parse only the header; the payload is left empty."""
        if len(data) < HEADER_SIZE:
            raise DecodeError("truncated header")
        magic, version, w, h, lam_idx, digest, bits, _, _ = _HEADER.unpack_from(data)
        if magic != _MAGIC or version != _VERSION:
            raise DecodeError("not an RDQB v1 bitstream")
        return cls(w, h, lam_idx, digest, bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        bs = cls.parse_header(data)
        _, _, _, _, _, _, _, length, crc = _HEADER.unpack_from(data)
        payload = bytes(data[HEADER_SIZE:])
        if len(payload) != length:
            raise DecodeError("payload length does not match header")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise DecodeError("payload checksum mismatch")
        bs.payload = payload
        return bs


def encode(symbols, table: CdfTable, rows=None, *, width: int = 0, height: int = 0,
           lambda_index: int = 0, model_digest: bytes = b"\0" * 8, bit_width: int = 0) -> Bitstream:
    enc = encode_symbols(symbols, table, rows)
    return Bitstream(width, height, lambda_index, model_digest, bit_width, enc.finish())


def decode(stream: Bitstream, table: CdfTable, count: int, rows=None) -> np.ndarray:
    if count == 0:
        if stream.payload:
            raise DecodeError("payload present for an empty symbol list")
        return np.zeros(0, dtype=np.int64)
    dec = RangeDecoder(stream.payload)
    out = decode_symbols(dec, table, count, rows)
    if dec.overrun() > 0:
        raise DecodeError("decoder ran past the end of the payload")
    return out
