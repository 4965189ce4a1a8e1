import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdoq import entropycodec as ec


def logistic_table(scale=2.0, lo=-20, hi=20, rows=1):
    cdf = lambda r, v: 1.0 / (1.0 + np.exp(-np.asarray(v) / (scale * (r + 1))))
    return ec.build_cdf(cdf, [lo] * rows, [hi] * rows)


def roundtrip(symbols, table, rows=None):
    stream = ec.encode(symbols, table, rows)
    return ec.decode(ec.Bitstream.from_bytes(stream.to_bytes()), table, len(symbols), rows), stream


# tables ---------------------------------------------------------------------------
def test_uniform_table_frequencies():
    t = ec.build_cdf_from_pmf([np.ones(256)], [0], escape=False)
    assert np.all(t.frequencies(0) == 256)


def test_point_mass_table():
    p = np.zeros(10)
    p[3] = 1.0
    freqs = ec.build_cdf_from_pmf([p], [0], escape=False).frequencies(0)
    assert freqs[3] == ec.TOTAL - 9
    assert np.all(np.delete(freqs, 3) == 1)


def test_table_kl_is_small_for_smooth_model():
    ks = np.arange(-40, 41)
    cdf = lambda v: 1.0 / (1.0 + np.exp(-v / 4.0))
    p = cdf(ks + 0.5) - cdf(ks - 0.5)
    p = p / p.sum()
    q = ec.build_cdf_from_pmf([p], [-40], escape=False).frequencies(0) / ec.TOTAL
    assert float(np.sum(p * np.log2(p / q))) <= 1e-3


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=300))
def test_quantized_pmf_invariants(p):
    f = ec.quantize_pmf(np.array(p))
    assert f.sum() == ec.TOTAL and f.min() >= 1


def test_cdf_table_rejects_bad_cumulatives():
    with pytest.raises(ValueError):
        ec.CdfTable([np.array([0, 5, 5, ec.TOTAL])], [0])
    with pytest.raises(ValueError):
        ec.CdfTable([np.array([0, 10])], [0])


# coding ---------------------------------------------------------------------------
def test_empty_stream():
    table = logistic_table()
    stream = ec.encode([], table, width=0, height=0)
    assert stream.payload == b""
    assert ec.decode(ec.Bitstream.from_bytes(stream.to_bytes()), table, 0).size == 0


def test_ten_thousand_random_symbols_round_trip():
    rng = np.random.default_rng(0)
    table = logistic_table(rows=4)
    symbols = np.round(rng.logistic(0, 3, 10_000)).astype(np.int64)
    symbols[::997] = rng.integers(-3000, 3000, symbols[::997].size)  # force escapes
    rows = rng.integers(0, 4, symbols.size)
    out, _ = roundtrip(symbols, table, rows)
    assert np.array_equal(out, symbols)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-40, 40), max_size=200), st.floats(0.3, 10.0))
def test_round_trip_property(symbols, scale):
    table = logistic_table(scale)
    out, _ = roundtrip(np.array(symbols, dtype=np.int64), table)
    assert out.tolist() == symbols


def test_near_deterministic_source_costs_little():
    p = np.full(8, 0.001 / 7)
    p[0] = 0.999
    table = ec.build_cdf_from_pmf([p], [0], escape=False)
    symbols = np.zeros(20_000, dtype=np.int64)
    symbols[::1000] = 3
    _, stream = roundtrip(symbols, table)
    assert 8 * len(stream.payload) / symbols.size < 0.05


def test_payload_close_to_ideal_code_length():
    rng = np.random.default_rng(1)
    table = logistic_table(rows=3)
    for _ in range(10):
        symbols = np.round(rng.logistic(0, 2, 2000)).astype(np.int64)
        rows = rng.integers(0, 3, symbols.size)
        ideal = table.bits(symbols, rows)
        actual = 8 * len(ec.encode(symbols, table, rows).payload)
        assert abs(actual - ideal) <= 0.02 * ideal + 128


def test_encoding_is_repeatable():
    rng = np.random.default_rng(2)
    symbols = np.round(rng.logistic(0, 2, 3000)).astype(np.int64)
    table = logistic_table()
    assert ec.encode(symbols, table).to_bytes() == ec.encode(symbols, table).to_bytes()


def test_symbol_outside_table_without_escape_raises():
    table = ec.build_cdf_from_pmf([np.ones(4)], [0], escape=False)
    with pytest.raises(ValueError):
        ec.encode([7], table)


# bitstream container ---------------------------------------------------------------
def test_header_parses_without_payload():
    stream = ec.Bitstream(64, 32, 3, b"ABCDEFGH", 8, b"\x01\x02\x03")
    raw = stream.to_bytes()
    head = ec.Bitstream.parse_header(raw[:ec.HEADER_SIZE])
    assert (head.width, head.height, head.lambda_index, head.model_digest, head.bit_width) == \
        (64, 32, 3, b"ABCDEFGH", 8)
    assert ec.Bitstream.from_bytes(raw).payload == b"\x01\x02\x03"


def test_corrupt_streams_are_rejected():
    rng = np.random.default_rng(3)
    table = logistic_table()
    symbols = np.round(rng.logistic(0, 2, 500)).astype(np.int64)
    raw = bytearray(ec.encode(symbols, table).to_bytes())
    with pytest.raises(ec.DecodeError):
        ec.Bitstream.from_bytes(bytes(raw[:-3]))
    flipped = bytearray(raw)
    flipped[ec.HEADER_SIZE + 2] ^= 0x40
    with pytest.raises(ec.DecodeError):
        ec.Bitstream.from_bytes(bytes(flipped))
    with pytest.raises(ec.DecodeError):
        ec.Bitstream.parse_header(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(ec.DecodeError):
        ec.Bitstream.parse_header(bytes(raw[:5]))


def test_truncated_payload_detected_by_decoder():
    rng = np.random.default_rng(4)
    table = logistic_table()
    symbols = np.round(rng.logistic(0, 4, 800)).astype(np.int64)
    stream = ec.encode(symbols, table)
    stream.payload = stream.payload[: len(stream.payload) // 2]
    with pytest.raises(ec.DecodeError):
        ec.decode(stream, table, symbols.size)


def test_ideal_bits_of_simple_tables():
    t = ec.build_cdf_from_pmf([np.ones(2)], [0], escape=False)
    assert t.bits(np.zeros(100, dtype=np.int64)) == pytest.approx(100.0)
    t = ec.build_cdf_from_pmf([np.ones(256)], [0], escape=False)
    assert t.bits(np.array([17])) == pytest.approx(8.0)
    assert math.isfinite(logistic_table().bits(np.array([5000])))
