import math

import numpy as np
import pytest

from crcir.coder import (
    TOTAL,
    CdfSet,
    CdfTable,
    CodedBlock,
    build_gaussian_cdf,
    decode_bytes_adaptive,
    decode_symbols,
    encode_bytes_adaptive,
    encode_symbols,
    gaussian_cdfs,
    ideal_bits,
    logistic_cdfs,
    quantize_pmf,
)
from crcir.errors import DecodeError, InvalidInputError


def random_tables(rng, count, max_size=40):
    tables = []
    for _ in range(count):
        size = int(rng.integers(1, max_size))
        pmf = rng.dirichlet(np.full(size, 0.3))
        tables.append(CdfTable(int(rng.integers(-20, 20)), quantize_pmf(pmf)[0]))
    return tables


def sample(rng, table, n):
    m = table.masses()
    return table.offset + rng.choice(len(m), size=n, p=m / m.sum())


def uniform_table(bits):
    return CdfTable(0, np.arange(0, TOTAL + 1, TOTAL >> bits))


class TestCdfConstruction:
    def test_gaussian_centre_mass(self):
        t = build_gaussian_cdf(0.0, 1.0, -8, 8)
        p0 = math.erf(0.5 / math.sqrt(2))
        assert p0 == pytest.approx(0.382925, abs=1e-6)
        assert abs(int(t.masses()[8]) - round(p0 * TOTAL)) <= 1

    def test_symmetric(self):
        m = build_gaussian_cdf(0.0, 2.3, -10, 10).masses()
        np.testing.assert_array_equal(m, m[::-1])

    def test_floor_scale_positive_masses(self):
        t = build_gaussian_cdf(0.3, 1e-2, -30, 30)
        assert t.masses().min() >= 1 and t.cdf[-1] == TOTAL

    def test_empty_range(self):
        with pytest.raises(InvalidInputError):
            build_gaussian_cdf(0.0, 1.0, 3, 2)

    def test_table_invariants(self):
        with pytest.raises(InvalidInputError):
            CdfTable(0, np.array([0, 10, 10, TOTAL]))
        with pytest.raises(InvalidInputError):
            CdfTable(0, np.array([1, TOTAL]))

    def test_vectorised_matches_single(self):
        sig = np.array([0.05, 0.7, 3.0])
        cs = gaussian_cdfs(sig, -6, 6)
        for i, s in enumerate(sig):
            np.testing.assert_array_equal(cs.table(i).cdf, build_gaussian_cdf(0.0, s, -6, 6).cdf)

    def test_logistic_tails_absorbed(self):
        cs = logistic_cdfs([0.2], [1.5], -3, 3)
        m = cs.table(0).masses()
        assert m[0] > m[1] and m[-1] > m[-2]


class TestRoundTrip:
    def test_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            tables = random_tables(rng, int(rng.integers(1, 6)))
            n = int(rng.integers(0, 300))
            idx = rng.integers(0, len(tables), n)
            sym = np.array([sample(rng, tables[i], 1)[0] for i in idx], dtype=np.int64)
            cs = CdfSet.from_tables(tables)
            block = encode_symbols(sym, cs, idx)
            np.testing.assert_array_equal(decode_symbols(block.to_bytes(), cs, idx), sym)

    def test_empty_sequence(self):
        block = encode_symbols([], [])
        assert len(block.payload) <= 2
        assert decode_symbols(block, []).size == 0

    def test_single_symbol_alphabet(self):
        t = CdfTable(5, np.array([0, TOTAL]))
        block = encode_symbols([5] * 1000, [t] * 1000)
        assert len(block.payload) <= 2
        np.testing.assert_array_equal(decode_symbols(block, [t] * 1000), [5] * 1000)

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            encode_symbols([9], [uniform_table(2)])

    def test_table_count_mismatch(self):
        block = encode_symbols([1, 2], [uniform_table(2)] * 2)
        with pytest.raises((DecodeError, InvalidInputError)):
            decode_symbols(block, [uniform_table(2)] * 3)

    def test_truncation_detected(self):
        rng = np.random.default_rng(1)
        sym = rng.integers(0, 256, 2000)
        tables = [uniform_table(8)] * 2000
        block = encode_symbols(sym, tables)
        cut = CodedBlock(block.count, block.payload[:-5])
        with pytest.raises(DecodeError):
            decode_symbols(cut, tables)

    def test_trailing_bytes_detected(self):
        block = encode_symbols([1, 2, 3], [uniform_table(4)] * 3)
        with pytest.raises(DecodeError):
            decode_symbols(CodedBlock(3, block.payload + b"\x00\x00"), [uniform_table(4)] * 3)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        sym = rng.integers(-3, 4, 5000)
        cs = gaussian_cdfs(np.full(5000, 1.5), -4, 4)
        assert encode_symbols(sym, cs).payload == encode_symbols(sym.copy(), cs).payload


class TestEfficiency:
    def test_uniform_bytes(self):
        rng = np.random.default_rng(3)
        sym = rng.integers(0, 256, 100_000)
        cs = CdfSet.from_tables([uniform_table(8)])
        block = encode_symbols(sym, cs, np.zeros(len(sym), np.int64))
        assert abs(len(block.payload) - 100_000) <= 1000

    def test_bernoulli(self):
        rng = np.random.default_rng(4)
        sym = (rng.random(100_000) < 0.1).astype(np.int64)
        t = CdfTable(0, quantize_pmf([0.9, 0.1])[0])
        cs = CdfSet.from_tables([t])
        block = encode_symbols(sym, cs, np.zeros(len(sym), np.int64))
        h = -(0.9 * math.log2(0.9) + 0.1 * math.log2(0.1))
        assert h == pytest.approx(0.469, abs=1e-3)
        empirical = -(np.mean(sym) * math.log2(np.mean(sym)) + (1 - np.mean(sym)) * math.log2(1 - np.mean(sym)))
        bps = 8 * len(block.payload) / len(sym)
        assert abs(bps - h) / h <= 0.01 or abs(bps - empirical) / empirical <= 0.01

    def test_length_close_to_ideal(self):
        rng = np.random.default_rng(5)
        sig = rng.uniform(0.05, 5, 20_000)
        sym = np.clip(np.round(rng.normal(0, sig)), -20, 20).astype(np.int64)
        cs = gaussian_cdfs(sig, -20, 20)
        block = encode_symbols(sym, cs)
        assert len(block) * 8 <= ideal_bits(sym, cs) + 32 * 8


class TestAdaptive:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        data = bytes(rng.choice(8, 20_000, p=[0.5, 0.2, 0.1, 0.1, 0.05, 0.03, 0.01, 0.01]).astype(np.uint8))
        block = encode_bytes_adaptive(data)
        assert decode_bytes_adaptive(block.to_bytes()) == data
        assert len(block.payload) < len(data) * 0.5

    def test_empty(self):
        assert decode_bytes_adaptive(encode_bytes_adaptive(b"")) == b""

    def test_garbage(self):
        with pytest.raises(DecodeError):
            decode_bytes_adaptive(CodedBlock(100, b"\x01"))
