from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ternsim.exceptions import InvalidCode, InvalidPackedByte, ShapeMismatch
from ternsim.trit_codec import (
    N_PACKED_CODES, Packing, PackedTritStream, TritTensor, UNPACK_LUT, bytes_per_row, decode_2bit,
    decode_tensor, encode_2bit, encode_tensor, format_trit_text, pack_trits, parse_trit_text, read_packed,
    traffic_ratio, traffic_reduction, unpack_byte, unpack_trits, write_packed,
)

trit_lists = st.lists(st.sampled_from([-1, 0, 1]), max_size=200)


@pytest.mark.parametrize("t, code", [(1, 0b01), (0, 0b00), (-1, 0b11)])
def test_2bit_codes(t, code):
    assert encode_2bit(t) == code
    assert decode_2bit(code) == t


def test_2bit_invalid():
    with pytest.raises(InvalidCode):
        decode_2bit(0b10)
    with pytest.raises(ValueError):
        encode_2bit(2)


@pytest.mark.parametrize("trits, byte", [([-1] * 5, 0), ([0] * 5, 121), ([1] * 5, 242)])
def test_pack_known_bytes(trits, byte):
    assert pack_trits(trits).data == bytes([byte])
    assert unpack_byte(byte) == tuple(trits)


def test_lsb_first_digit_order():
    assert pack_trits([1, -1, -1, -1, -1]).data == bytes([2])
    assert pack_trits([-1, 1, -1, -1, -1]).data == bytes([6])


def test_invalid_packed_byte():
    with pytest.raises(InvalidPackedByte):
        unpack_byte(250)
    with pytest.raises(InvalidPackedByte):
        PackedTritStream(bytes([243]), 5)


def test_all_243_codes_roundtrip():
    assert UNPACK_LUT.shape == (N_PACKED_CODES, 5)
    for b in range(N_PACKED_CODES):
        assert pack_trits(unpack_byte(b)).data == bytes([b])


def test_empty_stream():
    s = pack_trits([])
    assert s.data == b"" and s.trit_count == 0
    assert unpack_trits(s).size == 0


def test_partial_group_pads_with_zero():
    s = pack_trits([1, -1])
    assert len(s.data) == 1
    assert unpack_byte(s.data[0]) == (1, -1, 0, 0, 0)
    assert unpack_trits(s).tolist() == [1, -1]


def test_pack_rejects_non_trits():
    with pytest.raises(ValueError):
        pack_trits([0, 2])


@given(trit_lists)
def test_roundtrip_property(trits):
    s = pack_trits(trits)
    assert len(s.data) == -(-len(trits) // 5)
    assert unpack_trits(s).tolist() == trits


def test_density_and_reduction():
    assert traffic_ratio(Packing.FIVE_TRIT_BYTE) == Fraction(8, 5)
    assert traffic_ratio(Packing.TWO_BIT) == 2
    assert traffic_reduction() == Fraction(1, 5)
    assert pack_trits([0] * 10).bits_per_trit == Fraction(8, 5)


def test_tensor_file_roundtrip(tmp_path, rng):
    w = TritTensor.random(7, 13, rng=rng)
    blob = encode_tensor(w)
    assert len(blob) == 16 + 7 * bytes_per_row(13)
    assert np.array_equal(decode_tensor(blob).data, w.data)
    path = tmp_path / "w.tpk"
    write_packed(path, w)
    assert np.array_equal(read_packed(path).data, w.data)


def test_tensor_file_errors(rng):
    blob = encode_tensor(TritTensor.random(2, 5, rng=rng))
    with pytest.raises(ValueError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        decode_tensor(blob[:-1])
    with pytest.raises(ValueError):
        decode_tensor(blob[:10])


def test_text_format_roundtrip(rng):
    w = TritTensor.random(3, 4, rng=rng)
    text = format_trit_text(w)
    assert np.array_equal(parse_trit_text("# comment\n" + text).data, w.data)


def test_trit_tensor_validation():
    with pytest.raises(ShapeMismatch):
        TritTensor(np.zeros(3))
    with pytest.raises(ValueError):
        TritTensor(np.array([[0.5]]))
    with pytest.raises(ValueError):
        TritTensor(np.array([[3]]))
