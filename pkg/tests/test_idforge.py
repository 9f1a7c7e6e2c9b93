import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import luhn_digit
from regisforge import idforge
from regisforge.errors import MalformedSequence, SequenceExhausted
from regisforge.idforge import (
    GeneratorState,
    IdGenerator,
    check_digit,
    check_digits,
    make_svid,
    next_svid,
    parse_svid,
    render_svid,
    validate_svid,
)

SEQ = st.integers(min_value=10**13, max_value=10**14 - 1)


def test_spec_examples():
    assert check_digit(10000000000000) == 8
    assert check_digit(10000000000001) == 7
    assert next_svid(GeneratorState(10000000000000)) == (GeneratorState(10000000000001), 100000000000008)
    assert next_svid(GeneratorState(10000000000001))[1] == 100000000000017
    assert validate_svid(100000000000008)
    assert not validate_svid(100000000000009)


def test_frozen_oracle_digits():
    # values from the string-based oracle
    assert [check_digit(10**13 + i) for i in range(6)] == [8, 7, 6, 5, 4, 3]
    assert check_digit(12345678901234) == 3
    assert check_digit(99999999999999) == 4


@given(SEQ)
def test_matches_oracle(seq):
    assert check_digit(seq) == luhn_digit(seq)


@given(st.lists(SEQ, min_size=1, max_size=50))
def test_vectorised_matches_scalar(seqs):
    got = check_digits(np.array(seqs, dtype=np.int64))
    assert got.tolist() == [check_digit(s) for s in seqs]


@given(SEQ, st.integers(0, 14), st.integers(1, 9))
def test_single_substitution_detected(seq, pos, delta):
    text = render_svid(make_svid(seq))
    digit = (int(text[pos]) + delta) % 10
    bad = text[:pos] + str(digit) + text[pos + 1:]
    assert not validate_svid(bad)


@pytest.mark.parametrize("bad", [None, "abc", 12, "10000000000000x", -100000000000008, 3.5,
                                 "00000000000000", 10**15 + 8, True])
def test_validate_never_raises(bad):
    assert validate_svid(bad) is False


def test_render_parse_roundtrip():
    s = make_svid(10**13 + 41)
    assert parse_svid(render_svid(s)) == s
    with pytest.raises(ValueError):
        parse_svid("100000000000009")


def test_generator_exhaustion():
    state = GeneratorState(10**14 - 1)
    state, last = next_svid(state)
    assert last == make_svid(10**14 - 1)
    with pytest.raises(SequenceExhausted):
        next_svid(state)


def test_malformed_state():
    with pytest.raises((MalformedSequence, ValueError)):
        GeneratorState(5)


def test_generator_persists_per_batch(tmp_path):
    path = tmp_path / "svid_seq.txt"
    gen = IdGenerator(path=path)
    a, b = gen.draw(), gen.draw()
    assert not path.exists()  # draws are in memory until committed
    gen.commit()
    assert path.read_text().strip() == str(10**13 + 2)
    again = IdGenerator(path=path)
    assert again.draw() > b > a


def test_state_file_corruption(tmp_path):
    path = tmp_path / "svid_seq.txt"
    path.write_text("12x\n")
    with pytest.raises(MalformedSequence):
        idforge.load_state(path)


def test_draw_batch_consecutive():
    gen = IdGenerator()
    first = gen.draw_batch(5)
    second = gen.draw_batch(3)
    prefixes = np.concatenate([first, second]) // 10
    assert prefixes.tolist() == list(range(10**13, 10**13 + 8))
    assert all(validate_svid(int(s)) for s in np.concatenate([first, second]))
