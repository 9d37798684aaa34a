import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmtd.kvformat import KvError, format_kv, parse_kv
from fmtd.rng import derive_seed, generator


def test_derive_seed_deterministic():
    assert derive_seed(42, "fork", 3) == derive_seed(42, "fork", 3)
    assert derive_seed(42, "fork", 3) != derive_seed(42, "fork", 4)
    assert derive_seed(42, "fork", 3) != derive_seed(43, "fork", 3)
    assert derive_seed(42, "a") != derive_seed(42, "b")


@given(st.integers(0, 2**64 - 1), st.integers(0, 1000))
def test_derived_streams_differ(master, index):
    a = generator(master, "x", index).random(4)
    b = generator(master, "x", index + 1).random(4)
    assert list(a) != list(b)


def test_kv_round_trip():
    pairs = {"a.b": "1", "c": "hello world", "d.e.f": "0.25"}
    assert parse_kv(format_kv(pairs)) == pairs


def test_kv_comments_and_blanks():
    text = "# header\n\na = 1  # trailing\n  b.c =  2 \n"
    assert parse_kv(text) == {"a": "1", "b.c": "2"}


@pytest.mark.parametrize("bad", ["just words\n", "= no key\n"])
def test_kv_rejects_malformed(bad):
    with pytest.raises(KvError):
        parse_kv(bad)
