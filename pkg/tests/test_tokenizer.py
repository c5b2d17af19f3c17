import pytest
from hypothesis import given
from hypothesis import strategies as st

from repoctx.tokenizer import ApproxTokenizer, count_tokens, get_tokenizer


def test_counts_word_runs_and_punctuation():
    tok = ApproxTokenizer()
    assert tok.count("") == 0
    assert tok.count("power") == 2  # 5 chars -> ceil(5/4)
    assert tok.count("power(x, 2)") == 2 + 1 + 1 + 1 + 1 + 1
    assert count_tokens("a b") == 2


def test_calibration_scales_up():
    assert get_tokenizer("approx:1.5").count("abcd abcd") == 3
    with pytest.raises(ValueError):
        get_tokenizer("nope")


@given(st.text(max_size=200), st.text(max_size=200))
def test_appending_never_lowers_count(a, b):
    tok = ApproxTokenizer()
    assert tok.count(a + b) >= tok.count(a) - 1  # a split word run may merge across the join
    assert tok.count(a + "\n" + b) >= tok.count(a)
