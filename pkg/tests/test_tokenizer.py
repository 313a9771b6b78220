import pytest
from hypothesis import given
from hypothesis import strategies as st

from lilsr.tokenizer import TokenizerVocab, basic_split, tokenize, wordpiece

TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "hello", "play", "##ing", "##s", "world", ",", "!", "un", "##aff", "##able"]


@pytest.fixture
def vocab():
    return TokenizerVocab(TOKENS)


def ids(vocab, *toks):
    return [vocab.id(t) for t in toks]


def test_whole_word(vocab):
    assert tokenize("hello", vocab).tolist() == ids(vocab, "hello")


def test_unknown_word(vocab):
    assert tokenize("zebra", vocab).tolist() == ids(vocab, "[UNK]")


def test_greedy_longest_match(vocab):
    assert tokenize("playing", vocab).tolist() == ids(vocab, "play", "##ing")
    assert tokenize("unaffable", vocab).tolist() == ids(vocab, "un", "##aff", "##able")


def test_partial_match_falls_back_to_unk(vocab):
    # "play" matches but "##ed" does not, so the whole word is unknown
    assert tokenize("played", vocab).tolist() == ids(vocab, "[UNK]")


def test_lowercase_and_punctuation(vocab):
    assert tokenize("Hello, World!", vocab).tolist() == ids(vocab, "hello", ",", "world", "!")


def test_no_sequence_markers(vocab):
    out = tokenize("hello world", vocab).tolist()
    assert vocab.cls_id not in out and vocab.sep_id not in out


def test_empty_text(vocab):
    assert tokenize("", vocab).size == 0
    assert tokenize("   \t ", vocab).size == 0


def test_overlong_word(vocab):
    assert wordpiece("a" * 101, vocab) == [vocab.unk_id]


def test_basic_split():
    assert basic_split("It's  a\ttest.") == ["it", "'", "s", "a", "test", "."]
    assert basic_split("café") == ["café"]


def test_special_ids(vocab):
    assert sorted(vocab.special_ids) == [0, 1, 2, 3]


def test_vocab_validation():
    with pytest.raises(ValueError):
        TokenizerVocab(["a", "b"])
    with pytest.raises(ValueError):
        TokenizerVocab(["[UNK]", "a", "a"])


def test_vocab_file_round_trip(vocab, tmp_path):
    vocab.to_file(tmp_path / "vocab.txt")
    back = TokenizerVocab.from_file(tmp_path / "vocab.txt")
    assert back.tokens == TOKENS
    assert back.id("##ing") == 6


@given(st.text(max_size=60))
def test_deterministic_and_in_range(text):
    v = TokenizerVocab(TOKENS)
    a, b = tokenize(text, v), tokenize(text, v)
    assert a.tolist() == b.tolist()
    assert all(0 <= i < len(v) for i in a.tolist())
