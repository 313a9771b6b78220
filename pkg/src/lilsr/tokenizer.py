"""Uncased WordPiece tokenization over a BERT-style ``vocab.txt``."""

from __future__ import annotations

import unicodedata
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

UNK, CLS, SEP, PAD = "[UNK]", "[CLS]", "[SEP]", "[PAD]"
SPECIAL_TOKENS = (UNK, CLS, SEP, PAD)
CONTINUATION = "##"
MAX_WORD_CHARS = 100


class TokenizerVocab:
    """Token strings indexed by id, with the special-token ids resolved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        index = {}
        for i, tok in enumerate(tokens):
            if tok in index:
                raise ValueError(f"duplicate vocabulary token {tok!r} at lines {index[tok] + 1} and {i + 1}")
            index[tok] = i
        if UNK not in index:
            raise ValueError(f"vocabulary has no {UNK} token")
        self.tokens = tokens
        self._index = index
        self.unk_id = index[UNK]
        self.cls_id = index.get(CLS)
        self.sep_id = index.get(SEP)
        self.pad_id = index.get(PAD)

    @classmethod
    def from_file(cls, path) -> TokenizerVocab:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([line.rstrip("\r") for line in lines])

    def to_file(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index[token]

    def get(self, token: str, default=None):
        return self._index.get(token, default)

    @property
    def special_ids(self) -> list[int]:
        return [i for i in (self.unk_id, self.cls_id, self.sep_id, self.pad_id) if i is not None]


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    # ASCII symbols such as "$" and "^" count as punctuation, as in BERT
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _is_control(ch: str) -> bool:
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch) in ("Cc", "Cf")


def basic_split(text: str) -> list[str]:
    """Lowercase, NFC-normalize, split on whitespace, isolate punctuation."""
    text = unicodedata.normalize("NFC", text).lower()
    words: list[str] = []
    current: list[str] = []
    for ch in text:
        if ch == "�" or ord(ch) == 0 or _is_control(ch):
            continue
        if ch.isspace():
            if current:
                words.append("".join(current))
                current = []
        elif _is_punctuation(ch):
            if current:
                words.append("".join(current))
                current = []
            words.append(ch)
        else:
            current.append(ch)
    if current:
        words.append("".join(current))
    return words


def wordpiece(word: str, vocab: TokenizerVocab) -> list[int]:
    """Greedy longest-match split of one word; ``[UNK]`` if any piece fails."""
    if len(word) > MAX_WORD_CHARS:
        return [vocab.unk_id]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = CONTINUATION + sub
            found = vocab.get(sub)
            if found is not None:
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        pieces.append(found)
        start = end
    return pieces


def tokenize(text: str, vocab: TokenizerVocab) -> np.ndarray:
    """Token ids for ``text``; no sequence markers are added."""
    ids: list[int] = []
    for word in basic_split(text):
        ids.extend(wordpiece(word, vocab))
    return np.asarray(ids, dtype=np.int64)


def tokenize_all(texts: Iterable[str], vocab: TokenizerVocab) -> list[np.ndarray]:
    return [tokenize(t, vocab) for t in texts]
