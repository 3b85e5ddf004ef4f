"""Word-level toy tokenizer with reserved special tokens.

Text is split into pre-tokens: a word or punctuation mark optionally carrying
one leading space.  A pre-token found in the vocabulary becomes one id; any
other pre-token falls back to single characters, and characters outside the
alphabet become UNK.  Leading spaces are stored as ``▁`` in the vocabulary
file so every token fits on one line.
"""

from __future__ import annotations

import re
import string
from pathlib import Path
from typing import Iterable, List, Sequence

PAD, BOS, STOP, IMAGE, UNK = "<pad>", "<bos>", "<stop>", "<image>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, STOP, IMAGE, UNK)
PAD_ID, BOS_ID, STOP_ID, IMAGE_ID, UNK_ID = range(5)

SPACE_MARK = "▁"
REPLACEMENT = "�"
ALPHABET = string.ascii_letters + string.digits + " .,?!:;'-"

_PRETOKEN = re.compile(r" ?[A-Za-z0-9]+| ?[^\sA-Za-z0-9]|\s")


def pretokenize(text: str) -> List[str]:
    return _PRETOKEN.findall(text)


def _to_file_form(tok: str) -> str:
    return SPACE_MARK + tok[1:] if tok.startswith(" ") else tok


def _from_file_form(tok: str) -> str:
    return " " + tok[1:] if tok.startswith(SPACE_MARK) else tok


class Vocabulary:
    """Immutable token table; ids are dense and the five specials come first."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(pretokenize(text))
        chars = set(ALPHABET)
        body = sorted(chars | words)
        return cls(list(SPECIAL_TOKENS) + body)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_from_file_form(line) for line in lines])

    def save(self, path) -> None:
        Path(path).write_text("".join(_to_file_form(t) + "\n" for t in self._tokens), encoding="utf-8")

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self):
        return self._tokens

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def encode(self, text: str) -> List[int]:
        ids = []
        for piece in pretokenize(text):
            tid = self._ids.get(piece)
            if tid is not None and tid >= len(SPECIAL_TOKENS):
                ids.append(tid)
                continue
            for ch in piece:
                cid = self._ids.get(ch)
                ids.append(cid if cid is not None and cid >= len(SPECIAL_TOKENS) else UNK_ID)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        n = len(self._tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise IndexError(f"token id {i} outside vocabulary of size {n}")
            out.append(REPLACEMENT if i == UNK_ID else self._tokens[i])
        return "".join(out)
