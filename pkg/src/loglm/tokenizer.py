"""Word- and character-level tokenization of authentication events."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import EventRecord

PAD = "<pad>"
OOV = "<oov>"
PAD_ID = 0
OOV_ID = 1
CHAR_RANGE = range(32, 127)
DEFAULT_MIN_COUNT = 10


class VocabularyError(ValueError):
    pass


@dataclass
class Vocabulary:
    mode: str  # "word" or "char"
    id_to_token: list[str]
    counts: list[int] = field(default_factory=list)
    delimiter: str = ","
    min_count: int = 1

    def __post_init__(self):
        if self.mode not in ("word", "char"):
            raise VocabularyError(f"unknown vocabulary mode {self.mode!r}")
        if self.id_to_token[PAD_ID] != PAD or self.id_to_token[OOV_ID] != OOV:
            raise VocabularyError("ids 0 and 1 are reserved for <pad> and <oov>")
        if not self.counts:
            self.counts = [0] * len(self.id_to_token)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabularyError("duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @property
    def oov_id(self) -> int:
        return OOV_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def lookup(self, token: str) -> int:
        idx = self.token_to_id.get(token, OOV_ID)
        return OOV_ID if idx == PAD_ID else idx

    def save(self, path: str | Path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#mode={self.mode}\tdelimiter={self.delimiter}\tmin_count={self.min_count}\n")
            for i, (tok, n) in enumerate(zip(self.id_to_token, self.counts)):
                fh.write(f"{tok}\t{i}\t{n}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if not header.startswith("#"):
                raise VocabularyError("missing vocabulary header row")
            meta = dict(item.split("=", 1) for item in header[1:].split("\t"))
            tokens: list[str] = []
            counts: list[int] = []
            for line in fh:
                tok, idx, n = line.rstrip("\n").split("\t")
                if int(idx) != len(tokens):
                    raise VocabularyError(f"non-contiguous id {idx}")
                tokens.append(tok)
                counts.append(int(n))
        return cls(meta["mode"], tokens, counts, meta.get("delimiter", ","), int(meta.get("min_count", 1)))


def build_word_vocab(events: Iterable[EventRecord], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Shared vocabulary over all token fields.

    Tokens below ``min_count`` are left out, so in training they read as
    ``<oov>`` and the model learns a nonzero probability for it. Ids are
    assigned by descending frequency, ties broken lexicographically.
    """
    if min_count < 1:
        raise VocabularyError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n_events = 0
    for ev in events:
        counts.update(ev.token_fields())
        n_events += 1
    if not n_events:
        raise VocabularyError("cannot build a vocabulary from an empty stream")
    kept = sorted((tok for tok, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    oov_count = sum(n for tok, n in counts.items() if n < min_count)
    return Vocabulary("word", [PAD, OOV] + kept, [0, oov_count] + [counts[t] for t in kept], min_count=min_count)


def build_char_vocab(delimiter: str = ",") -> Vocabulary:
    return Vocabulary("char", [PAD, OOV] + [chr(c) for c in CHAR_RANGE], delimiter=delimiter)


def tokenize_word(record: EventRecord, vocab: Vocabulary) -> np.ndarray:
    if vocab.mode != "word":
        raise VocabularyError("tokenize_word needs a word vocabulary")
    return np.array([vocab.lookup(tok) for tok in record.token_fields()], dtype=np.int64)


def render_char(record: EventRecord, delimiter: str = ",") -> str:
    return delimiter.join(record.token_fields())


def encode_chars(fields: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """Characters of ``fields`` joined by the delimiter; anything unprintable is ``<oov>``."""
    text = vocab.delimiter.join(fields)
    return np.array([vocab.lookup(ch) for ch in text], dtype=np.int64)


def tokenize_char(record: EventRecord, vocab: Vocabulary) -> np.ndarray:
    if vocab.mode != "char":
        raise VocabularyError("tokenize_char needs a char vocabulary")
    return encode_chars(record.token_fields(), vocab)


def tokenize(record: EventRecord, vocab: Vocabulary) -> np.ndarray:
    if vocab.mode == "word":
        return tokenize_word(record, vocab)
    return tokenize_char(record, vocab)
