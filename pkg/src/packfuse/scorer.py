"""Token scorers: the interface fused models implement, plus desk-scale n-gram
and lookup-table language models.

Row convention used everywhere in packfuse: ``scorer.score(ids)`` returns an
array of shape ``(len(ids), V)`` whose row ``i`` holds the logits for the
token at position ``i + 1`` given ``ids[0..i]``. The last row therefore
predicts the token after the sequence. N-gram contexts that reach before
position 0 are padded with a reserved begin-of-sequence marker.
"""

from __future__ import annotations

import json
import math
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpus, EmptySequence, VocabMismatch

BOS_TOKEN = "<bos>"
# context padding marker; never a valid token id
BOS_PAD = -1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def vocab_hash(tokens: Sequence[str]) -> str:
    """FNV-1a 64-bit over the token strings joined with 0x1F, as 16 hex digits."""
    data = b"\x1f".join(tok.encode("utf-8") for tok in tokens)
    return f"{fnv1a_64(data):016x}"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    name: str | None = None
    id_of: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if len(tokens) < 2:
            raise ValueError("a vocabulary needs at least two tokens")
        id_of = {tok: i for i, tok in enumerate(tokens)}
        if len(id_of) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "id_of", id_of)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def hash(self) -> str:
        return vocab_hash(self.tokens)

    @property
    def vocab_id(self) -> str:
        return self.name or self.hash

    def sequence(self, ids: Iterable[int]) -> "TokenSequence":
        ids = tuple(int(i) for i in ids)
        size = len(self.tokens)
        for i in ids:
            if not 0 <= i < size:
                raise ValueError(f"token id {i} outside vocabulary of size {size}")
        return TokenSequence(ids, self.vocab_id)

    def to_json(self) -> dict:
        out = {"tokens": list(self.tokens)}
        if self.name is not None:
            out["name"] = self.name
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        return cls(tuple(doc["tokens"]), doc.get("name"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab_id: str

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TokenSequence(self.ids[item], self.vocab_id)
        return self.ids[item]


def byte_vocabulary() -> Vocabulary:
    """256 byte tokens (as latin-1 characters) followed by a BOS token."""
    return Vocabulary(tuple(chr(b) for b in range(256)) + (BOS_TOKEN,), name="bytes")


class ByteTokenizer:
    def __init__(self):
        self.vocab = byte_vocabulary()

    def encode(self, text: str) -> TokenSequence:
        return TokenSequence(tuple(text.encode("utf-8")), self.vocab.vocab_id)

    def decode(self, seq: TokenSequence) -> str:
        return bytes(i for i in seq.ids if i < 256).decode("utf-8", errors="replace")


class GreedyTokenizer:
    """Longest-match tokenizer over an arbitrary vocabulary of strings.

    Characters no token covers map to ``<unk>`` when the vocabulary has one.
    """

    def __init__(self, vocab: Vocabulary, unk: str = "<unk>"):
        self.vocab = vocab
        self.unk_id = vocab.id_of.get(unk)
        self._max_len = max(len(t) for t in vocab.tokens)

    def encode(self, text: str) -> TokenSequence:
        ids = []
        pos = 0
        id_of = self.vocab.id_of
        while pos < len(text):
            for size in range(min(self._max_len, len(text) - pos), 0, -1):
                tok_id = id_of.get(text[pos:pos + size])
                if tok_id is not None:
                    ids.append(tok_id)
                    pos += size
                    break
            else:
                if self.unk_id is None:
                    raise ValueError(f"cannot tokenize {text[pos]!r}: no matching token and no <unk>")
                ids.append(self.unk_id)
                pos += 1
        return TokenSequence(tuple(ids), self.vocab.vocab_id)

    def decode(self, seq: TokenSequence) -> str:
        return "".join(self.vocab.tokens[i] for i in seq.ids)


def tokenizer_for(vocab: Vocabulary):
    if vocab.tokens == byte_vocabulary().tokens:
        return ByteTokenizer()
    return GreedyTokenizer(vocab)


class TokenScorer(ABC):
    """Anything that maps a token sequence to per-position logits."""

    name: str
    vocab: Vocabulary

    @property
    def vocab_id(self) -> str:
        return self.vocab.vocab_id

    @abstractmethod
    def score(self, ids: Sequence[int]) -> np.ndarray:
        """Return a ``(len(ids), V)`` float64 array; row i predicts token i+1."""


def score_sequence(scorer: TokenScorer, seq: TokenSequence) -> np.ndarray:
    if seq.vocab_id != scorer.vocab_id:
        raise VocabMismatch(f"sequence over {seq.vocab_id!r}, scorer {scorer.name!r} uses {scorer.vocab_id!r}")
    if len(seq) == 0:
        raise EmptySequence("cannot score an empty sequence")
    return scorer.score(seq.ids)


class NgramModel(TokenScorer):
    """Add-k smoothed n-gram model; logits are natural-log probabilities."""

    def __init__(self, name: str, vocab: Vocabulary, n: int, k: float,
                 counts: dict[tuple[int, ...], dict[int, int]]):
        if n < 1:
            raise ValueError("n-gram order must be >= 1")
        if not k > 0:
            raise ValueError("smoothing constant k must be positive")
        self.name = name
        self.vocab = vocab
        self.n = n
        self.k = float(k)
        self.counts = {ctx: dict(nxt) for ctx, nxt in counts.items()}
        self._totals = {ctx: sum(nxt.values()) for ctx, nxt in self.counts.items()}
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    def context(self, ids: Sequence[int], i: int) -> tuple[int, ...]:
        """Context used to predict position ``i`` (the n-1 preceding ids, BOS padded)."""
        width = self.n - 1
        if width == 0:
            return ()
        start = i - width
        if start >= 0:
            return tuple(ids[start:i])
        return (BOS_PAD,) * (-start) + tuple(ids[0:i])

    def log_probs(self, ctx: tuple[int, ...]) -> np.ndarray:
        row = self._rows.get(ctx)
        if row is None:
            size = len(self.vocab)
            num = np.full(size, self.k)
            for tok, c in self.counts.get(ctx, {}).items():
                num[tok] += c
            denom = self._totals.get(ctx, 0) + self.k * size
            row = np.log(num) - math.log(denom)
            row.flags.writeable = False
            self._rows[ctx] = row
        return row

    def score(self, ids: Sequence[int]) -> np.ndarray:
        ids = list(ids)
        out = np.empty((len(ids), len(self.vocab)))
        for i in range(len(ids)):
            out[i] = self.log_probs(self.context(ids, i + 1))
        return out

    def to_json(self) -> dict:
        rows = []
        for ctx in sorted(self.counts):
            for tok in sorted(self.counts[ctx]):
                rows.append([list(ctx), tok, self.counts[ctx][tok]])
        return {
            "format": "packfuse-ngram",
            "version": 1,
            "name": self.name,
            "n": self.n,
            "k": self.k,
            "vocab": self.vocab.to_json(),
            "counts": rows,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NgramModel":
        if doc.get("format") != "packfuse-ngram":
            raise ValueError("not a packfuse n-gram model file")
        counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
        for ctx, tok, c in doc["counts"]:
            counts[tuple(ctx)][int(tok)] = int(c)
        return cls(doc["name"], Vocabulary.from_json(doc["vocab"]), int(doc["n"]), float(doc["k"]), counts)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NgramModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def train_ngram(corpus, vocab: Vocabulary, n: int = 2, k: float = 1.0, name: str = "ngram") -> NgramModel:
    """Count every length-n window of ``corpus``.

    ``corpus`` is either one token stream (ints or a TokenSequence) or an
    iterable of documents; each document is BOS padded independently.
    """
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    if not k > 0:
        raise ValueError("smoothing constant k must be positive")
    docs = _as_documents(corpus)
    size = len(vocab)
    counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    seen = 0
    for doc in docs:
        ids = list(doc.ids) if isinstance(doc, TokenSequence) else [int(i) for i in doc]
        if isinstance(doc, TokenSequence) and doc.vocab_id != vocab.vocab_id:
            raise VocabMismatch(f"corpus over {doc.vocab_id!r}, expected {vocab.vocab_id!r}")
        padded = [BOS_PAD] * (n - 1) + ids
        for j in range(n - 1, len(padded)):
            tok = padded[j]
            if not 0 <= tok < size:
                raise ValueError(f"token id {tok} outside vocabulary of size {size}")
            counts[tuple(padded[j - n + 1:j])][tok] += 1
            seen += 1
    if seen == 0:
        raise EmptyCorpus("training corpus has no tokens")
    return NgramModel(name, vocab, n, k, {ctx: dict(c) for ctx, c in counts.items()})


def _as_documents(corpus) -> list:
    if isinstance(corpus, TokenSequence):
        return [corpus]
    corpus = list(corpus)
    if corpus and isinstance(corpus[0], (int, np.integer)):
        return [corpus]
    return corpus


class TableModel(TokenScorer):
    """Position-independent lookup table of logits.

    A single-row table gives the same logits everywhere; otherwise the row
    predicting position i+1 is ``table[ids[i] % rows]``.
    """

    def __init__(self, name: str, vocab: Vocabulary, table):
        table = np.array(table, dtype=np.float64, ndmin=2)
        if table.ndim != 2 or table.shape[1] != len(vocab):
            raise ValueError(f"table rows must have length {len(vocab)}")
        if not np.all(np.isfinite(table)):
            raise ValueError("table logits must be finite")
        table.flags.writeable = False
        self.name = name
        self.vocab = vocab
        self.table = table

    def score(self, ids: Sequence[int]) -> np.ndarray:
        idx = np.asarray(ids, dtype=np.int64) % self.table.shape[0]
        return self.table[idx].copy()

    def to_json(self) -> dict:
        return {
            "format": "packfuse-table",
            "version": 1,
            "name": self.name,
            "vocab": self.vocab.to_json(),
            "table": self.table.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict) -> "TableModel":
        if doc.get("format") != "packfuse-table":
            raise ValueError("not a packfuse table model file")
        return cls(doc["name"], Vocabulary.from_json(doc["vocab"]), doc["table"])


def load_model(path) -> TokenScorer:
    """Load an n-gram or table model file, dispatching on its ``format`` field."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    fmt = doc.get("format")
    if fmt == "packfuse-ngram":
        return NgramModel.from_json(doc)
    if fmt == "packfuse-table":
        return TableModel.from_json(doc)
    raise ValueError(f"{path}: unknown model format {fmt!r}")


class ScorerRegistry:
    """Binds scorer names to scorers and vocabulary ids to vocabularies."""

    def __init__(self):
        self._scorers: dict[str, TokenScorer] = {}
        self._vocabs: dict[str, Vocabulary] = {}

    def register(self, scorer: TokenScorer) -> TokenScorer:
        if scorer.name in self._scorers:
            raise ValueError(f"duplicate scorer name {scorer.name!r}")
        known = self._vocabs.get(scorer.vocab_id)
        if known is not None and known.tokens != scorer.vocab.tokens:
            raise VocabMismatch(f"two different vocabularies share the id {scorer.vocab_id!r}")
        self._vocabs[scorer.vocab_id] = scorer.vocab
        self._scorers[scorer.name] = scorer
        return scorer

    def __getitem__(self, name: str) -> TokenScorer:
        return self._scorers[name]

    def __iter__(self):
        return iter(self._scorers.values())

    def __len__(self) -> int:
        return len(self._scorers)

    @property
    def names(self) -> list[str]:
        return list(self._scorers)

    def vocab(self, vocab_id: str) -> Vocabulary:
        return self._vocabs[vocab_id]

    def shared_vocab(self) -> bool:
        return len(self._vocabs) <= 1
