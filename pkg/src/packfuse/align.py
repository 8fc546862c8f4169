"""Minimum-edit-distance (MinED) alignment between tokenizer vocabularies."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, VocabMismatch
from .fusion import rank_by_ppl
from .scorer import TokenScorer, TokenSequence, Vocabulary


def edit_distance(a: str, b: str, limit: int | None = None) -> int:
    """Levenshtein distance with unit costs, over code points.

    With ``limit`` set, any result greater than ``limit`` is reported as
    ``limit + 1`` and the DP is abandoned as soon as that is certain.
    """
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if limit is not None and len(a) - len(b) > limit:
        return limit + 1
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        if limit is not None and min(cur) > limit:
            return limit + 1
        prev = cur
    d = prev[-1]
    if limit is not None and d > limit:
        return limit + 1
    return d


@dataclass(frozen=True)
class VocabMap:
    """``fwd[i]`` is the other-vocabulary id closest to reference token i.

    The same map reads logits back: entry i of a remapped logit vector is
    ``logits[fwd[i]]``, which keeps the result total over the reference vocabulary.
    """

    ref_vocab_id: str
    other_vocab_id: str
    fwd: np.ndarray
    other_size: int

    def __post_init__(self):
        fwd = np.asarray(self.fwd, dtype=np.int64)
        if fwd.ndim != 1 or len(fwd) == 0:
            raise ValueError("map must cover a non-empty reference vocabulary")
        if fwd.min() < 0 or fwd.max() >= self.other_size:
            raise ValueError("mapped id outside the other vocabulary")
        fwd.flags.writeable = False
        object.__setattr__(self, "fwd", fwd)

    @property
    def back(self) -> np.ndarray:
        return self.fwd

    @property
    def ref_size(self) -> int:
        return len(self.fwd)

    def to_json(self) -> dict:
        return {
            "ref": self.ref_vocab_id,
            "other": self.other_vocab_id,
            "other_size": self.other_size,
            "pairs": [[i, int(j)] for i, j in enumerate(self.fwd)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VocabMap":
        pairs = sorted(doc["pairs"])
        if [p[0] for p in pairs] != list(range(len(pairs))):
            raise ValueError("pairs must cover every reference id exactly once")
        fwd = [p[1] for p in pairs]
        other_size = int(doc.get("other_size", max(fwd) + 1))
        return cls(doc["ref"], doc["other"], np.array(fwd), other_size)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VocabMap":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def closest_token(token: str, other: Vocabulary) -> int:
    """Lowest-id token of ``other`` at minimal edit distance from ``token``."""
    exact = other.id_of.get(token)
    if exact is not None:
        return exact
    best_id, best = 0, None
    for j, cand in enumerate(other.tokens):
        if best is None:
            best, best_id = edit_distance(token, cand), j
        elif abs(len(cand) - len(token)) < best:
            d = edit_distance(token, cand, limit=best - 1)
            if d < best:
                best, best_id = d, j
        if best == 1:
            # 0 was ruled out by the exact-match lookup
            break
    return best_id


def build_vocab_map(ref: Vocabulary, other: Vocabulary) -> VocabMap:
    fwd = [closest_token(tok, other) for tok in ref.tokens]
    return VocabMap(ref.vocab_id, other.vocab_id, np.array(fwd), len(other))


def remap_sequence(seq: TokenSequence, vmap: VocabMap) -> TokenSequence:
    if seq.vocab_id != vmap.ref_vocab_id:
        raise VocabMismatch(f"sequence over {seq.vocab_id!r}, map expects {vmap.ref_vocab_id!r}")
    return TokenSequence(tuple(int(vmap.fwd[i]) for i in seq.ids), vmap.other_vocab_id)


def remap_logits(logits, vmap: VocabMap) -> np.ndarray:
    """Gather other-vocabulary logits (last axis) into reference-vocabulary order."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != vmap.other_size:
        raise DimensionMismatch(f"logits have {logits.shape[-1]} entries, other vocabulary {vmap.other_size}")
    return logits[..., vmap.back]


def select_reference(ppls: Sequence[float], vocab_ids: Sequence[str]) -> str:
    """Vocabulary of the lowest-perplexity model (ties: lowest index)."""
    if len(ppls) != len(vocab_ids) or not ppls:
        raise DimensionMismatch("need one vocabulary id per perplexity")
    return vocab_ids[rank_by_ppl(ppls)[0]]


class AlignedScorer(TokenScorer):
    """Presents a scorer over another vocabulary as a scorer over ``ref``."""

    def __init__(self, inner: TokenScorer, ref: Vocabulary, vmap: VocabMap | None = None):
        self.inner = inner
        self.name = inner.name
        self.vocab = ref
        self.vmap = vmap or build_vocab_map(ref, inner.vocab)
        if self.vmap.ref_vocab_id != ref.vocab_id or self.vmap.other_vocab_id != inner.vocab_id:
            raise VocabMismatch("vocabulary map does not connect these vocabularies")

    def score(self, ids: Sequence[int]) -> np.ndarray:
        mapped = [int(self.vmap.fwd[i]) for i in ids]
        return remap_logits(self.inner.score(mapped), self.vmap)
