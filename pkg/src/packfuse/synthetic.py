"""Synthetic multi-domain corpora with known generators.

Each domain is a first-order Markov chain over a small alphabet (letters
plus space, so whitespace tf-idf has terms to work with). Experts trained on
one domain's text give the fusion methods a known ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scorer import ByteTokenizer, NgramModel, train_ngram

ALPHABET = "abcdefghijklmnop "


@dataclass(frozen=True)
class MarkovSource:
    alphabet: str
    start: np.ndarray
    transition: np.ndarray

    @classmethod
    def random(cls, rng: np.random.Generator, alphabet: str = ALPHABET,
               concentration: float = 0.3) -> "MarkovSource":
        size = len(alphabet)
        start = rng.dirichlet(np.full(size, concentration))
        transition = rng.dirichlet(np.full(size, concentration), size=size)
        return cls(alphabet, start, transition)


def sample_text(sources: Sequence[MarkovSource], mix: Sequence[float], length: int,
                rng: np.random.Generator) -> str:
    """Draw ``length`` characters; each step samples from sum_j mix_j * P_j(.|prev)."""
    mix = np.asarray(mix, dtype=np.float64)
    alphabet = sources[0].alphabet
    start = sum(m * s.start for m, s in zip(mix, sources))
    cur = rng.choice(len(alphabet), p=start / start.sum())
    out = [cur]
    for _ in range(length - 1):
        row = sum(m * s.transition[cur] for m, s in zip(mix, sources))
        cur = rng.choice(len(alphabet), p=row / row.sum())
        out.append(cur)
    return "".join(alphabet[i] for i in out)


@dataclass
class SyntheticCorpus:
    sources: list[MarkovSource]
    train: dict[str, list[str]]
    # (domain index or -1 for mixed, text)
    test: list[tuple[int, str]] = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return list(self.train)


def domain_corpus(k: int, seed: int, n_train: int = 40, train_length: int = 400,
                  n_test: int = 200, test_length: int = 160, test_domain: int | None = 0,
                  mixed: bool = False) -> SyntheticCorpus:
    """Build ``k`` random domains with training text and held-out documents.

    Held-out documents come from ``test_domain`` (None: cycle through domains),
    or, with ``mixed``, from a per-document random mixture of all domains.
    """
    rng = np.random.default_rng(seed)
    sources = [MarkovSource.random(rng) for _ in range(k)]
    train = {}
    for j, src in enumerate(sources):
        onehot = np.eye(k)[j]
        train[f"expert{j}"] = [sample_text(sources, onehot, train_length, rng) for _ in range(n_train)]
    test = []
    for i in range(n_test):
        if mixed:
            test.append((-1, sample_text(sources, rng.dirichlet(np.ones(k)), test_length, rng)))
        else:
            j = test_domain if test_domain is not None else i % k
            test.append((j, sample_text(sources, np.eye(k)[j], test_length, rng)))
    return SyntheticCorpus(sources, train, test)


def train_experts(corpus: SyntheticCorpus, n: int = 2, k: float = 0.1) -> list[NgramModel]:
    tok = ByteTokenizer()
    return [
        train_ngram([tok.encode(t) for t in texts], tok.vocab, n=n, k=k, name=name)
        for name, texts in corpus.train.items()
    ]
