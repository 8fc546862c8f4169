"""Comparison baselines: cBTM tf-idf routing with probability mixing, and DExperts."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyClusterSet
from .fusion import FusionWeights, _names
from .ppl import log_softmax


def terms(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class TfidfEmbedding:
    """Sparse L2-normalized term -> weight map (empty for empty text)."""

    weights: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "weights", dict(self.weights))

    @property
    def norm(self) -> float:
        return math.sqrt(math.fsum(w * w for w in self.weights.values()))

    def distance(self, other: "TfidfEmbedding") -> float:
        keys = self.weights.keys() | other.weights.keys()
        return math.sqrt(math.fsum(
            (self.weights.get(key, 0.0) - other.weights.get(key, 0.0)) ** 2 for key in keys
        ))


def _normalized(raw: Mapping[str, float]) -> TfidfEmbedding:
    norm = math.sqrt(math.fsum(w * w for w in raw.values()))
    if norm == 0.0:
        return TfidfEmbedding({})
    return TfidfEmbedding({t: w / norm for t, w in raw.items() if w != 0.0})


class TfidfIndex:
    """Smoothed idf, ln((1 + N) / (1 + df)) + 1, over a document collection."""

    def __init__(self, idf: Mapping[str, float], n_docs: int):
        self.idf = dict(idf)
        self.n_docs = n_docs

    @classmethod
    def fit(cls, docs: Iterable[str]) -> "TfidfIndex":
        df: Counter = Counter()
        n = 0
        for doc in docs:
            df.update(set(terms(doc)))
            n += 1
        idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
        return cls(idf, n)

    def idf_of(self, term: str) -> float:
        # unseen term: df = 0
        return self.idf.get(term, math.log(1 + self.n_docs) + 1.0)

    def embed(self, text: str) -> TfidfEmbedding:
        tf = Counter(terms(text))
        return _normalized({t: c * self.idf_of(t) for t, c in tf.items()})


@dataclass(frozen=True)
class ExpertCluster:
    name: str
    centroid: TfidfEmbedding


def build_clusters(index: TfidfIndex, expert_docs: Mapping[str, Sequence[str]]) -> list[ExpertCluster]:
    """Centroid of each expert's training documents (mean of unit embeddings, renormalized)."""
    clusters = []
    for name, docs in expert_docs.items():
        total: Counter = Counter()
        for doc in docs:
            for t, w in index.embed(doc).weights.items():
                total[t] += w
        clusters.append(ExpertCluster(name, _normalized(total)))
    return clusters


def cbtm_weights(prompt_text: str, clusters: Sequence[ExpertCluster],
                 index: TfidfIndex | None = None) -> FusionWeights:
    """softmax(-d(h_P, h_k)) with Euclidean distance between tf-idf embeddings."""
    if not clusters:
        raise EmptyClusterSet("cBTM needs at least one expert cluster")
    index = index or TfidfIndex({}, 0)
    prompt = index.embed(prompt_text)
    d = np.array([prompt.distance(c.centroid) for c in clusters])
    z = np.exp(-(d - d.min()))
    lambdas = z / z.sum()
    order = np.argsort(d, kind="stable")
    return FusionWeights(_names([c.name for c in clusters], len(clusters)), lambdas, order)


def mix_probabilities(prob_sets, weights: FusionWeights) -> np.ndarray:
    """log of sum_k lambda_k p_k, with each p_k given as log-probabilities.

    Works on a (K, V) stack or a (K, t, V) stack of rows.
    """
    logp = np.asarray(prob_sets, dtype=np.float64)
    if logp.shape[0] != len(weights):
        raise DimensionMismatch(f"{logp.shape[0]} distributions for {len(weights)} weights")
    lam = weights.as_array()
    keep = lam > 0
    # log-sum-exp over models for stability
    terms_ = logp[keep] + np.log(lam[keep]).reshape((-1,) + (1,) * (logp.ndim - 1))
    top = terms_.max(axis=0)
    return top + np.log(np.exp(terms_ - top).sum(axis=0))


def dexperts_fuse(base, expert, anti, lam: float = 1.0) -> np.ndarray:
    """log_softmax(base + lam * (expert - anti))."""
    base = np.asarray(base, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    anti = np.asarray(anti, dtype=np.float64)
    if not (base.shape == expert.shape == anti.shape):
        raise DimensionMismatch(f"shapes differ: {base.shape}, {expert.shape}, {anti.shape}")
    return log_softmax(base + lam * (expert - anti))


def save_clusters(path, clusters: Sequence[ExpertCluster], index: TfidfIndex | None = None) -> None:
    doc = {"clusters": [{"name": c.name, "terms": c.centroid.weights} for c in clusters]}
    if index is not None:
        doc["idf"] = index.idf
        doc["n_docs"] = index.n_docs
    Path(path).write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False), encoding="utf-8")


def load_clusters(path) -> tuple[list[ExpertCluster], TfidfIndex]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    clusters = [ExpertCluster(c["name"], TfidfEmbedding(c["terms"])) for c in doc["clusters"]]
    index = TfidfIndex(doc.get("idf", {}), int(doc.get("n_docs", 0)))
    return clusters, index
