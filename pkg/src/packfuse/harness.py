"""Evaluation protocol: split each document into a weight-estimation prompt and
an evaluation suffix, pick weights on the prompt with each configured method,
and report fused perplexity on the suffix conditioned on the full prefix.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .align import AlignedScorer, VocabMap, build_vocab_map, select_reference
from .baselines import ExpertCluster, TfidfIndex, cbtm_weights, dexperts_fuse, load_clusters, mix_probabilities
from .client import RemoteScorer
from .config import RunConfig
from .errors import ConfigError, DocTooShort, PackFuseError, PromptTooShort
from .fusion import (
    CachedLogits,
    EvalCounter,
    FusionWeights,
    GridConfig,
    exhaustive_grid,
    fuse_logits,
    greedy_optimize,
    sim_weights,
    top1_select,
    uniform_weights,
)
from .ppl import LOG_PROB_FLOOR, log_softmax, mean_nll
from .scorer import TokenScorer, TokenSequence, Vocabulary, load_model, score_sequence, tokenizer_for

log = logging.getLogger(__name__)

PROMPT_CAP = 32
PROMPT_FRACTION = 0.2


@dataclass(frozen=True)
class PromptSplit:
    prompt: TokenSequence
    eval: TokenSequence

    @property
    def doc(self) -> TokenSequence:
        return TokenSequence(self.prompt.ids + self.eval.ids, self.prompt.vocab_id)


def split_prompt(doc: TokenSequence, fraction: float = PROMPT_FRACTION,
                 cap: int | None = PROMPT_CAP) -> PromptSplit:
    """Prompt = the first ``cap`` tokens or the first ``fraction`` of them, whichever is shorter."""
    if len(doc) < 3:
        raise DocTooShort(f"document has {len(doc)} tokens, need at least 3")
    if not 0 < fraction < 1:
        raise ValueError("prompt fraction must lie in (0, 1)")
    size = math.floor(Fraction(repr(fraction)) * len(doc))
    if cap is not None:
        size = min(cap, size)
    return PromptSplit(doc[:size], doc[size:])


@dataclass
class EvalRecord:
    doc_id: int
    tokens: int = 0
    prompt_tokens: int = 0
    eval_tokens: int = 0
    reference: str = ""
    prompt_ppl: dict[str, float] = field(default_factory=dict)
    # method -> {"weights": {name: lambda}, "eval_nll", "eval_ppl", "nll_evals"}
    results: dict[str, dict] = field(default_factory=dict)
    error: str | None = None
    wall_time: float | None = None

    def to_json(self, timings: bool = False) -> dict:
        out = asdict(self)
        if not timings:
            out.pop("wall_time")
        return out


def read_corpus(path) -> list[str]:
    """One document per non-empty line."""
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def load_scorer(spec) -> TokenScorer:
    if spec.url is not None:
        return RemoteScorer(spec.name, spec.url, Vocabulary.load(spec.vocab))
    scorer = load_model(spec.path)
    scorer.name = spec.name
    return scorer


def _pick_targets(logprobs: np.ndarray, targets: Sequence[int]) -> float:
    picked = logprobs[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return float(-np.maximum(picked, LOG_PROB_FLOOR).mean())


class FusionRunner:
    """Holds the loaded models, vocabulary maps and cluster centroids for one run."""

    def __init__(self, cfg: RunConfig, scorers: Mapping[str, TokenScorer] | None = None,
                 clusters: tuple[Sequence[ExpertCluster], TfidfIndex] | None = None):
        self.cfg = cfg
        if scorers is None:
            scorers = {m.name: load_scorer(m) for m in cfg.models}
        missing = [m.name for m in cfg.models if m.name not in scorers]
        if missing:
            raise ConfigError(f"no scorer for models {missing}")
        self.scorers = dict(scorers)
        self.seeds = [m.name for m in cfg.seeds]
        self.base = cfg.role("base").name if cfg.role("base") else None
        self.anti = cfg.role("anti").name if cfg.role("anti") else None
        self.grid = GridConfig(cfg.step, cfg.early_stop)
        if "exhaustive" in cfg.method and len(self.seeds) > 4:
            raise ConfigError("method 'exhaustive' supports at most 4 seed models")

        self.clusters = None
        self.tfidf = None
        if "cbtm" in cfg.method:
            found, self.tfidf = clusters if clusters is not None else load_clusters(cfg.clusters)
            by_name = {c.name: c for c in found}
            absent = [n for n in self.seeds if n not in by_name]
            if absent:
                raise ConfigError(f"clusters file has no centroid for {absent}")
            self.clusters = [by_name[n] for n in self.seeds]

        vocabs = {s.vocab_id for s in self.scorers.values()}
        self.shared_vocab = len(vocabs) == 1
        self._maps: dict[tuple[str, str], VocabMap] = {}
        self._aligned: dict[tuple[str, str], TokenScorer] = {}
        self._lock = threading.Lock()

    # vocabulary handling -------------------------------------------------

    def reference_vocab(self, text: str) -> Vocabulary:
        first = self.scorers[self.seeds[0]].vocab
        if self.shared_vocab:
            return first
        if self.cfg.reference != "top1":
            return self.scorers[self.cfg.reference].vocab
        ppls = []
        for name in self.seeds:
            scorer = self.scorers[name]
            try:
                seq = tokenizer_for(scorer.vocab).encode(text)
                prompt = split_prompt(seq, self.cfg.prompt_fraction, self.cfg.prompt_cap).prompt
                if len(prompt) < 2:
                    raise PromptTooShort
                logits = score_sequence(scorer, prompt)[:-1]
                ppls.append(math.exp(mean_nll(logits, prompt.ids[1:])))
            except (PromptTooShort, DocTooShort, ValueError):
                ppls.append(math.inf)
        if not any(math.isfinite(p) for p in ppls):
            return first
        ref_id = select_reference(ppls, [self.scorers[n].vocab_id for n in self.seeds])
        return next(self.scorers[n].vocab for n in self.seeds if self.scorers[n].vocab_id == ref_id)

    def aligned(self, name: str, ref: Vocabulary) -> TokenScorer:
        scorer = self.scorers[name]
        if scorer.vocab_id == ref.vocab_id:
            return scorer
        key = (name, ref.vocab_id)
        with self._lock:
            if key not in self._aligned:
                map_key = (ref.vocab_id, scorer.vocab_id)
                if map_key not in self._maps:
                    self._maps[map_key] = build_vocab_map(ref, scorer.vocab)
                self._aligned[key] = AlignedScorer(scorer, ref, self._maps[map_key])
            return self._aligned[key]

    # weights ---------------------------------------------------------------

    def weights(self, method: str, cache: CachedLogits | None, targets: Sequence[int],
                ppls: Sequence[float], prompt_text: str) -> tuple[FusionWeights, int]:
        """Weights over the seed models and the number of fused-NLL evaluations spent."""
        names = self.seeds
        if cache is None:
            return uniform_weights(len(names), names), 0
        if method == "ensemble":
            return uniform_weights(len(names), names), 0
        if method == "packllm-sim":
            return sim_weights(ppls, self.cfg.tau, names), 0
        if method in ("top1", "dexperts"):
            return top1_select(ppls, names), 0
        if method == "cbtm":
            w = cbtm_weights(prompt_text, self.clusters, self.tfidf)
            return FusionWeights(names, w.lambdas, w.order), 0
        counter = EvalCounter()
        if method == "packllm-opt":
            return greedy_optimize(cache, targets, ppls, self.grid, counter), counter.count
        if method == "exhaustive":
            return exhaustive_grid(cache, targets, self.grid, ppls, counter), counter.count
        raise ConfigError(f"unknown method {method!r}")

    def _fused_logprobs(self, method: str, weights: FusionWeights, rows: Mapping[str, np.ndarray]) -> np.ndarray:
        if method == "cbtm":
            return mix_probabilities(np.stack([log_softmax(rows[n]) for n in self.seeds]), weights)
        if method == "dexperts":
            return dexperts_fuse(rows[self.base], rows[weights.top], rows[self.anti], self.cfg.dexperts_lambda)
        cache = CachedLogits.stack(self.seeds, [rows[n] for n in self.seeds])
        return log_softmax(fuse_logits(cache, weights))

    def _needed(self) -> list[str]:
        names = list(self.seeds)
        if "dexperts" in self.cfg.method:
            names += [self.base, self.anti]
        return names

    # documents -------------------------------------------------------------

    def prompt_weights(self, text: str) -> dict:
        """Weights for every configured method, treating all of ``text`` as the prompt."""
        ref = self.reference_vocab(text)
        prompt = tokenizer_for(ref).encode(text)
        if len(prompt) < 2:
            raise PromptTooShort(f"prompt needs at least 2 tokens, got {len(prompt)}")
        rows = [score_sequence(self.aligned(n, ref), prompt)[:-1] for n in self.seeds]
        cache = CachedLogits.stack(self.seeds, rows)
        targets = prompt.ids[1:]
        ppls = [math.exp(mean_nll(r, targets)) for r in rows]
        out = {"reference": ref.vocab_id, "prompt_tokens": len(prompt),
               "prompt_ppl": dict(zip(self.seeds, ppls)), "weights": {}}
        for method in self.cfg.method:
            w, _ = self.weights(method, cache, targets, ppls, text)
            out["weights"][method] = w.as_dict()
        return out

    def evaluate(self, doc_id: int, text: str) -> EvalRecord:
        start = time.perf_counter()
        rec = EvalRecord(doc_id)
        try:
            self._evaluate(rec, text)
        except PackFuseError as exc:
            log.warning("document %d failed: %s", doc_id, exc)
            rec.error = f"{type(exc).__name__}: {exc}"
            rec.results = {}
        rec.wall_time = time.perf_counter() - start
        return rec

    def _evaluate(self, rec: EvalRecord, text: str) -> None:
        ref = self.reference_vocab(text)
        tok = tokenizer_for(ref)
        doc = tok.encode(text)
        split = split_prompt(doc, self.cfg.prompt_fraction, self.cfg.prompt_cap)
        p, total = len(split.prompt), len(doc)
        rec.reference = ref.vocab_id
        rec.tokens, rec.prompt_tokens = total, p

        full = {n: score_sequence(self.aligned(n, ref), doc) for n in self._needed()}

        prompt_targets = doc.ids[1:p]
        cache, ppls = None, []
        if p >= 2:
            cache = CachedLogits.stack(self.seeds, [full[n][:p - 1] for n in self.seeds])
            ppls = [math.exp(mean_nll(cache.logits[i], prompt_targets)) for i in range(cache.k)]
            rec.prompt_ppl = dict(zip(self.seeds, ppls))
        else:
            log.warning("document %d: prompt of %d tokens is too short; using uniform weights", rec.doc_id, p)

        first = max(p, 1)
        eval_targets = doc.ids[first:]
        rec.eval_tokens = len(eval_targets)
        eval_rows = {n: rows[first - 1:total - 1] for n, rows in full.items()}
        prompt_text = tok.decode(split.prompt)

        for method in self.cfg.method:
            weights, evals = self.weights(method, cache, prompt_targets, ppls, prompt_text)
            nll = _pick_targets(self._fused_logprobs(method, weights, eval_rows), eval_targets)
            rec.results[method] = {
                "weights": weights.as_dict(),
                "eval_nll": nll,
                "eval_ppl": math.exp(nll),
                "nll_evals": evals,
            }

    def run(self, docs: Sequence[str], doc_ids: Sequence[int] | None = None) -> list[EvalRecord]:
        doc_ids = list(range(len(docs))) if doc_ids is None else list(doc_ids)
        if self.cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                return list(pool.map(self.evaluate, doc_ids, docs))
        return [self.evaluate(i, d) for i, d in zip(doc_ids, docs)]


def run_eval(cfg: RunConfig, corpus: Sequence[str], scorers: Mapping[str, TokenScorer] | None = None,
             clusters=None) -> list[EvalRecord]:
    """Evaluate every document (or a seeded sample of ``cfg.sample`` of them)."""
    if not corpus:
        raise ConfigError("corpus has no documents")
    ids = list(range(len(corpus)))
    if cfg.sample is not None and cfg.sample < len(corpus):
        ids = sorted(random.Random(cfg.seed).sample(ids, cfg.sample))
    runner = FusionRunner(cfg, scorers, clusters)
    return runner.run([corpus[i] for i in ids], ids)


def write_records(records: Sequence[EvalRecord], path, timings: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(timings), sort_keys=True) + "\n")


SUMMARY_FIELDS = ["method", "k", "docs", "failed", "mean_eval_ppl", "corpus_eval_ppl",
                  "mean_top1_weight", "mean_nll_evals"]


def summarize(records: Sequence[EvalRecord]) -> list[dict]:
    """Per-method aggregates (one CSV row per method)."""
    methods: list[str] = []
    for rec in records:
        for m in rec.results:
            if m not in methods:
                methods.append(m)
    failed = sum(rec.error is not None for rec in records)
    rows = []
    for m in methods:
        res = [(rec, rec.results[m]) for rec in records if m in rec.results]
        tokens = sum(rec.eval_tokens for rec, _ in res)
        rows.append({
            "method": m,
            "k": len(res[0][1]["weights"]),
            "docs": len(res),
            "failed": failed,
            "mean_eval_ppl": float(np.mean([r["eval_ppl"] for _, r in res])),
            "corpus_eval_ppl": math.exp(sum(r["eval_nll"] * rec.eval_tokens for rec, r in res) / tokens),
            "mean_top1_weight": float(np.mean([max(r["weights"].values()) for _, r in res])),
            "mean_nll_evals": float(np.mean([r["nll_evals"] for _, r in res])),
        })
    return rows


def write_csv(rows: Sequence[dict], dest, fields: Sequence[str]) -> None:
    """Write ``rows`` to a path or an open text stream."""
    if not hasattr(dest, "write"):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            return write_csv(rows, fh, fields)
    writer = csv.DictWriter(dest, fieldnames=list(fields))
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def summary_path(output) -> Path:
    out = Path(output)
    return out.with_name(out.stem + ".summary.csv")
