"""Negative log-likelihood and perplexity (natural log throughout)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptySequence, LengthMismatch, NonFiniteInput, PromptTooShort
from .scorer import TokenScorer, TokenSequence, score_sequence

PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = math.log(PROB_FLOOR)


@dataclass(frozen=True)
class NllReport:
    mean_nll: float
    ppl: float
    token_count: int

    @classmethod
    def from_mean(cls, mean_nll: float, token_count: int) -> "NllReport":
        return cls(float(mean_nll), math.exp(mean_nll), int(token_count))


def log_softmax(v) -> np.ndarray:
    """Stable log-softmax over the last axis (works on a vector or a stack of rows)."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("logits must be finite")
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def target_log_probs(logits, targets: Sequence[int]) -> np.ndarray:
    """Floored log-probability of each target under its own row of ``logits``."""
    lp = log_softmax(logits)
    picked = lp[np.arange(len(targets)), np.asarray(targets, dtype=np.int64)]
    return np.maximum(picked, LOG_PROB_FLOOR)


def mean_nll(logits, targets: Sequence[int]) -> float:
    return float(-target_log_probs(logits, targets).mean())


def sequence_nll(logits, targets) -> NllReport:
    """Mean NLL of ``targets`` where ``logits[i]`` predicts ``targets[i]``."""
    ids = targets.ids if isinstance(targets, TokenSequence) else tuple(targets)
    logits = np.asarray(logits, dtype=np.float64)
    if len(ids) == 0:
        raise EmptySequence("no target tokens")
    if logits.ndim != 2 or logits.shape[0] != len(ids):
        raise LengthMismatch(f"{logits.shape[0] if logits.ndim else 0} logit rows for {len(ids)} targets")
    return NllReport.from_mean(mean_nll(logits, ids), len(ids))


def prompt_perplexity(scorer: TokenScorer, prompt: TokenSequence) -> NllReport:
    """Perplexity of ``prompt[1:]`` given its prefixes (the first token is context only)."""
    if len(prompt) < 2:
        raise PromptTooShort(f"prompt needs at least 2 tokens, got {len(prompt)}")
    logits = score_sequence(scorer, prompt)
    return sequence_nll(logits[:-1], prompt.ids[1:])
