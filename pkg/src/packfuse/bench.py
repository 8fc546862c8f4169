"""Cost of greedy versus exhaustive grid search, counted in fused-NLL evaluations."""

from __future__ import annotations

import statistics
import time
from typing import Sequence

import numpy as np

from .fusion import CachedLogits, EvalCounter, GridConfig, exhaustive_grid, greedy_search, simplex_grid_size

BENCH_FIELDS = ["k", "step", "greedy_evals", "greedy_formula", "greedy_evals_early_stop",
                "exhaustive_evals", "exhaustive_formula", "greedy_seconds", "exhaustive_seconds"]


def bench_fixture(k: int, t: int = 32, vocab_size: int = 16, seed: int = 0) -> tuple[CachedLogits, list[int]]:
    """Random logits for ``k`` models over a ``t``-token prompt."""
    rng = np.random.default_rng([seed, k])
    logits = rng.normal(scale=2.0, size=(k, t, vocab_size))
    targets = rng.integers(vocab_size, size=t).tolist()
    return CachedLogits(tuple(f"m{i}" for i in range(k)), logits), targets


def _timed(fn, repeats: int) -> tuple[object, float]:
    times = []
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - start)
    return result, statistics.median(times)


def bench_complexity(ks: Sequence[int], step: float = 0.05, t: int = 32, vocab_size: int = 16,
                     seed: int = 0, repeats: int = 3, exhaustive_limit: int = 20000) -> list[dict]:
    """One row per K. Exhaustive search is skipped (None) past ``exhaustive_limit`` grid points."""
    full = GridConfig(step, early_stop=False)
    early = GridConfig(step, early_stop=True)
    n = full.points
    rows = []
    for k in ks:
        cache, targets = bench_fixture(k, t, vocab_size, seed)
        counter = EvalCounter()
        _, greedy_s = _timed(lambda: greedy_search(cache, targets, None, full), repeats)
        greedy_search(cache, targets, None, full, counter)
        early_counter = EvalCounter()
        greedy_search(cache, targets, None, early, early_counter)

        size = simplex_grid_size(n, k)
        ex_evals = ex_s = None
        if size <= exhaustive_limit:
            ex_counter = EvalCounter()
            _, ex_s = _timed(lambda: exhaustive_grid(cache, targets, full, counter=ex_counter, max_models=k), 1)
            ex_evals = ex_counter.count
        rows.append({
            "k": k,
            "step": step,
            "greedy_evals": counter.count,
            "greedy_formula": (k - 1) * (n + 1),
            "greedy_evals_early_stop": early_counter.count,
            "exhaustive_evals": ex_evals,
            "exhaustive_formula": size,
            "greedy_seconds": greedy_s,
            "exhaustive_seconds": ex_s,
        })
    return rows
