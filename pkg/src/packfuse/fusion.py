"""Weighted logit fusion and the strategies that pick the fusion weights.

All grid searches run over logits cached once per model, so the cost of a
search is counted in fused-NLL evaluations, not forward passes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidTau, PromptTooShort, TooManyModels
from .ppl import log_softmax, mean_nll
from .scorer import TokenScorer, TokenSequence, score_sequence

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9
TIE_TOL = 1e-12


@dataclass(frozen=True)
class FusionWeights:
    """A point on the simplex, one weight per named model.

    ``order`` ranks model indices best-first (ascending prompt perplexity
    where perplexities are known).
    """

    names: tuple[str, ...]
    lambdas: tuple[float, ...]
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        k = len(self.lambdas)
        if k == 0 or len(self.names) != k:
            raise DimensionMismatch("need one weight per model name")
        if sorted(self.order) != list(range(k)):
            raise ValueError(f"order {self.order} is not a permutation of {k} models")
        if any(not (0.0 <= x <= 1.0) for x in self.lambdas):
            raise ValueError(f"weights outside [0, 1]: {self.lambdas}")
        if abs(math.fsum(self.lambdas) - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"weights sum to {math.fsum(self.lambdas)!r}, not 1")

    def __len__(self) -> int:
        return len(self.lambdas)

    @property
    def entries(self) -> list[tuple[str, float]]:
        return list(zip(self.names, self.lambdas))

    def as_array(self) -> np.ndarray:
        return np.array(self.lambdas)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    @property
    def top(self) -> str:
        return self.names[int(np.argmax(self.lambdas))]


@dataclass(frozen=True)
class GridConfig:
    step: float = 0.05
    early_stop: bool = True

    def __post_init__(self):
        if not 0 < self.step <= 0.5:
            raise ValueError("grid step must lie in (0, 0.5]")
        if abs(self.points * self.step - 1.0) > 1e-9:
            raise ValueError(f"1/step must be an integer, got step={self.step}")

    @property
    def points(self) -> int:
        """Number of grid intervals n; lambda takes the values i/n."""
        return round(1.0 / self.step)


@dataclass(frozen=True)
class CachedLogits:
    """Prompt logits of K models: array of shape (K, t, V), row j predicting target j."""

    names: tuple[str, ...]
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3:
            raise DimensionMismatch(f"expected a (K, t, V) array, got shape {logits.shape}")
        if len(self.names) != logits.shape[0]:
            raise DimensionMismatch("need one name per cached model")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "logits", logits)

    @property
    def k(self) -> int:
        return self.logits.shape[0]

    @property
    def t(self) -> int:
        return self.logits.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.logits.shape[2]

    @classmethod
    def stack(cls, names: Sequence[str], per_model: Sequence[np.ndarray]) -> "CachedLogits":
        shapes = {np.shape(x) for x in per_model}
        if len(shapes) != 1:
            raise DimensionMismatch(f"models disagree on (t, V): {sorted(shapes)}")
        return cls(tuple(names), np.stack(per_model))


def cache_prompt(scorers: Sequence[TokenScorer], prompt: TokenSequence,
                 workers: int = 1) -> tuple[CachedLogits, tuple[int, ...]]:
    """One forward pass per model over ``prompt``; targets are ``prompt[1:]``."""
    if len(prompt) < 2:
        raise PromptTooShort(f"prompt needs at least 2 tokens, got {len(prompt)}")

    def forward(scorer):
        return score_sequence(scorer, prompt)[:-1]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(forward, scorers))
    else:
        rows = [forward(s) for s in scorers]
    return CachedLogits.stack([s.name for s in scorers], rows), prompt.ids[1:]


class EvalCounter:
    """Counts fused-NLL evaluations made by a grid search."""

    def __init__(self):
        self.count = 0

    def add(self, n: int = 1) -> None:
        self.count += n


def _names(names, k: int) -> tuple[str, ...]:
    if names is None:
        return tuple(f"m{i}" for i in range(k))
    names = tuple(names)
    if len(names) != k:
        raise DimensionMismatch(f"{len(names)} names for {k} models")
    return names


def _usable(ppls: Sequence[float], names: Sequence[str]) -> np.ndarray:
    """Mask of models with a finite perplexity; broken ones are logged and dropped."""
    ppls = np.asarray(ppls, dtype=np.float64)
    ok = np.isfinite(ppls)
    for i in np.flatnonzero(~ok):
        log.warning("dropping model %s: prompt perplexity is %r", names[i], float(ppls[i]))
    if not ok.any():
        raise ValueError("no model has a finite prompt perplexity")
    return ok


def fuse_logits(cache: CachedLogits, weights: FusionWeights) -> np.ndarray:
    """Sum of weighted logits over every position, accumulated in ``weights.order``."""
    if len(weights) != cache.k:
        raise DimensionMismatch(f"{len(weights)} weights for {cache.k} cached models")
    acc = np.zeros(cache.logits.shape[1:])
    for i in weights.order:
        lam = weights.lambdas[i]
        if lam != 0.0:
            acc += lam * cache.logits[i]
    return acc


def fuse_step(cache: CachedLogits, weights: FusionWeights, position: int) -> np.ndarray:
    """Log-probabilities of the fused model at one cached position."""
    if len(weights) != cache.k:
        raise DimensionMismatch(f"{len(weights)} weights for {cache.k} cached models")
    if not 0 <= position < cache.t:
        raise IndexError(f"position {position} outside 0..{cache.t - 1}")
    acc = np.zeros(cache.vocab_size)
    for i in weights.order:
        lam = weights.lambdas[i]
        if lam != 0.0:
            acc += lam * cache.logits[i, position]
    return log_softmax(acc)


def rank_by_ppl(ppls: Sequence[float]) -> tuple[int, ...]:
    """Stable ascending argsort; NaN sorts last."""
    return tuple(int(i) for i in np.argsort(np.asarray(ppls, dtype=np.float64), kind="stable"))


def sim_weights(ppls: Sequence[float], tau: float = 1.0, names=None) -> FusionWeights:
    """softmax(-log PPL / tau), i.e. weights proportional to PPL**(-1/tau)."""
    if not tau > 0:
        raise InvalidTau(f"temperature must be positive, got {tau}")
    names = _names(names, len(ppls))
    ok = _usable(ppls, names)
    ppls = np.asarray(ppls, dtype=np.float64)
    scores = np.full(len(ppls), -np.inf)
    scores[ok] = -np.log(ppls[ok]) / tau
    z = np.exp(scores - scores[ok].max())
    lambdas = z / z.sum()
    return FusionWeights(names, lambdas, rank_by_ppl(np.where(ok, ppls, np.inf)))


def top1_select(ppls: Sequence[float], names=None) -> FusionWeights:
    names = _names(names, len(ppls))
    ok = _usable(ppls, names)
    order = rank_by_ppl(np.where(ok, ppls, np.inf))
    lambdas = [0.0] * len(ppls)
    lambdas[order[0]] = 1.0
    return FusionWeights(names, lambdas, order)


def uniform_weights(k: int, names=None) -> FusionWeights:
    if k < 1:
        raise ValueError("need at least one model")
    return FusionWeights(_names(names, k), [1.0 / k] * k, range(k))


def _check_targets(cache: CachedLogits, targets) -> tuple[int, ...]:
    ids = targets.ids if isinstance(targets, TokenSequence) else tuple(int(x) for x in targets)
    if len(ids) == 0:
        raise PromptTooShort("grid search needs at least one predicted prompt token")
    if len(ids) != cache.t:
        raise DimensionMismatch(f"{len(ids)} targets for {cache.t} cached positions")
    if max(ids) >= cache.vocab_size or min(ids) < 0:
        raise DimensionMismatch("target id outside the cached vocabulary")
    return ids


def _resolve_ppls(cache: CachedLogits, targets, ppls) -> np.ndarray:
    if ppls is None:
        return np.array([math.exp(mean_nll(cache.logits[k], targets)) for k in range(cache.k)])
    ppls = np.asarray(ppls, dtype=np.float64)
    if len(ppls) != cache.k:
        raise DimensionMismatch(f"{len(ppls)} perplexities for {cache.k} cached models")
    return ppls


def _pick(losses: Sequence[float]) -> int:
    """Largest grid index whose loss is within TIE_TOL of the minimum."""
    best = min(losses)
    return max(i for i, x in enumerate(losses) if x <= best + TIE_TOL)


@dataclass
class GreedyTrace:
    weights: FusionWeights
    stage_lambdas: list[float] = field(default_factory=list)
    # stage_nll[0] is the top-1 model alone; stage_nll[j] follows greedy step j
    stage_nll: list[float] = field(default_factory=list)
    evaluations: int = 0
    stopped_early: bool = False
    fused: np.ndarray | None = None


def greedy_search(cache: CachedLogits, targets, ppls=None, cfg: GridConfig = GridConfig(),
                  counter: EvalCounter | None = None) -> GreedyTrace:
    """Sequential pairwise grid search between the running mixture and the next-ranked model."""
    targets = _check_targets(cache, targets)
    ppls = _resolve_ppls(cache, targets, ppls)
    ok = _usable(ppls, cache.names)
    order = rank_by_ppl(np.where(ok, ppls, np.inf))
    ranked = [i for i in order if ok[i]]
    n = cfg.points
    grid = [(i / n, (n - i) / n) for i in range(n + 1)]

    lam_star = np.zeros(len(ranked))
    lam_star[0] = 1.0
    acc = cache.logits[ranked[0]]
    trace = GreedyTrace(weights=None)  # type: ignore[arg-type]
    if len(ranked) == 1:
        trace.stage_nll.append(mean_nll(acc, targets))

    for stage in range(1, len(ranked)):
        nxt = cache.logits[ranked[stage]]
        losses = []
        for lam, comp in grid:
            losses.append(mean_nll(lam * acc + comp * nxt, targets))
        trace.evaluations += len(grid)
        if counter is not None:
            counter.add(len(grid))
        if stage == 1:
            # lambda = 1 reproduces the top-1 model exactly
            trace.stage_nll.append(losses[n])
        i = _pick(losses)
        lam, comp = grid[i]
        acc = lam * acc + comp * nxt
        lam_star[:stage] *= lam
        lam_star[stage] = comp
        trace.stage_lambdas.append(lam)
        trace.stage_nll.append(losses[i])
        if cfg.early_stop and i == n:
            trace.stopped_early = stage < len(ranked) - 1
            break

    lambdas = [0.0] * cache.k
    for pos, idx in enumerate(ranked):
        lambdas[idx] = float(lam_star[pos])
    trace.weights = FusionWeights(cache.names, lambdas, order)
    trace.fused = acc
    return trace


def greedy_optimize(cache: CachedLogits, targets, ppls=None, cfg: GridConfig = GridConfig(),
                    counter: EvalCounter | None = None) -> FusionWeights:
    return greedy_search(cache, targets, ppls, cfg, counter).weights


def simplex_grid(n: int, k: int):
    """All k-tuples of non-negative ints summing to n, first coordinate descending."""
    if k == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in simplex_grid(n - first, k - 1):
            yield (first,) + rest


def simplex_grid_size(n: int, k: int) -> int:
    return math.comb(n + k - 1, k - 1)


def exhaustive_grid(cache: CachedLogits, targets, cfg: GridConfig = GridConfig(), ppls=None,
                    counter: EvalCounter | None = None, max_models: int = 4) -> FusionWeights:
    """Scan every simplex grid point; the combinatorial baseline the greedy search avoids.

    Ties (within 1e-12) go to the lexicographically largest weight vector in
    perplexity-rank order. ``max_models`` guards against the combinatorial blow-up.
    """
    if cache.k > max_models:
        raise TooManyModels(f"exhaustive grid limited to {max_models} models, got {cache.k}")
    targets = _check_targets(cache, targets)
    ppls = _resolve_ppls(cache, targets, ppls)
    ok = _usable(ppls, cache.names)
    order = rank_by_ppl(np.where(ok, ppls, np.inf))
    ranked = [i for i in order if ok[i]]
    n = cfg.points

    points = []
    losses = []
    for combo in simplex_grid(n, len(ranked)):
        acc = np.zeros(cache.logits.shape[1:])
        for c, idx in zip(combo, ranked):
            acc = acc + (c / n) * cache.logits[idx]
        points.append(combo)
        losses.append(mean_nll(acc, targets))
    if counter is not None:
        counter.add(len(points))

    best = min(losses)
    combo = max(p for p, x in zip(points, losses) if x <= best + TIE_TOL)
    lambdas = [0.0] * cache.k
    for c, idx in zip(combo, ranked):
        lambdas[idx] = c / n
    return FusionWeights(cache.names, lambdas, order)
