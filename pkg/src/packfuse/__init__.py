"""packfuse: test-time fusion of language models weighted by prompt perplexity."""

from .align import VocabMap, build_vocab_map, edit_distance, remap_logits, remap_sequence, select_reference
from .baselines import cbtm_weights, dexperts_fuse, mix_probabilities
from .fusion import (
    CachedLogits,
    FusionWeights,
    GridConfig,
    cache_prompt,
    exhaustive_grid,
    fuse_logits,
    fuse_step,
    greedy_optimize,
    rank_by_ppl,
    sim_weights,
    top1_select,
    uniform_weights,
)
from .ppl import NllReport, log_softmax, prompt_perplexity, sequence_nll
from .scorer import NgramModel, TableModel, TokenScorer, TokenSequence, Vocabulary, score_sequence, train_ngram

__version__ = "0.1.0"
