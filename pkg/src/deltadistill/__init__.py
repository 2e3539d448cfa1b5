"""Specialized-knowledge transfer between language models via
perplexity-difference filtered synthetic data and sequence-level distillation."""

from .analysis import (
    Histogram,
    MarginDecomposition,
    decompose_margin,
    distinct_n,
    enumerate_sequence_distribution,
    perplexity_histogram,
)
from .corpus import (
    Dataset,
    Example,
    Manifest,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    detokenize,
    load_dataset,
    save_dataset,
    tokenize,
)
from .distill import LogitTableModel, TrainConfig, distill_gradient, distill_tabular, kd_loss
from .lm import (
    FineTunedModel,
    FineTuneDelta,
    LanguageModel,
    TabularModel,
    apply_fine_tune,
    fit_tabular,
    load_model,
    log_likelihood,
    sample,
    save_model,
)
from .remote import (
    CompletionClient,
    RemoteEndpoint,
    ResponseCache,
    ScoredCompletion,
    remote_generate,
    remote_perplexity,
)
from .scoring import (
    FilterRule,
    GenConfig,
    ScoredPair,
    apply_filter,
    corpus_perplexity,
    margin,
    perplexity,
    score_pair,
)
from .synthgen import (
    GenerationPool,
    GenerationStrategy,
    SyntheticDataset,
    build_dataset,
    generate_prompts,
    run_iteration,
)

__all__ = [name for name in dir() if not name.startswith("_")]
