"""Iterative synthetic data generation with filter-gated pool growth.

Each iteration drafts a batch of candidate prompts from the current pool,
samples one response per source model, scores both under the fine-tuned
model, and adds only filter-passing pairs back to the pool. Generated
answers from the prompt generator itself are always discarded; only its
prompts survive.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Dataset, Example, Manifest, TokenSequence, Vocabulary, tokenize
from .errors import ParseFailure
from .lm import LanguageModel, fit_tabular, sample
from .remote import CompletionClient
from .scoring import KEPT, FilterRule, GenConfig, ScoredPair, score_pair, visible_text, with_verdict

PROMPT_TEMPLATE = "Generate {batch} more samples like these {count}"

_NUMBERED_ITEM = re.compile(r"^\s*\d+[.):\-]\s*(.*\S)\s*$")
_ANSWER_SPLIT = re.compile(r"\s*\bA:\s*")
_QUESTION_PREFIX = re.compile(r"^\s*Q:\s*")


@dataclass
class GenerationPool:
    """Seeds plus every filter-passing pair; grows monotonically."""

    examples: list[Example]
    rng: np.random.Generator
    iteration: int = 0
    _prompt_index: set[str] = field(default_factory=set)

    @classmethod
    def from_seeds(cls, seeds: Sequence[Example], rng: np.random.Generator | int | None = None) -> "GenerationPool":
        if not seeds:
            raise ValueError("pool requires at least one seed example")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        pool = cls(examples=[], rng=gen)
        for ex in seeds:
            if ex.provenance != "seed":
                raise ValueError(f"pool seeds must have seed provenance, got {ex.provenance!r}")
            pool._add(ex)
        return pool

    def _add(self, example: Example) -> None:
        self.examples.append(example)
        self._prompt_index.add(example.prompt)

    def add_kept(self, examples: Sequence[Example]) -> None:
        for ex in examples:
            self._add(ex)

    def has_prompt(self, prompt: str) -> bool:
        return prompt in self._prompt_index

    def sample_demonstrations(self, count: int) -> list[Example]:
        count = min(count, len(self.examples))
        picks = self.rng.choice(len(self.examples), size=count, replace=False)
        return [self.examples[i] for i in picks]

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class GenerationStrategy:
    """How candidate prompts are drafted from the pool.

    ``instruction_template`` formats demonstrations into the bulk-generation
    template and sends them to a completion endpoint; ``prefix_resample``
    fits a small tabular model on the pool's prompts and samples from it,
    for fully in-process runs.
    """

    kind: str
    vocab: Vocabulary
    batch_size: int = 20
    demonstrations: int = 5
    # instruction_template
    client: CompletionClient | None = None
    max_tokens: int = 512
    endpoint_temperature: float = 1.0
    demos_include_responses: bool = True
    # prefix_resample
    prompt_order: int = 3
    prompt_alpha: float = 0.1
    prompt_temperature: float = 1.0
    prompt_max_len: int = 12

    def __post_init__(self):
        if self.kind not in ("instruction_template", "prefix_resample"):
            raise ValueError(f"unknown strategy kind: {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.demonstrations < 1:
            raise ValueError(f"demonstrations must be >= 1, got {self.demonstrations}")
        if self.kind == "instruction_template" and self.client is None:
            raise ValueError("instruction_template strategy requires a completion client")


def format_instruction(strategy: GenerationStrategy, demos: Sequence[Example]) -> str:
    header = PROMPT_TEMPLATE.format(batch=strategy.batch_size, count=len(demos))
    lines = [header]
    for i, ex in enumerate(demos, start=1):
        if strategy.demos_include_responses:
            lines.append(f"{i}. Q: {ex.prompt} A: {ex.response}")
        else:
            lines.append(f"{i}. Q: {ex.prompt}")
    return "\n".join(lines)


def parse_generated_items(text: str) -> list[str]:
    """Extract candidate items from generator output.

    Primary form is a numbered list; blank-line-separated blocks are the
    fallback. Raises ParseFailure when nothing can be extracted.
    """
    items = []
    for line in text.splitlines():
        match = _NUMBERED_ITEM.match(line)
        if match:
            items.append(match.group(1))
    if not items:
        blocks = [b.strip() for b in re.split(r"\n\s*\n", text)]
        items = [b for b in blocks if b]
    if not items:
        raise ParseFailure("no items could be extracted from generator output")
    return items


def strip_answer(item: str) -> str:
    """Keep only the prompt part of a generated sample; drop any answer."""
    prompt = _ANSWER_SPLIT.split(item, maxsplit=1)[0]
    return _QUESTION_PREFIX.sub("", prompt).strip()


def generate_prompts(strategy: GenerationStrategy, pool: GenerationPool) -> list[str]:
    """Draft a batch of candidate prompts, deduplicated against the pool and batch."""
    prompts, _raw = _generate_with_count(strategy, pool)
    return prompts


def _generate_with_count(strategy: GenerationStrategy, pool: GenerationPool) -> tuple[list[str], int]:
    if len(pool) == 0:
        raise ValueError("pool is empty")
    if strategy.kind == "instruction_template":
        demos = pool.sample_demonstrations(strategy.demonstrations)
        instruction = format_instruction(strategy, demos)
        completion = strategy.client.generate(
            instruction, max_tokens=strategy.max_tokens, temperature=strategy.endpoint_temperature
        )
        candidates = [strip_answer(item) for item in parse_generated_items(completion.text)]
    else:
        prompt_model = fit_tabular(
            [tokenize(ex.prompt, strategy.vocab) for ex in pool.examples],
            order=strategy.prompt_order,
            alpha=strategy.prompt_alpha,
            vocab=strategy.vocab,
            model_id="prompt-resampler",
        )
        candidates = []
        for _ in range(strategy.batch_size):
            seq = sample(
                prompt_model,
                None,
                max_len=strategy.prompt_max_len,
                temperature=strategy.prompt_temperature,
                rng=pool.rng,
            )
            candidates.append(visible_text(seq))

    prompts: list[str] = []
    seen: set[str] = set()
    for text in candidates:
        if not text or text in seen or pool.has_prompt(text):
            continue
        seen.add(text)
        prompts.append(text)
    return prompts, len(candidates)


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    generated: int
    duplicates: int
    scored: int
    kept: int
    filtered: int

    def to_record(self) -> dict:
        return {
            "iteration": self.iteration,
            "generated": self.generated,
            "duplicates": self.duplicates,
            "scored": self.scored,
            "kept": self.kept,
            "filtered": self.filtered,
        }


@dataclass
class IterationOutcome:
    kept: list[Example]
    discarded: list[Example]
    pairs: list[ScoredPair]
    stats: IterationStats


def _pair_example(pair: ScoredPair, iteration: int) -> Example:
    return Example(
        prompt=pair.prompt,
        response=pair.response_f,
        provenance="generated",
        iteration=iteration,
        ppl_f=pair.ppl_f,
        ppl_b=pair.ppl_b,
        margin=pair.margin,
        kept=pair.verdict == KEPT,
        rule=pair.rule,
    )


def run_iteration(
    pool: GenerationPool,
    strategy: GenerationStrategy,
    model_f: LanguageModel,
    model_b: LanguageModel,
    rule: FilterRule,
    gen_config: GenConfig = GenConfig(),
    workers: int = 1,
) -> IterationOutcome:
    """Generate, score, filter one batch; append kept pairs to the pool."""
    prompts, raw_count = _generate_with_count(strategy, pool)
    pool.iteration += 1

    prompt_seqs = [tokenize(p, strategy.vocab) for p in prompts]
    rngs = pool.rng.spawn(len(prompt_seqs))

    def score_one(args: tuple[TokenSequence, np.random.Generator]) -> ScoredPair:
        seq, rng = args
        return score_pair(model_f, model_b, seq, gen_config, rng)

    if workers > 1 and len(prompt_seqs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as tp:
            pairs = list(tp.map(score_one, zip(prompt_seqs, rngs)))
    else:
        pairs = [score_one(args) for args in zip(prompt_seqs, rngs)]

    pairs = [with_verdict(rule, pair) for pair in pairs]
    kept = [_pair_example(p, pool.iteration) for p in pairs if p.verdict == KEPT]
    discarded = [_pair_example(p, pool.iteration) for p in pairs if p.verdict != KEPT]
    pool.add_kept(kept)

    stats = IterationStats(
        iteration=pool.iteration,
        generated=raw_count,
        duplicates=raw_count - len(prompts),
        scored=len(pairs),
        kept=len(kept),
        filtered=len(pairs) - len(kept),
    )
    return IterationOutcome(kept=kept, discarded=discarded, pairs=pairs, stats=stats)


@dataclass
class SyntheticDataset:
    """Kept pairs with provenance, the discard audit trail, and run stats."""

    dataset: Dataset
    discarded: list[Example]
    stats: list[IterationStats]
    budget_exhausted: bool = False

    @property
    def kept(self) -> list[Example]:
        return [ex for ex in self.dataset if ex.provenance == "generated"]

    @property
    def keep_rate(self) -> float:
        scored = sum(s.scored for s in self.stats)
        return (sum(s.kept for s in self.stats) / scored) if scored else 0.0


def build_dataset(
    pool: GenerationPool,
    strategy: GenerationStrategy,
    model_f: LanguageModel,
    model_b: LanguageModel,
    rule: FilterRule,
    target_size: int,
    max_iterations: int = 100,
    gen_config: GenConfig = GenConfig(),
    workers: int = 1,
    config_hash: str = "",
) -> SyntheticDataset:
    """Iterate until ``target_size`` pairs are kept or the budget runs out.

    The returned dataset holds the seeds (iteration 0) plus exactly
    ``target_size`` kept pairs, truncating the final batch; when
    ``max_iterations`` passes first, the partial result is flagged
    ``budget_exhausted`` instead of raising.
    """
    if target_size < 1:
        raise ValueError(f"target_size must be >= 1, got {target_size}")
    seeds = list(pool.examples)
    kept_total: list[Example] = []
    discarded: list[Example] = []
    stats: list[IterationStats] = []
    while len(kept_total) < target_size and len(stats) < max_iterations:
        outcome = run_iteration(pool, strategy, model_f, model_b, rule, gen_config, workers)
        kept_total.extend(outcome.kept)
        discarded.extend(outcome.discarded)
        stats.append(outcome.stats)

    exhausted = len(kept_total) < target_size
    dataset = Dataset(
        examples=seeds + kept_total[:target_size],
        manifest=Manifest(config_hash=config_hash),
    )
    return SyntheticDataset(
        dataset=dataset,
        discarded=discarded,
        stats=stats,
        budget_exhausted=exhausted,
    )
