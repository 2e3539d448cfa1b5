"""Two-domain fixture: a generic base corpus plus a specialized fine-tune corpus.

The world is a table of "<subject> gives <object>" facts in four strata:

  core      - fine-tune only; the base model has never seen these pairings
  boosted   - in both corpora; fine-tuning sharpens what the base half-knows
  carrier   - general facts dominated by the base corpus, lightly repeated
              during fine-tuning (the carrier text of the specialty dataset)
  outside   - base-corpus only; untouched by fine-tuning

Prompts carry two filler prefix tokens so the prompt space is large enough
for exact-match deduplication to never starve generation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deltadistill.corpus import Dataset, Example, Manifest, Vocabulary, build_vocabulary, tokenize
from deltadistill.lm import FineTunedModel, TabularModel, apply_fine_tune, fit_tabular
from deltadistill.scoring import FilterRule, GenConfig
from deltadistill.synthgen import GenerationPool, GenerationStrategy

PREFIX_A = ("ask", "see", "now", "try")
PREFIX_B = ("tell", "find", "show")

CORE = {"zel": "kip", "vor": "nud"}
BOOSTED = {"tin": "oak", "den": "elm", "fog": "ash", "rib": "fir"}
CARRIER = {"sun": "day", "sky": "air", "sea": "ice", "mud": "dew"}
OUTSIDE = {"paw": "fur", "fin": "gil"}

BASE_REPS = {"boosted": 6, "carrier": 16, "outside": 12}
FT_REPS = {"core": 10, "boosted": 3, "carrier": 1}

ORDER = 3
ALPHA = 0.1
LAM = 5.0
TARGET_ALPHA = 0.02

# Single-token responses keep the scored perplexities two-tiered
# (confident vs junk), which the threshold-variant rules all separate
# identically; the temperature puts enough sampling noise into unfiltered
# data for the filter ablation to matter.
GEN_CONFIG = GenConfig(max_len=1, temperature=1.5)
EXPERIMENT_ITERATIONS = 44
EXPERIMENT_BATCH = 20

SEEDS = (
    ("ask tell tin gives", "oak"),
    ("see find den gives", "elm"),
    ("now show fog gives", "ash"),
    ("try tell sun gives", "day"),
    ("ask find sky gives", "air"),
)


def _lines(table: dict[str, str], reps: int) -> list[str]:
    return [f"{s} gives {o}" for s, o in table.items() for _ in range(reps)]


def base_corpus_lines() -> list[str]:
    return (
        _lines(BOOSTED, BASE_REPS["boosted"])
        + _lines(CARRIER, BASE_REPS["carrier"])
        + _lines(OUTSIDE, BASE_REPS["outside"])
    )


def ft_corpus_lines() -> list[str]:
    return _lines(CORE, FT_REPS["core"]) + _lines(BOOSTED, FT_REPS["boosted"]) + _lines(CARRIER, FT_REPS["carrier"])


def seed_examples() -> list[Example]:
    return [Example(prompt=p, response=r, provenance="seed", iteration=0) for p, r in SEEDS]


def seed_dataset() -> Dataset:
    return Dataset(examples=seed_examples(), manifest=Manifest(config_hash="fixture"))


def vocab_text() -> list[str]:
    lines = base_corpus_lines() + ft_corpus_lines()
    lines += [p for p, _ in SEEDS] + [r for _, r in SEEDS]
    lines += list(PREFIX_A) + list(PREFIX_B)
    return lines


@dataclass
class TwoDomainFixture:
    vocab: Vocabulary
    base: TabularModel
    finetuned: FineTunedModel

    @property
    def in_domain_lines(self) -> list[tuple[str, str]]:
        """Specialty probes: the boosted and carrier facts reachable from the
        seeds (generation cannot discover subjects absent from the pool)."""
        seeded = {seed.split()[2] for seed, _ in SEEDS}
        pairs = [(f"{s} gives", o) for s, o in BOOSTED.items() if s in seeded]
        pairs += [(f"{s} gives", o) for s, o in CARRIER.items() if s in seeded]
        return pairs

    @property
    def core_prompts(self) -> list[str]:
        return [f"{s} gives" for s in CORE]

    @property
    def outside_prompts(self) -> list[str]:
        return [f"{s} gives" for s in OUTSIDE]

    def strategy(self, batch_size: int = 20) -> GenerationStrategy:
        # prompt_alpha well below the per-context seed counts, or smoothing
        # mass drowns the well-formed prompt patterns
        return GenerationStrategy(
            kind="prefix_resample",
            vocab=self.vocab,
            batch_size=batch_size,
            demonstrations=5,
            prompt_order=ORDER,
            prompt_alpha=0.01,
            prompt_temperature=1.0,
            prompt_max_len=6,
        )

    def endpoint_strategy(self, transport, batch_size: int = 20, cache=None) -> GenerationStrategy:
        from deltadistill.remote import CompletionClient, RemoteEndpoint

        client = CompletionClient(
            RemoteEndpoint(base_url="http://mock.test/v1/completions", model="fixture-gen"),
            transport=transport,
            cache=cache,
        )
        return GenerationStrategy(
            kind="instruction_template",
            vocab=self.vocab,
            batch_size=batch_size,
            demonstrations=5,
            client=client,
        )

    def pool(self, seed: int) -> GenerationPool:
        return GenerationPool.from_seeds(seed_examples(), np.random.default_rng(seed))


def make_fixture(lam: float = LAM, alpha: float = ALPHA, order: int = ORDER) -> TwoDomainFixture:
    vocab = build_vocabulary(vocab_text(), max_size=256)
    base_seqs = [tokenize(line, vocab) for line in base_corpus_lines()]
    ft_seqs = [tokenize(line, vocab) for line in ft_corpus_lines()]
    base = fit_tabular(base_seqs, order=order, alpha=alpha, vocab=vocab, model_id="base")
    finetuned = apply_fine_tune(base, ft_seqs, lam=lam, model_id="finetuned")
    return TwoDomainFixture(vocab=vocab, base=base, finetuned=finetuned)


RULES = {
    "low_high": FilterRule.low_high(1.5),
    "low_low": FilterRule.low_low(1.5),
    "high_high": FilterRule.high_high(1.5),
    "none": FilterRule.none(),
}


def probe_pairs(fx: TwoDomainFixture) -> list[tuple]:
    return [(tokenize(p, fx.vocab), tokenize(r, fx.vocab)) for p, r in fx.in_domain_lines]


def run_pipeline_arm(fx: TwoDomainFixture, rule: FilterRule, seed: int, transport,
                     max_iterations: int = EXPERIMENT_ITERATIONS, target_size: int = 10_000):
    """One generation+filter run under a fixed budget; returns the result set."""
    from deltadistill.synthgen import build_dataset

    pool = fx.pool(seed)
    return build_dataset(
        pool,
        fx.endpoint_strategy(transport, EXPERIMENT_BATCH),
        fx.finetuned,
        fx.base,
        rule,
        target_size=target_size,
        max_iterations=max_iterations,
        gen_config=GEN_CONFIG,
    )


def distilled_probe_perplexity(fx: TwoDomainFixture, synth) -> float:
    from deltadistill.distill import distill_tabular
    from deltadistill.scoring import corpus_perplexity

    target = distill_tabular(synth.dataset, fx.vocab, order=ORDER, alpha=TARGET_ALPHA)
    return corpus_perplexity(target, probe_pairs(fx))
