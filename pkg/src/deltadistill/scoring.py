"""Dual-model response scoring and the perplexity-difference filter family.

Both responses to a prompt are scored under the fine-tuned model only; the
filter keeps a pair when the fine-tuned model is confident about its own
response while rating the base model's response poorly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .corpus import TokenSequence, detokenize
from .errors import InvalidRuleParameters
from .lm import LanguageModel, log_likelihood, sample, step_log_probs

KEPT = "kept"
DISCARDED = "discarded"

RULE_KINDS = ("low_high", "symmetric", "asymmetric", "ratio", "low_low", "high_high", "none")


def perplexity(scorer: LanguageModel, prompt, response) -> float:
    """exp of the negative per-token average log-likelihood of the response."""
    return float(math.exp(-log_likelihood(scorer, prompt, response)))


def margin(ppl_f: float, ppl_b: float) -> float:
    """Log-likelihood margin under the fine-tuned scorer, in perplexity form."""
    return math.log(ppl_b) - math.log(ppl_f)


@dataclass(frozen=True)
class FilterRule:
    """One member of the filter family; a pure predicate on (ppl_f, ppl_b).

    Boundary strictness follows each rule's source exactly: low_high and
    symmetric use ppl_f < tau <= ppl_b, asymmetric uses strict < and >,
    ratio uses rho * ppl_f <= ppl_b.
    """

    kind: str
    tau: float | None = None
    tau_f: float | None = None
    tau_b: float | None = None
    rho: float | None = None

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise InvalidRuleParameters(f"unknown rule kind: {self.kind!r}")
        if self.kind in ("low_high", "symmetric", "low_low", "high_high"):
            if self.tau is None or self.tau <= 1:
                raise InvalidRuleParameters(f"{self.kind} requires tau > 1, got {self.tau}")
        elif self.kind == "asymmetric":
            if self.tau_f is None or self.tau_b is None or self.tau_f <= 1 or self.tau_b <= 1:
                raise InvalidRuleParameters(
                    f"asymmetric requires tau_f > 1 and tau_b > 1, got ({self.tau_f}, {self.tau_b})"
                )
            if self.tau_f > self.tau_b:
                raise InvalidRuleParameters(f"asymmetric requires tau_f <= tau_b, got ({self.tau_f}, {self.tau_b})")
        elif self.kind == "ratio":
            if self.rho is None or self.rho <= 0:
                raise InvalidRuleParameters(f"ratio requires rho > 0, got {self.rho}")

    @classmethod
    def low_high(cls, tau: float = 1.5) -> "FilterRule":
        return cls("low_high", tau=tau)

    @classmethod
    def symmetric(cls, tau: float = 1.3) -> "FilterRule":
        return cls("symmetric", tau=tau)

    @classmethod
    def asymmetric(cls, tau_f: float = 1.2, tau_b: float = 1.6) -> "FilterRule":
        return cls("asymmetric", tau_f=tau_f, tau_b=tau_b)

    @classmethod
    def ratio(cls, rho: float = 1.5) -> "FilterRule":
        return cls("ratio", rho=rho)

    @classmethod
    def low_low(cls, tau: float = 1.5) -> "FilterRule":
        return cls("low_low", tau=tau)

    @classmethod
    def high_high(cls, tau: float = 1.5) -> "FilterRule":
        return cls("high_high", tau=tau)

    @classmethod
    def none(cls) -> "FilterRule":
        return cls("none")

    def keeps(self, ppl_f: float, ppl_b: float) -> bool:
        if self.kind in ("low_high", "symmetric"):
            return ppl_f < self.tau <= ppl_b
        if self.kind == "asymmetric":
            return ppl_f < self.tau_f and ppl_b > self.tau_b
        if self.kind == "ratio":
            return self.rho * ppl_f <= ppl_b
        if self.kind == "low_low":
            return ppl_f < self.tau and ppl_b < self.tau
        if self.kind == "high_high":
            return ppl_f >= self.tau and ppl_b >= self.tau
        return True

    @property
    def rule_id(self) -> str:
        if self.kind in ("low_high", "symmetric", "low_low", "high_high"):
            return f"{self.kind}({self.tau:g})"
        if self.kind == "asymmetric":
            return f"asymmetric({self.tau_f:g},{self.tau_b:g})"
        if self.kind == "ratio":
            return f"ratio({self.rho:g})"
        return "none"


@dataclass(frozen=True)
class ScoredPair:
    """A prompt with both model responses, scored under the fine-tuned model.

    ``margin`` is always log(ppl_b) - log(ppl_f) by construction.
    """

    prompt: str
    response_f: str
    response_b: str
    ppl_f: float
    ppl_b: float
    margin: float = field(init=False)
    verdict: str | None = None
    rule: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "margin", margin(self.ppl_f, self.ppl_b))


def apply_filter(rule: FilterRule, pair: ScoredPair) -> str:
    """Verdict for a fully scored pair; a pure function of (rule, ppl_f, ppl_b)."""
    return KEPT if rule.keeps(pair.ppl_f, pair.ppl_b) else DISCARDED


def with_verdict(rule: FilterRule, pair: ScoredPair) -> ScoredPair:
    return replace(pair, verdict=apply_filter(rule, pair), rule=rule.rule_id)


@dataclass(frozen=True)
class GenConfig:
    """Response-sampling settings shared by both models.

    ``samples_per_model`` > 1 keeps the best-of-k response (lowest perplexity
    under the fine-tuned scorer); the default of 1 matches the pipeline's
    single-draw behavior.
    """

    max_len: int = 16
    temperature: float = 1.0
    greedy: bool = False
    samples_per_model: int = 1

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.samples_per_model < 1:
            raise ValueError(f"samples_per_model must be >= 1, got {self.samples_per_model}")


def visible_text(seq: TokenSequence) -> str:
    """Detokenized text with BOS/EOS framing tokens removed."""
    vocab = seq.vocab
    kept = [i for i in seq.ids if i not in (vocab.bos_id, vocab.eos_id)]
    return detokenize(TokenSequence(tuple(kept), vocab))


def score_pair(
    model_f: LanguageModel,
    model_b: LanguageModel,
    prompt: TokenSequence,
    config: GenConfig = GenConfig(),
    rng: np.random.Generator | int | None = None,
) -> ScoredPair:
    """Sample one response per model for the same prompt and score both under
    the fine-tuned model. The verdict is left unset."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    def draw(model: LanguageModel) -> tuple[TokenSequence, float]:
        best: tuple[TokenSequence, float] | None = None
        for _ in range(config.samples_per_model):
            seq = sample(
                model,
                prompt,
                max_len=config.max_len,
                temperature=config.temperature,
                rng=gen,
                greedy=config.greedy,
            )
            ppl = perplexity(model_f, prompt, seq)
            if best is None or ppl < best[1]:
                best = (seq, ppl)
        assert best is not None
        return best

    seq_f, ppl_f = draw(model_f)
    seq_b, ppl_b = draw(model_b)
    return ScoredPair(
        prompt=visible_text(prompt),
        response_f=visible_text(seq_f),
        response_b=visible_text(seq_b),
        ppl_f=ppl_f,
        ppl_b=ppl_b,
    )


def low_high_violations(pairs: Iterable[ScoredPair], tau: float) -> list[ScoredPair]:
    """Pairs kept by low_high(tau) that violate the margin implication
    m > 0 and m > log(tau / ppl_f). Empty on every conforming run."""
    out = []
    for pair in pairs:
        if pair.verdict == KEPT:
            if not (pair.margin > 0 and pair.margin > math.log(tau / pair.ppl_f)):
                out.append(pair)
    return out


def corpus_perplexity(
    scorer: LanguageModel,
    pairs: Sequence[tuple[TokenSequence | None, TokenSequence]],
) -> float:
    """Pooled perplexity over (prompt, response) pairs: exp of the mean
    negative log-likelihood across all response tokens."""
    total = 0.0
    n_tokens = 0
    for prompt, response in pairs:
        lps = step_log_probs(scorer, prompt, response)
        total += float(lps.sum())
        n_tokens += len(lps)
    if n_tokens == 0:
        raise ValueError("no response tokens to score")
    return float(math.exp(-total / n_tokens))
