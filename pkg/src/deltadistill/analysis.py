"""Exact verification of the margin decomposition, plus diagnostic artifacts.

The expected margin E[m] of a model pair decomposes as an entropy drop plus a
KL term: E[m] = (H(p_B) - H(p_F)) + KL(p_B || p_F). The identity is exact for
fixed-length sequence distributions, which is what the enumeration here
produces (exactly L tokens, no EOS framing); per-token figures follow by
dividing by L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import TokenSequence
from .errors import BudgetExceeded
from .lm import LanguageModel, _as_ids
from .scoring import ScoredPair

DEFAULT_BUDGET = 10**6


def enumerate_sequence_distribution(
    model: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    length: int,
    budget: int = DEFAULT_BUDGET,
) -> dict[tuple[int, ...], float]:
    """Exact probability of every length-``length`` token sequence.

    No EOS framing is applied in this mode; the result covers the full
    |V|**length grid and sums to 1 up to float error.
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    size = model.vocab_size
    if size**length > budget:
        raise BudgetExceeded(f"|V|^L = {size}^{length} exceeds budget {budget}")
    prompt_ids = list(_as_ids(prompt))

    out: dict[tuple[int, ...], float] = {}
    stack: list[tuple[tuple[int, ...], float]] = [((), 1.0)]
    while stack:
        prefix, prob = stack.pop()
        dist = model.next_token_distribution(prompt_ids + list(prefix))
        if len(prefix) == length - 1:
            for tok in range(size):
                out[prefix + (tok,)] = prob * float(dist[tok])
        else:
            for tok in range(size):
                stack.append((prefix + (tok,), prob * float(dist[tok])))
    return out


@dataclass(frozen=True)
class MarginDecomposition:
    """Exact expectation of the margin and its entropy/KL split at fixed length."""

    expected_margin: float
    entropy_base: float
    entropy_ft: float
    kl: float
    length: int

    @property
    def entropy_drop(self) -> float:
        return self.entropy_base - self.entropy_ft

    @property
    def residual(self) -> float:
        return self.expected_margin - self.entropy_drop - self.kl

    def to_record(self) -> dict:
        return {
            "expected_margin": self.expected_margin,
            "entropy_base": self.entropy_base,
            "entropy_ft": self.entropy_ft,
            "kl": self.kl,
            "entropy_drop": self.entropy_drop,
            "residual": self.residual,
            "length": self.length,
        }


def decompose_margin(
    model_f: LanguageModel,
    model_b: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    length: int,
    budget: int = DEFAULT_BUDGET,
) -> MarginDecomposition:
    """Compute E[m], H(p_F), H(p_B) and KL(p_B || p_F) by exact enumeration.

    Margins use total (length-summed) log-likelihoods under the fine-tuned
    scorer, with y drawn from each model's own sequence distribution.
    """
    dist_f = enumerate_sequence_distribution(model_f, prompt, length, budget)
    dist_b = enumerate_sequence_distribution(model_b, prompt, length, budget)

    exp_ll_f_under_f = 0.0  # E_{y~p_F}[log p_F(y)]
    entropy_ft = 0.0
    for seq, p in dist_f.items():
        log_pf = math.log(p)
        exp_ll_f_under_f += p * log_pf
        entropy_ft -= p * log_pf

    exp_ll_f_under_b = 0.0  # E_{y~p_B}[log p_F(y)]
    entropy_base = 0.0
    kl = 0.0
    for seq, p in dist_b.items():
        log_pf = math.log(dist_f[seq])
        log_pb = math.log(p)
        exp_ll_f_under_b += p * log_pf
        entropy_base -= p * log_pb
        kl += p * (log_pb - log_pf)

    return MarginDecomposition(
        expected_margin=exp_ll_f_under_f - exp_ll_f_under_b,
        entropy_base=entropy_base,
        entropy_ft=entropy_ft,
        kl=kl,
        length=length,
    )


@dataclass(frozen=True)
class Histogram:
    """Fixed-edge histogram; values outside the binned range go to overflow."""

    edges: tuple[float, ...]
    counts: tuple[int, ...]
    overflow: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.overflow

    def to_record(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts), "overflow": self.overflow}


def perplexity_histogram(
    pairs: Iterable[ScoredPair],
    which: str,
    edges: Sequence[float],
) -> Histogram:
    """Bin ppl_f or ppl_b values of scored pairs into [e_i, e_{i+1}) bins.

    Values at or beyond the last edge (and any below the first) are counted
    in ``overflow`` rather than dropped.
    """
    if which not in ("f", "b"):
        raise ValueError(f"which must be 'f' or 'b', got {which!r}")
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or any(a >= b for a, b in zip(edges, edges[1:])):
        raise ValueError("edges must be strictly increasing with at least two entries")

    counts = [0] * (len(edges) - 1)
    overflow = 0
    for pair in pairs:
        value = pair.ppl_f if which == "f" else pair.ppl_b
        if value < edges[0] or value >= edges[-1]:
            overflow += 1
            continue
        for i in range(len(counts)):
            if edges[i] <= value < edges[i + 1]:
                counts[i] += 1
                break
    return Histogram(edges=edges, counts=tuple(counts), overflow=overflow)


def distinct_n(prompts: Sequence[str], n: int) -> float:
    """Fraction of distinct whitespace n-grams across all prompts, in [0, 1]."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not prompts:
        raise ValueError("prompts must be non-empty")
    seen: set[tuple[str, ...]] = set()
    total = 0
    for prompt in prompts:
        tokens = prompt.split()
        for i in range(len(tokens) - n + 1):
            seen.add(tuple(tokens[i : i + n]))
            total += 1
    if total == 0:
        return 0.0
    return len(seen) / total
