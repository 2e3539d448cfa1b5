from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import fixtures
import mockend
from deltadistill.analysis import decompose_margin
from deltadistill.corpus import TokenSequence, tokenize
from deltadistill.errors import EmptyResponse, InvalidRuleParameters
from deltadistill.lm import TabularModel, step_log_probs
from deltadistill.scoring import (
    DISCARDED,
    KEPT,
    FilterRule,
    GenConfig,
    ScoredPair,
    apply_filter,
    corpus_perplexity,
    low_high_violations,
    margin,
    perplexity,
    score_pair,
    with_verdict,
)
from test_lm import OneHotModel


def test_perplexity_deterministic_continuation_is_one():
    model = OneHotModel(size=6, target=2)
    assert perplexity(model, None, [2, 2]) == 1.0


def test_perplexity_uniform_closed_form(fx):
    uniform = TabularModel(fx.vocab, 2, 1.0, {})
    size = len(fx.vocab)
    assert perplexity(uniform, None, tokenize("tin gives", fx.vocab)) == pytest.approx(size, rel=1e-12)


def test_perplexity_two_domain_hand_derived(fx):
    # boosted fact scored under both models; conditionals read off the
    # count tables: base has 6 observations, fine-tune adds 5 * 3 = 15.
    size = len(fx.vocab)
    alpha = fixtures.ALPHA
    prompt = tokenize("tin gives", fx.vocab)
    response = TokenSequence(tokenize("oak", fx.vocab).ids + (fx.vocab.eos_id,), fx.vocab)

    p_ft = (6 + 15 + alpha) / (6 + 15 + alpha * size)
    p_base = (6 + alpha) / (6 + alpha * size)
    expected_f = 1.0 / p_ft  # both response tokens share the same conditional
    expected_b = 1.0 / p_base

    assert perplexity(fx.finetuned, prompt, response) == pytest.approx(expected_f, rel=1e-12)
    assert perplexity(fx.base, prompt, response) == pytest.approx(expected_b, rel=1e-12)
    assert expected_f < expected_b


def test_perplexity_rejects_empty_response(fx):
    with pytest.raises(EmptyResponse):
        perplexity(fx.base, None, tokenize("", fx.vocab))


def test_margin_zero():
    assert margin(1.0, 1.0) == 0.0


def test_margin_paper_kept_example():
    m = margin(1.19, 4.22)
    assert m == pytest.approx(math.log(4.22 / 1.19), abs=1e-12)
    assert m > 0
    assert FilterRule.low_high(1.5).keeps(1.19, 4.22)


def test_margin_paper_removed_example():
    assert margin(2.01, 1.66) < 0
    assert not FilterRule.low_high(1.5).keeps(2.01, 1.66)


def test_margin_antisymmetry():
    for a, b in [(1.2, 3.4), (2.0, 2.0), (1.01, 50.0)]:
        assert margin(a, b) == pytest.approx(-margin(b, a), abs=1e-12)


def test_filter_paper_near_tie_removed():
    pair = ScoredPair(prompt="p", response_f="f", response_b="b", ppl_f=1.67, ppl_b=1.68)
    assert apply_filter(FilterRule.low_high(1.5), pair) == DISCARDED


def test_filter_boundary_cases():
    rule = FilterRule.low_high(1.5)
    # strict inequality on the fine-tuned side
    assert not rule.keeps(1.5, 2.0)
    # inclusive on the base side
    assert rule.keeps(1.4, 1.5)
    # ratio boundary is inclusive
    assert FilterRule.ratio(1.5).keeps(1.0, 1.5)


def test_filter_variant_semantics():
    assert FilterRule.symmetric(1.3).keeps(1.2, 1.3)
    assert not FilterRule.symmetric(1.3).keeps(1.3, 2.0)
    assert FilterRule.asymmetric(1.2, 1.6).keeps(1.1, 1.7)
    assert not FilterRule.asymmetric(1.2, 1.6).keeps(1.1, 1.6)  # strict >
    assert FilterRule.low_low(1.5).keeps(1.2, 1.4)
    assert FilterRule.high_high(1.5).keeps(1.5, 1.5)
    assert FilterRule.none().keeps(100.0, 1.0)


def test_invalid_rule_parameters():
    with pytest.raises(InvalidRuleParameters):
        FilterRule.low_high(1.0)
    with pytest.raises(InvalidRuleParameters):
        FilterRule.ratio(0.0)
    with pytest.raises(InvalidRuleParameters):
        FilterRule.asymmetric(1.7, 1.6)
    with pytest.raises(InvalidRuleParameters):
        FilterRule("mystery", tau=2.0)


@given(
    ppl_f=st.floats(min_value=1.0, max_value=100.0, allow_nan=False),
    ppl_b=st.floats(min_value=1.0, max_value=100.0, allow_nan=False),
    tau=st.floats(min_value=1.01, max_value=50.0, allow_nan=False),
)
def test_rule_partition(ppl_f, ppl_b, tau):
    # low_high, low_low, high_high and the residual quadrant partition the plane
    verdicts = [
        FilterRule.low_high(tau).keeps(ppl_f, ppl_b),
        FilterRule.low_low(tau).keeps(ppl_f, ppl_b),
        FilterRule.high_high(tau).keeps(ppl_f, ppl_b),
        ppl_f >= tau and ppl_b < tau,
    ]
    assert sum(verdicts) == 1


def test_scored_pair_margin_invariant():
    pair = ScoredPair(prompt="p", response_f="f", response_b="b", ppl_f=1.3, ppl_b=2.6)
    assert pair.margin == math.log(2.6) - math.log(1.3)


def test_with_verdict_sets_rule_id():
    pair = ScoredPair(prompt="p", response_f="f", response_b="b", ppl_f=1.2, ppl_b=2.0)
    verdicted = with_verdict(FilterRule.low_high(1.5), pair)
    assert verdicted.verdict == KEPT
    assert verdicted.rule == "low_high(1.5)"


def test_gen_config_validation():
    with pytest.raises(ValueError):
        GenConfig(max_len=0)
    with pytest.raises(ValueError):
        GenConfig(temperature=0.0)
    with pytest.raises(ValueError):
        GenConfig(samples_per_model=0)


def test_score_pair_identical_models_greedy_zero_margin(fx, identical_models):
    null_ft, base = identical_models
    prompt = tokenize("tin gives", fx.vocab)
    pair = score_pair(null_ft, base, prompt, GenConfig(max_len=4, greedy=True), rng=0)
    assert pair.response_f == pair.response_b
    assert pair.margin == 0.0
    assert pair.verdict is None


def test_score_pair_scores_both_under_finetuned(fx):
    # base response must be scored under the fine-tuned model, not the base:
    # a greedy base draw on a core prompt is junk under the fine-tune.
    prompt = tokenize("zel gives", fx.vocab)
    pair = score_pair(fx.finetuned, fx.base, prompt, GenConfig(max_len=1, greedy=True), rng=1)
    assert pair.response_f == "kip"
    assert pair.ppl_f < 1.5
    assert pair.ppl_b > 10


def test_mean_margin_positive_on_domain_prompts(fx):
    # pipeline-level margins on boosted prompts across 500 sampled pairs
    rng = np.random.default_rng(99)
    prompts = [tokenize(f"{s} gives", fx.vocab) for s in fixtures.BOOSTED]
    margins = []
    for i in range(500):
        pair = score_pair(fx.finetuned, fx.base, prompts[i % len(prompts)], fixtures.GEN_CONFIG, rng)
        margins.append(pair.margin)
    se = np.std(margins) / math.sqrt(len(margins))
    assert np.mean(margins) > 3 * se


def test_monte_carlo_margin_matches_exact_expectation(fx):
    # independent fixed-length sampler (the oracle) against the enumeration
    length = 3
    prompt = tokenize("tin gives", fx.vocab)
    exact = decompose_margin(fx.finetuned, fx.base, prompt, length).expected_margin

    rng = np.random.default_rng(17)

    def draw_total_loglik(model):
        ctx = list(prompt.ids)
        for _ in range(length):
            dist = model.next_token_distribution(ctx)
            ctx.append(int(rng.choice(len(dist), p=dist)))
        seq = ctx[len(prompt.ids):]
        return float(step_log_probs(fx.finetuned, prompt, seq).sum())

    samples = [draw_total_loglik(fx.finetuned) - draw_total_loglik(fx.base) for _ in range(2000)]
    se = np.std(samples) / math.sqrt(len(samples))
    assert np.mean(samples) == pytest.approx(exact, abs=3 * se)


def test_low_high_implication_on_pipeline_run(fx):
    # every kept pair satisfies m > 0 and m > log(tau / ppl_f)
    synth = fixtures.run_pipeline_arm(fx, FilterRule.low_high(1.5), seed=0, transport=mockend.fixture_transport, max_iterations=8)
    pairs = [
        ScoredPair(prompt=ex.prompt, response_f=ex.response, response_b="", ppl_f=ex.ppl_f, ppl_b=ex.ppl_b)
        for ex in synth.kept
    ]
    pairs = [with_verdict(FilterRule.low_high(1.5), p) for p in pairs]
    assert pairs
    assert low_high_violations(pairs, 1.5) == []


def test_corpus_perplexity_uniform(fx):
    uniform = TabularModel(fx.vocab, 2, 1.0, {})
    pairs = fixtures.probe_pairs(fx)
    assert corpus_perplexity(uniform, pairs) == pytest.approx(len(fx.vocab), rel=1e-12)


def test_best_of_k_sampling_lowers_fine_tuned_perplexity(fx):
    # best-of-k keeps the draw the fine-tuned scorer likes most, so across
    # many prompts k=8 can never average worse than k=1 under the same seed
    prompt = tokenize("tin gives", fx.vocab)
    single, best = [], []
    for seed in range(40):
        single.append(score_pair(fx.finetuned, fx.base, prompt, GenConfig(max_len=1, temperature=1.5), rng=seed).ppl_f)
        best.append(
            score_pair(
                fx.finetuned, fx.base, prompt, GenConfig(max_len=1, temperature=1.5, samples_per_model=8), rng=seed
            ).ppl_f
        )
    assert np.mean(best) < np.mean(single)
