from __future__ import annotations

import pytest

import fixtures


@pytest.fixture(scope="session")
def fx():
    return fixtures.make_fixture()


@pytest.fixture(scope="session")
def identical_models(fx):
    """Base model paired with a zero-weight fine-tune: p_F == p_B exactly."""
    from deltadistill.lm import apply_fine_tune
    from deltadistill.corpus import tokenize

    ft_seqs = [tokenize(line, fx.vocab) for line in fixtures.ft_corpus_lines()]
    null_ft = apply_fine_tune(fx.base, ft_seqs, lam=0.0, model_id="null-finetune")
    return null_ft, fx.base
