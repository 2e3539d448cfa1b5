"""Sequence-level knowledge distillation of a filtered synthetic dataset.

The loss for one example is the total (not averaged) negative log-likelihood
of the response tokens under the target, conditioned on the prompt. The
closed-form tabular fit counts exactly the predicted positions, so as its
smoothing vanishes it is the loss minimizer within the per-context family;
the gradient-trained logit table optimizes the same objective iteratively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Dataset, Example, TokenSequence, Vocabulary
from .errors import DivergenceDetected, EmptyDataset, EmptyResponse
from .lm import CountTable, LanguageModel, TabularModel, step_log_probs

MAX_LOGIT_TABLE_CELLS = 50_000_000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.5
    rng_seed: int = 0
    # trajectory entries are recorded every report_every epochs (plus the
    # initial and final losses)
    report_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.report_every < 1:
            raise ValueError(f"report_every must be >= 1, got {self.report_every}")


def kd_loss(
    target: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    response: TokenSequence | Sequence[int],
) -> float:
    """Total negative log-likelihood of the response under the target; >= 0."""
    return float(-step_log_probs(target, prompt, response).sum())


def kd_examples(dataset: Dataset | Iterable[Example]) -> list[Example]:
    """Training examples: the kept pairs when verdicts exist, else everything.

    Discarded pairs never contribute; unscored datasets (hand-built fixtures,
    seed-only corpora) are used as-is.
    """
    examples = list(dataset)
    if any(ex.kept is not None for ex in examples):
        return [ex for ex in examples if ex.kept]
    return examples


def kd_pairs(
    dataset: Dataset | Iterable[Example],
    vocab: Vocabulary,
    append_eos: bool = True,
) -> list[tuple[TokenSequence, TokenSequence]]:
    """(prompt, response) token pairs for training and loss evaluation.

    Responses are treated as terminated: EOS is appended so targets learn to
    stop, matching how sampled responses were scored.
    """
    pairs = []
    for ex in kd_examples(dataset):
        prompt = ex.prompt_tokens(vocab)
        response_ids = ex.response_tokens(vocab).ids
        if append_eos:
            response_ids = response_ids + (vocab.eos_id,)
        if not response_ids:
            raise EmptyResponse(f"example with empty response: {ex.prompt!r}")
        pairs.append((prompt, TokenSequence(response_ids, vocab)))
    return pairs


def dataset_kd_loss(
    target: LanguageModel,
    pairs: Sequence[tuple[TokenSequence, TokenSequence]],
) -> tuple[float, float]:
    """(total, mean-per-example) kd_loss over prepared pairs."""
    losses = [kd_loss(target, p, r) for p, r in pairs]
    return float(sum(losses)), float(np.mean(losses))


def _response_transition_counts(
    pairs: Sequence[tuple[TokenSequence, TokenSequence]],
    order: int,
    vocab: Vocabulary,
) -> CountTable:
    # Counts only the predicted positions (response tokens given prompt
    # context), unlike corpus fitting which also counts prompt-internal
    # transitions. This is what makes the alpha->0 fit the loss minimizer.
    counts: CountTable = {}
    pad = (vocab.bos_id,) * max(0, order - 1)
    for prompt, response in pairs:
        context = pad + prompt.ids
        for tok in response.ids:
            key = context[max(0, len(context) - (order - 1)) :] if order > 1 else ()
            slot = counts.setdefault(key, {})
            slot[tok] = slot.get(tok, 0) + 1
            context = context + (tok,)
    return counts


def distill_tabular(
    dataset: Dataset | Iterable[Example],
    vocab: Vocabulary,
    order: int = 3,
    alpha: float = 0.1,
    model_id: str = "target-tabular",
) -> TabularModel:
    """Closed-form target: smoothed response-transition counts of the kept pairs."""
    pairs = kd_pairs(dataset, vocab)
    if not pairs:
        raise EmptyDataset("no training examples after filtering")
    counts = _response_transition_counts(pairs, order, vocab)
    return TabularModel(vocab, order, alpha, counts, model_id=model_id)


class LogitTableModel(LanguageModel):
    """Per-context logit rows, softmax-normalized; trained by gradient descent."""

    def __init__(self, vocab: Vocabulary, order: int = 3, model_id: str = "target-logit"):
        size = len(vocab)
        if size**order > MAX_LOGIT_TABLE_CELLS:
            raise ValueError(f"logit table |V|^order = {size}^{order} is too large")
        self.vocab = vocab
        self.order = order
        self.model_id = model_id
        # zeros => uniform softmax per context; deterministic start
        self.logits = np.zeros((size ** (order - 1), size), dtype=np.float64)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def context_index(self, context: Sequence[int]) -> int:
        ids = tuple(context)[max(0, len(context) - (self.order - 1)) :]
        ids = (self.vocab.bos_id,) * (self.order - 1 - len(ids)) + ids
        index = 0
        for t in ids:
            index = index * self.vocab_size + t
        return index

    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray:
        row = self.logits[self.context_index(context)]
        shifted = row - row.max()
        exp = np.exp(shifted)
        return exp / exp.sum()


def occurrence_weights(
    pairs: Sequence[tuple[TokenSequence, TokenSequence]],
    model: LogitTableModel,
) -> np.ndarray:
    """W[c, t] = (#times token t is predicted at context c) / n_examples."""
    weights = np.zeros_like(model.logits)
    for prompt, response in pairs:
        context = list(prompt.ids)
        for tok in response.ids:
            weights[model.context_index(context), tok] += 1.0
            context.append(tok)
    return weights / len(pairs)


def mean_kd_objective(logits: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-example kd_loss and its gradient with respect to the logits."""
    row_mass = weights.sum(axis=1)
    active = row_mass > 0
    rows = logits[active]
    row_max = rows.max(axis=1, keepdims=True)
    shifted = np.exp(rows - row_max)
    lse = np.log(shifted.sum(axis=1)) + row_max[:, 0]
    loss = float((row_mass[active] * lse).sum() - (weights[active] * rows).sum())

    grad = np.zeros_like(logits)
    softmax = shifted / shifted.sum(axis=1, keepdims=True)
    grad[active] = softmax * row_mass[active, None] - weights[active]
    return loss, grad


def distill_gradient(
    dataset: Dataset | Iterable[Example],
    vocab: Vocabulary,
    order: int = 3,
    config: TrainConfig = TrainConfig(),
    model_id: str = "target-logit",
) -> tuple[LogitTableModel, list[float]]:
    """Full-batch gradient descent on the mean per-example kd_loss.

    Returns the trained model and the loss trajectory (initial loss first,
    then one entry per epoch); the trajectory is non-increasing for small
    enough learning rates.
    """
    pairs = kd_pairs(dataset, vocab)
    if not pairs:
        raise EmptyDataset("no training examples after filtering")

    model = LogitTableModel(vocab, order, model_id=model_id)
    weights = occurrence_weights(pairs, model)

    loss, grad = mean_kd_objective(model.logits, weights)
    trajectory = [loss]
    # the isfinite check below is the divergence detector; silence the
    # intermediate overflow noise on the way to it
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            model.logits -= config.learning_rate * grad
            loss, grad = mean_kd_objective(model.logits, weights)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became non-finite at epoch {epoch}")
            if epoch % config.report_every == 0 or epoch == config.epochs:
                trajectory.append(loss)
    return model, trajectory
