"""Autoregressive language models backed by smoothed n-gram count tables.

A base model is fit as exact n-gram counts over BOS-framed, EOS-terminated
sequences. Fine-tuning applies an additive count delta scaled by a blending
weight, keeping the base table untouched. All distributions use additive
smoothing, so every token has strictly positive probability everywhere.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Dataset, TokenSequence, Vocabulary
from .errors import EmptyCorpus, EmptyResponse, IoFailure, MalformedRecord, VocabularyMismatch

# context tuple (length order-1) -> token id -> count
CountTable = dict[tuple[int, ...], dict[int, float]]


class LanguageModel(ABC):
    """Next-token distribution p(.|context) over a fixed vocabulary."""

    model_id: str = "model"
    vocab: Vocabulary | None = None

    @property
    @abstractmethod
    def vocab_size(self) -> int: ...

    @abstractmethod
    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray:
        """Return p(.|context) as a length-``vocab_size`` vector summing to 1.

        The returned array may be cached internally; treat it as read-only.
        """


def _as_ids(seq: TokenSequence | Sequence[int] | None) -> tuple[int, ...]:
    if seq is None:
        return ()
    if isinstance(seq, TokenSequence):
        return seq.ids
    return tuple(seq)


def _rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def count_ngrams(sequences: Iterable[TokenSequence], order: int, vocab: Vocabulary) -> CountTable:
    """Exact n-gram counts over BOS-framed, EOS-terminated sequences."""
    counts: CountTable = {}
    pad = (vocab.bos_id,) * (order - 1)
    for seq in sequences:
        if seq.vocab != vocab:
            raise VocabularyMismatch("sequence was tokenized under a different vocabulary")
        framed = pad + seq.ids + (vocab.eos_id,)
        for i in range(order - 1, len(framed)):
            ctx = framed[i - order + 1 : i]
            slot = counts.setdefault(ctx, {})
            slot[framed[i]] = slot.get(framed[i], 0) + 1
    return counts


def dataset_sequences(ds: Dataset, vocab: Vocabulary) -> list[TokenSequence]:
    """Concatenated prompt+response token sequences, one per example."""
    out = []
    for ex in ds:
        ids = ex.prompt_tokens(vocab).ids + ex.response_tokens(vocab).ids
        out.append(TokenSequence(ids, vocab))
    return out


def _normalize_corpus(
    corpus: Dataset | Iterable[TokenSequence], vocab: Vocabulary | None
) -> tuple[list[TokenSequence], Vocabulary]:
    if isinstance(corpus, Dataset):
        if vocab is None:
            raise ValueError("a vocabulary is required to tokenize a Dataset corpus")
        sequences = dataset_sequences(corpus, vocab)
    else:
        sequences = list(corpus)
        if sequences and vocab is None:
            vocab = sequences[0].vocab
    if not sequences:
        raise EmptyCorpus("corpus contains no sequences")
    assert vocab is not None
    return sequences, vocab


class TabularModel(LanguageModel):
    """Order-n count-table model with additive smoothing alpha > 0."""

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        alpha: float,
        counts: CountTable | None = None,
        model_id: str = "tabular",
    ):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {alpha}")
        self.vocab = vocab
        self.order = order
        self.alpha = alpha
        self.counts: CountTable = counts if counts is not None else {}
        self.model_id = model_id
        self._totals = {ctx: float(sum(slot.values())) for ctx, slot in self.counts.items()}
        self._dist_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def context_key(self, context: Sequence[int]) -> tuple[int, ...]:
        """Last order-1 context tokens, left-padded with BOS."""
        ids = tuple(context)[max(0, len(context) - (self.order - 1)) :]
        return (self.vocab.bos_id,) * (self.order - 1 - len(ids)) + ids

    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray:
        key = self.context_key(context)
        dist = self._dist_cache.get(key)
        if dist is None:
            dist = _smoothed(self.counts.get(key), self._totals.get(key, 0.0), self.alpha, self.vocab_size)
            self._dist_cache[key] = dist
        return dist


@dataclass(frozen=True)
class FineTuneDelta:
    """Additive count delta with blending weight, kept separate from the base."""

    counts: CountTable
    lam: float

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


class FineTunedModel(LanguageModel):
    """Base table blended with lambda-scaled delta counts; base stays unchanged."""

    def __init__(self, base: TabularModel, delta: FineTuneDelta, model_id: str = "finetuned"):
        self.base = base
        self.delta = delta
        self.vocab = base.vocab
        self.order = base.order
        self.alpha = base.alpha
        self.model_id = model_id
        self._delta_totals = {ctx: float(sum(slot.values())) for ctx, slot in delta.counts.items()}
        self._dist_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def next_token_distribution(self, context: Sequence[int]) -> np.ndarray:
        key = self.base.context_key(context)
        dist = self._dist_cache.get(key)
        if dist is not None:
            return dist
        lam = self.delta.lam
        arr = np.full(self.vocab_size, self.alpha, dtype=np.float64)
        total = self.alpha * self.vocab_size
        base_slot = self.base.counts.get(key)
        if base_slot:
            for tok, c in base_slot.items():
                arr[tok] += c
            total += self.base._totals[key]
        delta_slot = self.delta.counts.get(key)
        if delta_slot and lam:
            for tok, c in delta_slot.items():
                arr[tok] += lam * c
            total += lam * self._delta_totals[key]
        arr /= total
        self._dist_cache[key] = arr
        return arr


def _smoothed(slot: Mapping[int, float] | None, total: float, alpha: float, size: int) -> np.ndarray:
    arr = np.full(size, alpha, dtype=np.float64)
    if slot:
        for tok, c in slot.items():
            arr[tok] += c
    arr /= total + alpha * size
    return arr


def fit_tabular(
    corpus: Dataset | Iterable[TokenSequence],
    order: int = 3,
    alpha: float = 0.1,
    vocab: Vocabulary | None = None,
    model_id: str = "tabular",
) -> TabularModel:
    """Fit exact n-gram counts on a corpus of sequences or a Dataset."""
    sequences, vocab = _normalize_corpus(corpus, vocab)
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    counts = count_ngrams(sequences, order, vocab)
    return TabularModel(vocab, order, alpha, counts, model_id=model_id)


def apply_fine_tune(
    base: TabularModel,
    ft_corpus: Dataset | Iterable[TokenSequence],
    lam: float = 5.0,
    model_id: str = "finetuned",
) -> FineTunedModel:
    """Blend lambda-scaled counts of ``ft_corpus`` onto ``base`` without mutating it.

    With lam = 0 the result scores identically to the base model.
    """
    sequences, vocab = _normalize_corpus(ft_corpus, base.vocab)
    if vocab != base.vocab:
        raise VocabularyMismatch("fine-tune corpus uses a different vocabulary")
    delta = FineTuneDelta(count_ngrams(sequences, base.order, base.vocab), lam)
    return FineTunedModel(base, delta, model_id=model_id)


def sample(
    model: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    max_len: int = 16,
    temperature: float = 1.0,
    rng: np.random.Generator | int | None = None,
    greedy: bool = False,
) -> TokenSequence:
    """Sample a response autoregressively, stopping at EOS or ``max_len``.

    Temperature rescales each step's distribution as p**(1/T); greedy mode
    takes the per-step argmax instead (exposed separately so T=0 is never
    needed). Deterministic for a fixed rng seed.
    """
    if model.vocab is None:
        raise ValueError("sampling requires a vocabulary-backed model")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    gen = _rng(rng)
    context = list(_as_ids(prompt))
    out: list[int] = []
    for _ in range(max_len):
        dist = model.next_token_distribution(context)
        if greedy:
            tok = int(np.argmax(dist))
        else:
            if temperature != 1.0:
                dist = dist ** (1.0 / temperature)
                dist = dist / dist.sum()
            tok = int(gen.choice(len(dist), p=dist))
        out.append(tok)
        context.append(tok)
        if tok == model.vocab.eos_id:
            break
    return TokenSequence(tuple(out), model.vocab)


def step_log_probs(
    model: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    response: TokenSequence | Sequence[int],
) -> np.ndarray:
    """Natural-log probability of each response token given prompt and prefix."""
    response_ids = _as_ids(response)
    if not response_ids:
        raise EmptyResponse("cannot score an empty response")
    context = list(_as_ids(prompt))
    out = np.empty(len(response_ids), dtype=np.float64)
    for i, tok in enumerate(response_ids):
        out[i] = np.log(model.next_token_distribution(context)[tok])
        context.append(tok)
    return out


def log_likelihood(
    model: LanguageModel,
    prompt: TokenSequence | Sequence[int] | None,
    response: TokenSequence | Sequence[int],
) -> float:
    """Per-token average log-likelihood of the response under ``model``."""
    return float(np.mean(step_log_probs(model, prompt, response)))


def save_model(model: LanguageModel, path: str | Path, config_hash: str = "") -> None:
    """Serialize a model as JSON lines with an (order, alpha, vocab hash) header.

    Count tables are stored as exact integers when integral, so reload is
    bit-exact.
    """
    if isinstance(model, FineTunedModel):
        kind = "finetuned"
    elif isinstance(model, TabularModel):
        kind = "tabular"
    elif hasattr(model, "logits"):
        kind = "logit_table"
    else:
        raise ValueError(f"cannot serialize model of type {type(model).__name__}")

    header = {
        "type": "header",
        "kind": kind,
        "order": model.order,
        "alpha": getattr(model, "alpha", None),
        "vocab_hash": model.vocab.content_hash(),
        "model_id": model.model_id,
    }
    if config_hash:
        header["config_hash"] = config_hash
    if kind == "finetuned":
        header["lambda"] = model.delta.lam

    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            if kind == "tabular":
                _write_count_rows(fh, model.counts, "counts")
            elif kind == "finetuned":
                _write_count_rows(fh, model.base.counts, "counts")
                _write_count_rows(fh, model.delta.counts, "delta")
            else:
                for row in model.logits:
                    fh.write(json.dumps({"logits": row.tolist()}) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write model to {path}: {exc}") from exc


def _write_count_rows(fh, counts: CountTable, field_name: str) -> None:
    for ctx in sorted(counts):
        slot = {str(tok): _as_exact(c) for tok, c in sorted(counts[ctx].items())}
        fh.write(json.dumps({"ctx": list(ctx), field_name: slot}) + "\n")


def _as_exact(value: float) -> int | float:
    return int(value) if float(value).is_integer() else float(value)


def load_model(path: str | Path, vocab: Vocabulary) -> LanguageModel:
    """Reload a model written by :func:`save_model`, verifying the vocab hash."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read model from {path}: {exc}") from exc
    if not lines:
        raise MalformedRecord(1, "empty model file")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise MalformedRecord(1, "first line is not a model header")
    if header["vocab_hash"] != vocab.content_hash():
        raise VocabularyMismatch(
            f"model was built against vocabulary {header['vocab_hash']}, got {vocab.content_hash()}"
        )

    kind = header["kind"]
    if kind == "logit_table":
        from .distill import LogitTableModel

        rows = [json.loads(line)["logits"] for line in lines[1:]]
        model = LogitTableModel(vocab, header["order"], model_id=header["model_id"])
        model.logits = np.asarray(rows, dtype=np.float64)
        return model

    counts: CountTable = {}
    delta_counts: CountTable = {}
    for lineno, line in enumerate(lines[1:], start=2):
        row = json.loads(line)
        ctx = tuple(row["ctx"])
        if "counts" in row:
            counts[ctx] = {int(t): c for t, c in row["counts"].items()}
        elif "delta" in row:
            delta_counts[ctx] = {int(t): c for t, c in row["delta"].items()}
        else:
            raise MalformedRecord(lineno, "row has neither counts nor delta")

    base = TabularModel(vocab, header["order"], header["alpha"], counts, model_id=header["model_id"])
    if kind == "tabular":
        return base
    base.model_id = "base-of-" + header["model_id"]
    return FineTunedModel(base, FineTuneDelta(delta_counts, header["lambda"]), model_id=header["model_id"])
