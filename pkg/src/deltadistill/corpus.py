"""Tokenization, vocabulary management, and dataset persistence.

Text is whitespace-tokenized at word level; unknown words map to UNK.
Datasets persist as UTF-8 JSON lines with a manifest on the first line.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import EmptyCorpus, IoFailure, MalformedRecord

BOS = "<bos>"
EOS = "<eos>"
UNK = "<unk>"

_SPECIALS = (BOS, EOS, UNK)

PROVENANCES = ("seed", "generated")

# Optional per-record score fields, persisted only once a pair has been scored.
_SCORE_FIELDS = ("ppl_f", "ppl_b", "margin", "kept", "rule")


class Vocabulary:
    """Immutable token table with dense ids and BOS/EOS/UNK specials.

    Ids are 0..len-1 with the three specials always occupying ids 0, 1, 2.
    ``id_of`` and ``token_of`` are mutual inverses for every non-UNK token.
    """

    def __init__(self, corpus_tokens: Iterable[str]):
        tokens: list[str] = list(_SPECIALS)
        seen = set(tokens)
        for tok in corpus_tokens:
            if tok in seen:
                raise ValueError(f"duplicate or reserved token: {tok!r}")
            seen.add(tok)
            tokens.append(tok)
        self._tokens: tuple[str, ...] = tuple(tokens)
        self._index: dict[str, int] = {t: i for i, t in enumerate(self._tokens)}

    bos_id = 0
    eos_id = 1
    unk_id = 2

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        """Return the id for ``token``, falling back to UNK."""
        return self._index.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def content_hash(self) -> str:
        """Stable hash of the token table, used in model file headers."""
        payload = "\x00".join(self._tokens).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"tokens": list(self._tokens[len(_SPECIALS):])}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"])


@dataclass(frozen=True)
class TokenSequence:
    """An id sequence bound to the vocabulary it was tokenized under."""

    ids: tuple[int, ...]
    vocab: Vocabulary

    def __post_init__(self):
        bad = [i for i in self.ids if not 0 <= i < len(self.vocab)]
        if bad:
            raise ValueError(f"token ids out of range for vocabulary: {bad[:5]}")

    def __len__(self) -> int:
        return len(self.ids)

    def text(self) -> str:
        return detokenize(self)


def build_vocabulary(corpus_text: str | Iterable[str], max_size: int) -> Vocabulary:
    """Build a frequency-capped vocabulary from whitespace-delimited text.

    Keeps the ``max_size - 3`` most frequent tokens (ties broken by first
    appearance) plus the three specials.
    """
    if max_size < 4:
        raise ValueError(f"max_size must be >= 4, got {max_size}")
    if isinstance(corpus_text, str):
        corpus_text = [corpus_text]
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    position = 0
    for chunk in corpus_text:
        for tok in chunk.split():
            if tok in _SPECIALS:
                continue
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = position
                position += 1
    if not counts:
        raise EmptyCorpus("no tokens found in corpus text")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(ranked[: max_size - len(_SPECIALS)])


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Map whitespace-split words to ids; unknown words become UNK.

    No BOS/EOS framing is inserted; callers add it where needed.
    """
    return TokenSequence(tuple(vocab.id_of(t) for t in text.split()), vocab)


def detokenize(seq: TokenSequence) -> str:
    return " ".join(seq.vocab.token_of(i) for i in seq.ids)


@dataclass
class Example:
    """One prompt-response pair with provenance and optional scores.

    Text is the persisted ground truth; token sequences are recomputed on
    demand (tokenization is deterministic for a fixed vocabulary).
    """

    prompt: str
    response: str
    provenance: str = "generated"
    iteration: int = 0
    ppl_f: float | None = None
    ppl_b: float | None = None
    margin: float | None = None
    kept: bool | None = None
    rule: str | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance: {self.provenance!r}")
        if self.provenance == "seed" and self.iteration != 0:
            raise ValueError("seed examples must have iteration 0")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    def prompt_tokens(self, vocab: Vocabulary) -> TokenSequence:
        return tokenize(self.prompt, vocab)

    def response_tokens(self, vocab: Vocabulary) -> TokenSequence:
        return tokenize(self.response, vocab)

    def to_record(self) -> dict:
        record = {
            "prompt": self.prompt,
            "response": self.response,
            "provenance": self.provenance,
            "iteration": self.iteration,
        }
        for name in _SCORE_FIELDS:
            value = getattr(self, name)
            if value is not None:
                record[name] = value
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Example":
        kwargs = {name: record[name] for name in _SCORE_FIELDS if name in record}
        return cls(
            prompt=record["prompt"],
            response=record["response"],
            provenance=record.get("provenance", "generated"),
            iteration=record.get("iteration", 0),
            **kwargs,
        )


def _now_iso() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so reruns can be byte-identical.
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    stamp = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(stamp))


@dataclass
class Manifest:
    """Run metadata stored as the first line of a dataset file."""

    config_hash: str = ""
    created_at: str = field(default_factory=_now_iso)
    counts: dict[str, int] = field(default_factory=lambda: {p: 0 for p in PROVENANCES})

    def to_record(self) -> dict:
        return {
            "type": "manifest",
            "config_hash": self.config_hash,
            "created_at": self.created_at,
            "counts": dict(self.counts),
        }

    @classmethod
    def from_record(cls, record: dict) -> "Manifest":
        return cls(
            config_hash=record.get("config_hash", ""),
            created_at=record.get("created_at", ""),
            counts={p: int(record.get("counts", {}).get(p, 0)) for p in PROVENANCES},
        )


@dataclass
class Dataset:
    """Ordered examples plus a manifest whose counts track every mutation."""

    examples: list[Example] = field(default_factory=list)
    manifest: Manifest = field(default_factory=Manifest)

    def __post_init__(self):
        self._recount()

    def _recount(self) -> None:
        counts = {p: 0 for p in PROVENANCES}
        for ex in self.examples:
            counts[ex.provenance] += 1
        self.manifest.counts = counts

    def append(self, example: Example) -> None:
        self.examples.append(example)
        self.manifest.counts[example.provenance] += 1

    def extend(self, examples: Iterable[Example]) -> None:
        for ex in examples:
            self.append(ex)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write a dataset as JSON lines: manifest first, then one example per line."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(ds.manifest.to_record(), sort_keys=True) + "\n")
            for ex in ds.examples:
                fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`, validating each record."""
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read dataset from {path}: {exc}") from exc

    if not lines:
        raise MalformedRecord(1, "missing manifest line")
    manifest_rec = _parse_line(lines[0], 1)
    if manifest_rec.get("type") != "manifest":
        raise MalformedRecord(1, "first line is not a manifest record")
    manifest = Manifest.from_record(manifest_rec)

    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _parse_line(line, lineno)
        for required in ("prompt", "response"):
            if required not in record:
                raise MalformedRecord(lineno, f"missing {required!r} field")
        try:
            examples.append(Example.from_record(record))
        except (ValueError, TypeError) as exc:
            raise MalformedRecord(lineno, str(exc)) from exc

    ds = Dataset(examples=examples, manifest=manifest)
    declared = Manifest.from_record(manifest_rec).counts
    if declared != ds.manifest.counts:
        raise MalformedRecord(1, f"manifest counts {declared} do not match records {ds.manifest.counts}")
    return ds


def _parse_line(line: str, lineno: int) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(lineno, f"invalid JSON: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise MalformedRecord(lineno, "record is not a JSON object")
    return record
