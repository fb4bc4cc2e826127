"""Word-level vocabulary, encoding, sequence packing and seeded batching."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>")


class EmptyVocabError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocab:
    token_of: list[str]
    counts: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.id_of = {tok: i for i, tok in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.token_of)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.token_of, "counts": self.counts}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        obj = json.loads(text)
        return cls(obj["tokens"], obj.get("counts", []))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def count_tokens(lines: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for line in lines:
        counts.update(tokenize(line))
    return counts


def vocab_from_counts(counts: Counter, max_size: int, min_freq: int = 1) -> Vocab:
    if max_size <= len(SPECIAL_TOKENS):
        raise ConfigurationError(f"max_size must exceed {len(SPECIAL_TOKENS)}")
    kept = [(tok, n) for tok, n in counts.items() if n >= min_freq and tok not in SPECIAL_TOKENS]
    if not kept:
        raise EmptyVocabError("corpus yields no tokens")
    # descending frequency, ties by UTF-8 byte order
    kept.sort(key=lambda tn: (-tn[1], tn[0].encode("utf-8")))
    kept = kept[: max_size - len(SPECIAL_TOKENS)]
    return Vocab(list(SPECIAL_TOKENS) + [t for t, _ in kept], [0, 0, 0] + [n for _, n in kept])


def _read_lines(paths: Sequence[str | Path]) -> list[str]:
    lines: list[str] = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            lines.extend(fh.read().splitlines())
    return lines


def build_vocab(corpus_paths: Sequence[str | Path], max_size: int = 8192, min_freq: int = 1) -> Vocab:
    return vocab_from_counts(count_tokens(_read_lines(corpus_paths)), max_size, min_freq)


def encode(text: str, vocab: Vocab) -> list[int]:
    get = vocab.id_of.get
    return [get(tok, UNK) for tok in tokenize(text)]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.token_of[i] for i in ids)


def encode_corpus(corpus_paths: Sequence[str | Path], vocab: Vocab) -> np.ndarray:
    """Concatenated token stream of all documents."""
    stream: list[int] = []
    for line in _read_lines(corpus_paths):
        stream.extend(encode(line, vocab))
    return np.asarray(stream, dtype=np.int64)


def pack_sequences(token_stream: Sequence[int] | np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping chunks of exactly ``seq_len``; the ragged tail is dropped."""
    if seq_len < 2:
        raise ConfigurationError("seq_len must be at least 2")
    stream = np.asarray(token_stream, dtype=np.int64)
    n = len(stream) // seq_len
    return stream[: n * seq_len].reshape(n, seq_len)


def next_batch(sequences: np.ndarray, batch_size: int, rng_seed: int, step: int) -> np.ndarray:
    """Batch ``step`` of a seeded shuffle that reshuffles every epoch.

    The result depends only on ``(rng_seed, step)``, so training can resume
    from any step without replaying earlier batches.
    """
    n = len(sequences)
    if batch_size < 1 or n < batch_size:
        raise ConfigurationError(f"need at least batch_size={batch_size} sequences, have {n}")
    per_epoch = n // batch_size
    epoch, slot = divmod(step, per_epoch)
    order = np.random.default_rng([rng_seed, epoch]).permutation(n)
    return sequences[order[slot * batch_size:(slot + 1) * batch_size]]


def synthetic_documents(
    vocab_size: int,
    num_tokens: int,
    seed: int,
    successors: int = 4,
    doc_len: tuple[int, int] = (40, 400),
) -> list[str]:
    """Documents sampled from a sparse first-order Markov chain.

    Each word type has a few preferred successors with Zipf-like weights, so
    local word order is predictable from the words themselves. Word types are
    named ``w0 .. w{vocab_size-1}``.
    """
    if vocab_size < 2 or num_tokens < 1:
        raise ConfigurationError("synthetic corpus needs vocab_size >= 2 and num_tokens >= 1")
    rng = np.random.default_rng(seed)
    succ = np.stack([rng.choice(vocab_size, size=successors, replace=False) for _ in range(vocab_size)])
    weights = 1.0 / np.arange(1, successors + 1)
    cdf = np.cumsum(weights / weights.sum())
    names = [f"w{i}" for i in range(vocab_size)]
    docs: list[str] = []
    produced = 0
    while produced < num_tokens:
        length = min(int(rng.integers(doc_len[0], doc_len[1] + 1)), num_tokens - produced)
        picks = np.searchsorted(cdf, rng.random(length))
        # occasional restarts keep the chain from collapsing into short cycles
        restarts = rng.random(length) < 0.05
        fresh = rng.integers(0, vocab_size, size=length)
        tok = int(rng.integers(vocab_size))
        words = []
        for t in range(length):
            words.append(names[tok])
            tok = int(fresh[t]) if restarts[t] else int(succ[tok, picks[t]])
        docs.append(" ".join(words))
        produced += length
    return docs


def write_synthetic_corpus(path: str | Path, vocab_size: int, num_tokens: int, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(synthetic_documents(vocab_size, num_tokens, seed)) + "\n", encoding="utf-8")
    return path
