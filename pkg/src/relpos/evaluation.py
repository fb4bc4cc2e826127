"""Relative-position accuracy, label density, output-head FLOPs and the probe task."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .corpus import ConfigurationError
from .model import ModelConfig, TransformerModel
from .objectives import (
    POSITION_VARIANTS,
    VARIANTS,
    mlm_objective,
    num_relpos_classes,
    prepare_pairs,
    relpos_logits,
    selected_count,
)
from .optim import Adam
from .tensor import Tensor


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    logits = np.asarray(getattr(logits, "data", logits))
    return float((logits.argmax(axis=-1) == np.asarray(targets)).mean())


def relpos_accuracy(
    model: TransformerModel,
    readout,
    eval_batches: Iterable[np.ndarray],
    variant: str,
    rate: float,
    seed: int = 0,
    predict: Callable | None = None,
) -> float:
    """Fraction of selected pairs whose argmax class is the true one.

    Batch ``n`` is corrupted with seed ``(seed, n)``. ``predict(ids, plans,
    pairs)`` replaces the model when given; it must return logits aligned
    with the concatenated pairs.
    """
    if variant not in POSITION_VARIANTS:
        raise ValueError(f"{variant!r} is not a position objective")
    L = model.config.max_positions if model is not None else None
    correct = total = 0
    with T.no_grad():
        for n, ids in enumerate(eval_batches):
            k = np.asarray(ids).shape[1]
            plans, pairs, targets = prepare_pairs(ids, variant, rate, (seed, n), L or k)
            if predict is None:
                _, scores = model.forward(model.embed(ids, plans), mode="eval")
                logits = relpos_logits(scores, readout, pairs).data
            else:
                logits = np.asarray(predict(ids, plans, pairs))
            correct += int((logits.argmax(axis=-1) == targets).sum())
            total += len(targets)
    return correct / total


def mlm_accuracy(model: TransformerModel, eval_batches: Iterable[np.ndarray], rate: float, seed: int = 0) -> float:
    correct = total = 0
    with T.no_grad():
        for n, ids in enumerate(eval_batches):
            out = mlm_objective(model, ids, rate, (seed, n), mode="eval")
            correct += int((out.logits.data.argmax(axis=-1) == out.targets).sum())
            total += out.count
    return correct / total


def label_density(k: int, variant: str, rate: float) -> int:
    """Prediction targets per sequence of length ``k``."""
    s = selected_count(k, rate)
    if variant == "mlm":
        return s
    if variant in ("pplm", "pplm-binary"):
        return k * k
    if variant == "pplm-some":
        return s * s
    if variant == "pmlm":
        return 2 * k * s - s * s
    raise ValueError(f"unknown objective {variant!r}; choose from {VARIANTS}")


@dataclass
class CostEntry:
    objective: str
    rate: float
    labels_per_sequence: int
    head_flops_per_sequence: int
    head_flops_per_batch: int
    body_flops_per_batch: int
    ms_per_step: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def body_flops_per_sequence(config: ModelConfig, seq_len: int) -> int:
    """Matmul FLOPs of the encoder stack, identical for every objective."""
    h, f, k = config.hidden_size, config.intermediate_size, seq_len
    projections = 4 * 2 * k * h * h
    attention = 2 * 2 * k * k * h
    ffn = 2 * 2 * k * h * f
    return config.num_layers * (projections + attention + ffn)


def readout_flops_per_pair(config: ModelConfig, variant: str, readout: str = "linear", hidden: int = 64) -> int:
    n_out = 2 if variant == "pplm-binary" else num_relpos_classes(config.max_positions)
    if readout == "linear":
        return 2 * config.num_heads * n_out
    return 2 * (config.num_heads * hidden + hidden * n_out)


def flop_estimate(
    config: ModelConfig,
    variant: str,
    rate: float,
    seq_len: int | None = None,
    batch_size: int = 1,
    readout: str = "linear",
) -> CostEntry:
    """Closed-form output-head cost of one objective.

    MLM scores every predicted slot against the whole vocabulary
    (``2 * slots * h * |V|``); position objectives run the readout once per
    selected pair (``2 * pairs * n_h * n_p`` for an affine readout).
    """
    k = seq_len or config.max_positions
    labels = label_density(k, variant, rate)
    if variant == "mlm":
        head = 2 * labels * config.hidden_size * config.vocab_size
    else:
        head = labels * readout_flops_per_pair(config, variant, readout)
    return CostEntry(
        objective=variant,
        rate=rate,
        labels_per_sequence=labels,
        head_flops_per_sequence=head,
        head_flops_per_batch=head * batch_size,
        body_flops_per_batch=body_flops_per_sequence(config, k) * batch_size,
    )


def mlm_crossover_vocab_size(config: ModelConfig, seq_len: int, mlm_rate: float,
                             variant: str = "pplm", rate: float = 0.6) -> float:
    """Vocabulary size at which MLM's head cost equals ``variant``'s readout cost.

    Below it the ordering flips. For PPLM with an affine readout this is
    ``n_h * n_p * k / (rate * h)`` up to flooring of the slot count.
    """
    slots = label_density(seq_len, "mlm", mlm_rate)
    other = flop_estimate(config, variant, rate, seq_len).head_flops_per_sequence
    if slots == 0:
        return float("inf")
    return other / (2 * slots * config.hidden_size)


DEFAULT_RATES = {"mlm": 0.3, "pmlm": 0.6, "pplm": 0.6, "pplm-some": 0.6, "pplm-binary": 0.6}


def cost_report(config: ModelConfig, seq_len: int, batch_size: int = 1,
                rates: dict[str, float] | None = None, readout: str = "linear") -> dict:
    rates = rates or DEFAULT_RATES
    entries = [flop_estimate(config, v, rates[v], seq_len, batch_size, readout).to_dict() for v in rates]
    return {
        "seq_len": seq_len,
        "batch_size": batch_size,
        "model": config.to_dict(),
        "entries": entries,
        "mlm_vs_pplm_crossover_vocab_size": mlm_crossover_vocab_size(
            config, seq_len, rates.get("mlm", 0.3), "pplm", rates.get("pplm", 0.6)
        ),
    }


@dataclass
class ProbeDataset:
    train_ids: np.ndarray
    train_labels: np.ndarray
    test_ids: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    kind: str


def _probe_split(kind: str, n: int, num_classes: int, seq_len: int, vocab_size: int,
                 markers: np.ndarray, rng: np.random.Generator, contiguous: bool):
    fillers = np.setdiff1d(np.arange(3, vocab_size), markers)
    ids = rng.choice(fillers, size=(n, seq_len))
    labels = np.arange(n) % num_classes
    for r in range(n):
        if kind == "first-token":
            ids[r, 0] = markers[labels[r]]
            continue
        if contiguous:
            start = int(rng.integers(1, seq_len - num_classes + 1))
            slots = np.arange(start, start + num_classes)
        else:
            slots = np.sort(rng.choice(np.arange(1, seq_len), size=num_classes, replace=False))
        others = np.delete(markers, labels[r])
        ids[r, slots[0]] = markers[labels[r]]
        ids[r, slots[1:]] = rng.permutation(others)
    order = rng.permutation(n)
    return ids[order], labels[order]


def make_probe(
    kind: str = "order",
    num_classes: int = 3,
    seq_len: int = 32,
    vocab_size: int = 1000,
    n_train: int = 600,
    n_test: int = 600,
    seed: int = 0,
    markers: Sequence[int] | None = None,
    contiguous: bool = False,
) -> ProbeDataset:
    """Synthetic classification task.

    ``order``: ``num_classes`` marker tokens sit at random slots (adjacent
    slots when ``contiguous``); the label is the index of the marker that
    comes first, so only positional information separates the classes.
    ``first-token``: the label is the marker placed at slot 0, which is
    separable from token identity alone.
    """
    if kind not in ("order", "first-token"):
        raise ValueError(f"unknown probe kind {kind!r}")
    if num_classes < 2 or num_classes >= seq_len:
        raise ConfigurationError("probe needs 2 <= num_classes < seq_len")
    markers = np.asarray(markers if markers is not None else np.arange(3, 3 + num_classes))
    if len(markers) != num_classes:
        raise ConfigurationError("one marker token per class is required")
    train = _probe_split(kind, n_train, num_classes, seq_len, vocab_size, markers, np.random.default_rng([seed, 0]), contiguous)
    test = _probe_split(kind, n_test, num_classes, seq_len, vocab_size, markers, np.random.default_rng([seed, 1]), contiguous)
    return ProbeDataset(*train, *test, num_classes=num_classes, kind=kind)


def clone_model(model: TransformerModel) -> TransformerModel:
    twin = TransformerModel.__new__(TransformerModel)
    twin.config = model.config
    twin.params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in model.params.items()}
    return twin


def _first_token_logits(model, ids, w: Tensor, b: Tensor, mode: str, rng=None) -> Tensor:
    n, k = ids.shape
    final, _ = model.forward(model.embed(ids), mode=mode, rng=rng)
    first = T.gather(T.reshape(final, (n * k, final.shape[-1])), np.arange(n) * k)
    return T.add(T.matmul(first, w), b)


def probe_finetune(
    pretrained_model: TransformerModel,
    probe: ProbeDataset,
    epochs: int = 3,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    num_classes: int | None = None,
) -> float:
    """Fine-tune a copy of the model with a fresh affine head on slot 0; return test accuracy."""
    num_classes = num_classes or probe.num_classes
    if max(probe.train_labels.max(), probe.test_labels.max()) >= num_classes:
        raise ConfigurationError(f"probe labels exceed head size {num_classes}")
    model = clone_model(pretrained_model)
    h = model.config.hidden_size
    rng = np.random.default_rng([seed, 7])
    w = Tensor(rng.normal(0.0, 0.02, size=(h, num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    params = dict(model.params)
    params.update({"probe.w": w, "probe.b": b})
    opt = Adam(params, lr)
    n = len(probe.train_ids)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 8, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            logits = _first_token_logits(model, probe.train_ids[idx], w, b, "train", rng)
            T.cross_entropy(logits, probe.train_labels[idx]).backward()
            opt.step()
    correct = 0
    with T.no_grad():
        for start in range(0, len(probe.test_ids), 256):
            ids = probe.test_ids[start:start + 256]
            logits = _first_token_logits(model, ids, w, b, "eval")
            correct += int((logits.data.argmax(-1) == probe.test_labels[start:start + 256]).sum())
    return correct / len(probe.test_ids)


def majority_baseline(probe: ProbeDataset) -> float:
    counts = np.bincount(probe.train_labels, minlength=probe.num_classes)
    return float((probe.test_labels == counts.argmax()).mean())
