"""Position corruption, relative-position labels, pair selection and losses.

Five objectives are supported:

* ``mlm``         replace a fraction of tokens with MASK, predict them over the vocabulary.
* ``pmlm``        mask the position signal of a fraction of slots, predict the
                  offset of every ordered pair touching a masked slot.
* ``pplm``        permute the position signal among a fraction of slots,
                  predict the original offset of every ordered pair.
* ``pplm-some``   as ``pplm`` but only pairs whose both ends were permuted.
* ``pplm-binary`` as ``pplm`` but predict whether each pair's presented offset
                  is the original one.

Offsets always refer to the original order; tokens never move, only their
position embeddings do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .corpus import MASK, ConfigurationError
from .model import vocab_logits
from .tensor import Tensor

VARIANTS = ("mlm", "pmlm", "pplm", "pplm-some", "pplm-binary")
POSITION_VARIANTS = VARIANTS[1:]
CORRUPTION_MODE = {"mlm": "none", "pmlm": "mask", "pplm": "permute", "pplm-some": "permute", "pplm-binary": "permute"}


class EmptyPairSet(Exception):
    """No pairs to predict for this batch; the step must be skipped."""


def selected_count(k: int, rate: float) -> int:
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"corruption rate {rate} outside [0, 1]")
    # guards against e.g. 0.29 * 100 == 28.999999999999996
    return min(k, int(math.floor(rate * k + 1e-9)))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(list(seed) if isinstance(seed, (tuple, list)) else seed)


@dataclass
class CorruptionPlan:
    mode: str
    rate: float
    seq_len: int
    selected: np.ndarray
    pi: np.ndarray
    token_mask_targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def position_index(self, max_positions: int) -> np.ndarray:
        """Position-table row fed to each slot; ``max_positions`` means masked."""
        idx = self.pi.copy()
        if self.mode == "mask":
            idx[self.selected] = max_positions
        return idx

    @classmethod
    def identity(cls, k: int) -> "CorruptionPlan":
        return cls("none", 0.0, k, np.zeros(0, dtype=np.int64), np.arange(k))


def sample_corruption(k: int, rate: float, mode: str, seed) -> CorruptionPlan:
    """Pick ``floor(rate*k)`` slots uniformly; in permute mode shuffle their positions.

    The permutation of the selected slots is uniform, fixed points included.
    """
    if mode not in ("none", "mask", "permute"):
        raise ValueError(f"unknown corruption mode {mode!r}")
    n = selected_count(k, rate)
    pi = np.arange(k)
    if mode == "none":
        return CorruptionPlan(mode, rate, k, np.zeros(0, dtype=np.int64), pi)
    rng = _rng(seed)
    selected = np.sort(rng.choice(k, size=n, replace=False)).astype(np.int64)
    if mode == "permute":
        pi[selected] = selected[rng.permutation(n)]
    return CorruptionPlan(mode, rate, k, selected, pi)


def sample_token_mask(k: int, rate: float, seed) -> CorruptionPlan:
    """MLM plan: positions untouched, ``floor(rate*k)`` token slots replaced by MASK."""
    n = selected_count(k, rate)
    targets = np.sort(_rng(seed).choice(k, size=n, replace=False)).astype(np.int64)
    return CorruptionPlan("none", rate, k, np.zeros(0, dtype=np.int64), np.arange(k), targets)


@dataclass
class RelPosLabels:
    offsets: np.ndarray
    class_index: np.ndarray
    n_p: int
    binary_correct: np.ndarray


def num_relpos_classes(max_positions: int) -> int:
    return 2 * max_positions - 1


def rel_pos_labels(k: int, max_positions: int, plan: CorruptionPlan | None = None) -> RelPosLabels:
    if k > max_positions:
        raise ConfigurationError(f"seq_len {k} exceeds max_positions {max_positions}")
    ar = np.arange(k)
    offsets = ar[None, :] - ar[:, None]
    if plan is None:
        correct = np.ones((k, k), dtype=np.int64)
    else:
        if plan.seq_len != k:
            raise ValueError(f"plan seq_len {plan.seq_len} != {k}")
        pi = plan.pi
        correct = ((pi[:, None] - pi[None, :]) == (ar[:, None] - ar[None, :])).astype(np.int64)
    return RelPosLabels(offsets, offsets + (max_positions - 1), num_relpos_classes(max_positions), correct)


def select_pairs(plan: CorruptionPlan, variant: str) -> np.ndarray:
    """Ordered pairs ``(i, j)`` to predict, shape ``[P, 2]``, sorted by ``(i, j)``."""
    k = plan.seq_len
    if variant in ("pplm", "pplm-binary"):
        if plan.mode == "mask":
            raise ValueError(f"{variant} needs a permute or identity plan")
        keep = np.ones((k, k), dtype=bool)
    elif variant == "pplm-some":
        if plan.mode == "mask":
            raise ValueError("pplm-some needs a permute plan")
        chosen = np.zeros(k, dtype=bool)
        chosen[plan.selected] = True
        keep = chosen[:, None] & chosen[None, :]
    elif variant == "pmlm":
        if plan.mode == "permute":
            raise ValueError("pmlm needs a mask plan")
        chosen = np.zeros(k, dtype=bool)
        chosen[plan.selected] = True
        keep = chosen[:, None] | chosen[None, :]
    else:
        raise ValueError(f"{variant!r} is not a position objective")
    pairs = np.argwhere(keep)
    if len(pairs) == 0:
        raise EmptyPairSet(f"{variant} selects no pairs at rate {plan.rate}")
    return pairs


def pair_targets(labels: RelPosLabels, pairs: np.ndarray, variant: str) -> np.ndarray:
    i, j = pairs[:, 0], pairs[:, 1]
    if variant == "pplm-binary":
        return labels.binary_correct[i, j]
    return labels.class_index[i, j]


class ReadoutHead:
    """Map from a pair's head-score vector to class logits.

    ``kind="linear"`` is a single affine layer; ``kind="mlp"`` adds one GELU
    hidden layer of width ``hidden``.
    """

    def __init__(self, num_heads: int, num_classes: int, kind: str = "linear",
                 hidden: int = 64, seed: int = 0, init_std: float = 0.02, prefix: str = "psi"):
        if kind not in ("linear", "mlp"):
            raise ValueError(f"unknown readout kind {kind!r}")
        self.kind = kind
        self.num_heads = num_heads
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        if kind == "linear":
            shapes = {"w": (num_heads, num_classes), "b": (num_classes,)}
        else:
            shapes = {"w1": (num_heads, hidden), "b1": (hidden,), "w2": (hidden, num_classes), "b2": (num_classes,)}
        self.params = {
            f"{prefix}.{name}": Tensor(
                np.zeros(shape) if name.startswith("b") else rng.normal(0.0, init_std, size=shape),
                requires_grad=True,
            )
            for name, shape in shapes.items()
        }
        self._names = {name: f"{prefix}.{name}" for name in shapes}

    def _p(self, name: str) -> Tensor:
        return self.params[self._names[name]]

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            return T.add(T.matmul(x, self._p("w")), self._p("b"))
        hid = T.gelu(T.add(T.matmul(x, self._p("w1")), self._p("b1")))
        return T.add(T.matmul(hid, self._p("w2")), self._p("b2"))

    def flops_per_pair(self) -> int:
        if self.kind == "linear":
            return 2 * self.num_heads * self.num_classes
        hidden = self.params[self._names["w1"]].shape[1]
        return 2 * (self.num_heads * hidden + hidden * self.num_classes)


def make_readout(variant: str, num_heads: int, max_positions: int, kind: str = "linear", seed: int = 0) -> ReadoutHead:
    if variant == "pplm-binary":
        return ReadoutHead(num_heads, 2, kind, seed=seed, prefix="binary_psi")
    return ReadoutHead(num_heads, num_relpos_classes(max_positions), kind, seed=seed)


def relpos_logits(head_scores: Tensor, readout: ReadoutHead, pairs: Sequence[np.ndarray]) -> Tensor:
    """Readout logits for the selected pairs of every row, concatenated row by row.

    ``head_scores`` is ``[b, k, k, n_h]``; ``pairs[r]`` is the ``[P_r, 2]``
    pair array of row ``r``.
    """
    b, k, _, nh = head_scores.shape
    flat = T.reshape(head_scores, (b * k * k, nh))
    index = np.concatenate([r * k * k + p[:, 0] * k + p[:, 1] for r, p in enumerate(pairs)])
    if len(index) == b * k * k and np.array_equal(index, np.arange(b * k * k)):
        rows = flat
    else:
        rows = T.gather(flat, index)
    return readout(rows)


def variant_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over pairs (or token slots)."""
    if len(targets) == 0:
        raise EmptyPairSet("no targets")
    return T.cross_entropy(logits, targets)


class ObjectiveOutput(NamedTuple):
    loss: Tensor
    logits: Tensor
    targets: np.ndarray
    count: int


def row_seed(seed, row: int) -> tuple:
    base = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    return base + (row,)


def prepare_pairs(token_ids, variant: str, rate: float, seed, max_positions: int):
    """Per-row corruption plans, pair arrays and flattened targets for a batch."""
    b, k = np.asarray(token_ids).shape
    plans = [sample_corruption(k, rate, CORRUPTION_MODE[variant], row_seed(seed, r)) for r in range(b)]
    pairs = [select_pairs(plan, variant) for plan in plans]
    targets = np.concatenate([
        pair_targets(rel_pos_labels(k, max_positions, plan), p, variant)
        for plan, p in zip(plans, pairs)
    ])
    return plans, pairs, targets


def position_objective(model, readout: ReadoutHead, token_ids, variant: str, rate: float,
                       seed, mode: str = "train", rng=None) -> ObjectiveOutput:
    """Corrupt positions, run the model and score the selected pairs."""
    ids = np.asarray(token_ids)
    plans, pairs, targets = prepare_pairs(ids, variant, rate, seed, model.config.max_positions)
    _, scores = model.forward(model.embed(ids, plans), mode=mode, rng=rng)
    logits = relpos_logits(scores, readout, pairs)
    return ObjectiveOutput(variant_loss(logits, targets), logits, targets, len(targets))


def mlm_objective(model, token_ids, rate: float, seed, mode: str = "train", rng=None) -> ObjectiveOutput:
    ids = np.asarray(token_ids, dtype=np.int64)
    b, k = ids.shape
    if rate <= 0 or selected_count(k, rate) == 0:
        raise ConfigurationError("MLM needs a corruption rate selecting at least one token")
    plans = [sample_token_mask(k, rate, row_seed(seed, r)) for r in range(b)]
    corrupted = ids.copy()
    flat_index = []
    for r, plan in enumerate(plans):
        corrupted[r, plan.token_mask_targets] = MASK
        flat_index.append(r * k + plan.token_mask_targets)
    flat_index = np.concatenate(flat_index)
    final, _ = model.forward(model.embed(corrupted), mode=mode, rng=rng)
    h = final.shape[-1]
    rows = T.gather(T.reshape(final, (b * k, h)), flat_index)
    logits = vocab_logits(rows, model.params["target_emb"])
    targets = ids.reshape(-1)[flat_index]
    return ObjectiveOutput(variant_loss(logits, targets), logits, targets, len(targets))


def mlm_loss(batch, model, rate: float, seed, mode: str = "eval", rng=None) -> Tensor:
    return mlm_objective(model, batch, rate, seed, mode, rng).loss


def objective(variant: str, model, readout, token_ids, rate: float, seed,
              mode: str = "train", rng=None) -> ObjectiveOutput:
    if variant == "mlm":
        return mlm_objective(model, token_ids, rate, seed, mode, rng)
    if variant not in POSITION_VARIANTS:
        raise ValueError(f"unknown objective {variant!r}; choose from {VARIANTS}")
    return position_objective(model, readout, token_ids, variant, rate, seed, mode, rng)
