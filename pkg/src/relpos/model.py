"""Pre-norm transformer encoder with corruptible position embeddings.

Besides the final hidden states the forward pass exports the raw
query-key scores of every head in the last attention layer, one
``n_heads`` vector per ordered pair of slots. Those scores feed the
relative-position readout.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, Tensor


class InvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_size: int = 64
    intermediate_size: int = 256
    num_heads: int = 8
    max_positions: int = 32
    vocab_size: int = 8192
    attention_dropout: float = 0.1
    hidden_dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if min(self.num_layers, self.max_positions, self.vocab_size, self.intermediate_size) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(
            num_layers=12,
            hidden_size=256,
            intermediate_size=1024,
            num_heads=16,
            max_positions=128,
            vocab_size=50265,
            attention_dropout=0.1,
            hidden_dropout=0.1,
        )

    @classmethod
    def desk(cls, vocab_size: int = 8192) -> "ModelConfig":
        return cls(vocab_size=vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in initialisation order."""
    h, f = cfg.hidden_size, cfg.intermediate_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, h),
        "pos_emb": (cfg.max_positions, h),
        "mask_pos_emb": (h,),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gamma": (h,), p + "ln1.beta": (h,),
            p + "attn.w_q": (h, h), p + "attn.w_k": (h, h),
            p + "attn.w_v": (h, h), p + "attn.b_v": (h,),
            p + "attn.w_o": (h, h), p + "attn.b_o": (h,),
            p + "ln2.gamma": (h,), p + "ln2.beta": (h,),
            p + "ffn.w_in": (h, f), p + "ffn.b_in": (f,),
            p + "ffn.w_out": (f, h), p + "ffn.b_out": (h,),
        })
    shapes["ln_f.gamma"] = (h,)
    shapes["ln_f.beta"] = (h,)
    shapes["target_emb"] = (cfg.vocab_size, h)
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    h, f, V, L = cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size, cfg.max_positions
    per_layer = 4 * h * h + 2 * h + 4 * h + 2 * h * f + f + h
    return 2 * V * h + L * h + h + cfg.num_layers * per_layer + 2 * h


def _init_value(name: str, shape: tuple[int, ...], rng: np.random.Generator, std: float) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf == "beta" or leaf.startswith("b_"):
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


def pair_head_scores(final_hidden, w_q, w_k, num_heads: int) -> np.ndarray:
    """Per-head scores ``(F_i W_q^l) . (F_j W_k^l)`` for every ordered pair.

    ``final_hidden`` is ``[..., k, h]``; head ``l`` owns columns
    ``l*d .. (l+1)*d`` of the projections. Returns ``[..., k, k, num_heads]``.
    Evaluated in float64, one head at a time.
    """
    f = np.asarray(getattr(final_hidden, "data", final_hidden), dtype=np.float64)
    wq = np.asarray(getattr(w_q, "data", w_q), dtype=np.float64)
    wk = np.asarray(getattr(w_k, "data", w_k), dtype=np.float64)
    d = wq.shape[1] // num_heads
    out = np.empty(f.shape[:-1] + (f.shape[-2], num_heads))
    for l in range(num_heads):
        q = f @ wq[:, l * d:(l + 1) * d]
        k = f @ wk[:, l * d:(l + 1) * d]
        out[..., l] = np.einsum("...id,...jd->...ij", q, k)
    return out


def vocab_logits(final_hidden: Tensor, target_embeddings: Tensor) -> Tensor:
    """Logits ``e_T(v) . F_i`` over the whole vocabulary for each row of ``final_hidden``."""
    return T.matmul(final_hidden, T.transpose(target_embeddings, (1, 0)))


class TransformerModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_value(name, shape, rng, config.init_std), requires_grad=True)
            for name, shape in parameter_shapes(config).items()
        }

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def embed(self, token_ids, plans=None) -> Tensor:
        """Token embedding plus the (possibly corrupted) position signal per slot.

        ``plans`` is one corruption plan per row (anything with
        ``seq_len`` and ``position_index(L)``) or None for clean positions.
        A position index equal to ``max_positions`` selects the shared mask
        position embedding.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"token_ids must be [batch, seq_len], got {ids.shape}")
        b, k = ids.shape
        L, h = self.config.max_positions, self.config.hidden_size
        if k > L:
            raise ValueError(f"seq_len {k} exceeds max_positions {L}")
        if plans is None:
            pos_idx = np.broadcast_to(np.arange(k), (b, k))
        else:
            if len(plans) != b:
                raise ValueError(f"{len(plans)} plans for a batch of {b}")
            for plan in plans:
                if plan.seq_len != k:
                    raise ValueError(f"plan seq_len {plan.seq_len} != batch seq_len {k}")
            pos_idx = np.stack([plan.position_index(L) for plan in plans])
        table = T.concat([self.params["pos_emb"], T.reshape(self.params["mask_pos_emb"], (1, h))])
        return T.add(T.gather(self.params["tok_emb"], ids), T.gather(table, pos_idx))

    def _layer(self, i: int, x: Tensor, training: bool, rng, capture: bool):
        cfg = self.config
        p = self.params
        pre = f"layers.{i}."
        b, k, h = x.shape
        nh, d = cfg.num_heads, cfg.head_dim

        a = T.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"])

        def heads(t):
            return T.transpose(T.reshape(t, (b, k, nh, d)), (0, 2, 1, 3))

        q = heads(T.matmul(a, p[pre + "attn.w_q"]))
        kk = T.transpose(T.reshape(T.matmul(a, p[pre + "attn.w_k"]), (b, k, nh, d)), (0, 2, 3, 1))
        v = heads(T.add(T.matmul(a, p[pre + "attn.w_v"]), p[pre + "attn.b_v"]))
        scores = T.matmul(q, kk)  # [b, nh, k, k], unscaled
        att = T.softmax(T.scale(scores, 1.0 / math.sqrt(d)), axis=-1)
        att = T.dropout(att, cfg.attention_dropout, rng, training)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, k, h))
        out = T.add(T.matmul(ctx, p[pre + "attn.w_o"]), p[pre + "attn.b_o"])
        x = T.add(x, T.dropout(out, cfg.hidden_dropout, rng, training))

        f = T.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"])
        f = T.gelu(T.add(T.matmul(f, p[pre + "ffn.w_in"]), p[pre + "ffn.b_in"]))
        f = T.add(T.matmul(f, p[pre + "ffn.w_out"]), p[pre + "ffn.b_out"])
        x = T.add(x, T.dropout(f, cfg.hidden_dropout, rng, training))
        return x, scores, (a if capture else None)

    def forward(self, hidden: Tensor, mode: str = "train", rng: np.random.Generator | None = None):
        """Run the encoder stack.

        ``mode`` is ``train`` (dropout on, needs ``rng``), ``eval`` or
        ``verify`` (eval plus a float64 recomputation of the exported head
        scores). Returns ``(final_hidden [b,k,h], head_scores [b,k,k,n_h])``.
        """
        if mode not in ("train", "eval", "verify"):
            raise ValueError(f"unknown mode {mode!r}")
        training = mode == "train"
        cfg = self.config
        x = T.dropout(hidden, cfg.hidden_dropout, rng, training)
        last = cfg.num_layers - 1
        scores = last_input = None
        for i in range(cfg.num_layers):
            try:
                x, scores, last_input = self._layer(i, x, training, rng, mode == "verify" and i == last)
            except NumericError as exc:
                raise NumericError(f"layer {i}: {exc}") from exc
        try:
            final = T.layer_norm(x, self.params["ln_f.gamma"], self.params["ln_f.beta"])
        except NumericError as exc:
            raise NumericError(f"final layer norm: {exc}") from exc
        head_scores = T.transpose(scores, (0, 2, 3, 1))
        if mode == "verify":
            pre = f"layers.{last}.attn."
            expected = pair_head_scores(
                last_input, self.params[pre + "w_q"], self.params[pre + "w_k"], cfg.num_heads
            )
            if not np.allclose(head_scores.data, expected, rtol=1e-5, atol=1e-5):
                err = np.abs(head_scores.data - expected).max()
                raise InvariantError(f"exported head scores deviate from recomputation by {err:.3g}")
        return final, head_scores

    def __call__(self, token_ids, plans=None, mode: str = "train", rng=None):
        return self.forward(self.embed(token_ids, plans), mode=mode, rng=rng)
