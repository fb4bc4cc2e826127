"""Training loop, configuration, checkpoint/resume and run artifacts.

Every random stream is keyed by ``(seed, stream, batch_index)`` so a run
resumed from a checkpoint replays exactly the batches, corruptions and
dropout masks an uninterrupted run would have used.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .corpus import (
    ConfigurationError,
    Vocab,
    build_vocab,
    count_tokens,
    encode,
    encode_corpus,
    next_batch,
    pack_sequences,
    synthetic_documents,
    vocab_from_counts,
)
from .evaluation import flop_estimate, mlm_accuracy, relpos_accuracy
from .model import ModelConfig, TransformerModel
from .objectives import (
    POSITION_VARIANTS,
    VARIANTS,
    EmptyPairSet,
    make_readout,
    objective,
    selected_count,
)
from .optim import Adam, AdamState, adam_step  # noqa: F401  (re-exported)
from .tensor import NumericError

log = logging.getLogger(__name__)

# random stream tags
_DROPOUT, _CORRUPT, _EVAL = 1, 2, 3
METRICS_COLUMNS = ("step", "loss", "labels_per_batch", "ms_per_step")


@dataclass
class TrainConfig:
    objective: str = "pplm"
    corruption_rate: float = 0.6
    model: ModelConfig = field(default_factory=ModelConfig)
    seq_len: int = 32
    batch_size: int = 32
    total_steps: int = 2000
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    corpus_paths: list[str] = field(default_factory=list)
    synthetic_vocab_size: int = 1000
    synthetic_num_tokens: int = 400_000
    synthetic_seed: int = 0
    vocab_max_size: int = 8192
    min_freq: int = 1
    readout: str = "linear"
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    eval_fraction: float = 0.05
    eval_batches: int = 4
    precision: str = "float32"
    deterministic: bool = False

    def validate(self) -> None:
        if self.objective not in VARIANTS:
            raise ConfigurationError(f"objective must be one of {VARIANTS}, got {self.objective!r}")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ConfigurationError(f"corruption_rate {self.corruption_rate} outside [0, 1]")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.seq_len < 2 or self.seq_len > self.model.max_positions:
            raise ConfigurationError(
                f"seq_len {self.seq_len} must lie in [2, max_positions={self.model.max_positions}]"
            )
        if self.readout not in ("linear", "mlp"):
            raise ConfigurationError(f"readout must be linear or mlp, got {self.readout!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        s = selected_count(self.seq_len, self.corruption_rate)
        if self.objective in ("mlm", "pmlm", "pplm-some") and s == 0:
            raise ConfigurationError(
                f"{self.objective} at rate {self.corruption_rate} selects no slots of {self.seq_len}"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        base = cls(
            model=ModelConfig.paper(),
            seq_len=128,
            batch_size=64,
            total_steps=40_000,
            learning_rate=5e-4,
            vocab_max_size=50265,
        )
        return dataclasses.replace(base, **overrides)


@dataclass
class StepMetrics:
    step: int
    loss: float
    labels: int
    ms: float
    skipped: bool = False


class Trainer:
    """Owns the model, readout and optimizer for one run."""

    def __init__(self, config: TrainConfig, sequences: np.ndarray):
        config.validate()
        self.config = config
        self.sequences = sequences
        self.model = TransformerModel(config.model, seed=config.seed)
        self.readout = None
        if config.objective in POSITION_VARIANTS:
            self.readout = make_readout(
                config.objective, config.model.num_heads, config.model.max_positions,
                config.readout, seed=config.seed + 1,
            )
        self.params = dict(self.model.params)
        if self.readout is not None:
            self.params.update(self.readout.params)
        self.optimizer = Adam(self.params, config.learning_rate, config.beta1, config.beta2, config.eps)
        self.step = 0
        self.batch_index = 0
        self.skipped = 0

    def batch(self, batch_index: int) -> np.ndarray:
        return next_batch(self.sequences, self.config.batch_size, self.config.seed, batch_index)

    def train_step(self, batch: np.ndarray | None = None, batch_index: int | None = None) -> StepMetrics:
        """One forward/backward/update.

        An empty pair set skips the update and leaves ``step`` unchanged.
        """
        cfg = self.config
        bi = self.batch_index if batch_index is None else batch_index
        ids = self.batch(bi) if batch is None else batch
        if batch_index is None:
            self.batch_index += 1
        start = time.perf_counter()
        self.optimizer.zero_grad()
        rng = np.random.default_rng([cfg.seed, _DROPOUT, bi])
        try:
            out = objective(cfg.objective, self.model, self.readout, ids, cfg.corruption_rate,
                            (cfg.seed, _CORRUPT, bi), mode="train", rng=rng)
        except EmptyPairSet:
            self.skipped += 1
            return StepMetrics(self.step, float("nan"), 0, 0.0, skipped=True)
        out.loss.backward()
        self.optimizer.step()
        self.step += 1
        ms = (time.perf_counter() - start) * 1000.0
        return StepMetrics(self.step, out.loss.item(), out.count, ms)

    # persistence
    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {name: p.data for name, p in self.params.items()}
        st = self.optimizer.state
        for name in self.params:
            if name in st.m:
                tensors[f"adam.m/{name}"] = st.m[name]
                tensors[f"adam.v/{name}"] = st.v[name]
        return tensors

    def save(self, path: str | Path) -> Path:
        meta = {
            "config": self.config.to_dict(),
            "step": self.step,
            "batch_index": self.batch_index,
            "skipped": self.skipped,
            "adam_step": self.optimizer.state.step,
        }
        return ckpt.save(path, self.state_tensors(), meta)

    def restore(self, path: str | Path) -> None:
        tensors, meta = ckpt.load(path)
        for name, p in self.params.items():
            if name not in tensors:
                raise ckpt.CheckpointError(f"checkpoint lacks parameter {name!r}")
            if tensors[name].shape != p.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {name!r}")
            p.data = tensors[name].astype(p.data.dtype).copy()
        st = AdamState(step=meta["adam_step"])
        for name in self.params:
            if f"adam.m/{name}" in tensors:
                st.m[name] = tensors[f"adam.m/{name}"].copy()
                st.v[name] = tensors[f"adam.v/{name}"].copy()
        self.optimizer.state = st
        self.step = meta["step"]
        self.batch_index = meta["batch_index"]
        self.skipped = meta.get("skipped", 0)

    @classmethod
    def from_checkpoint(cls, path: str | Path, sequences: np.ndarray | None = None) -> "Trainer":
        _, meta = ckpt.load(path)
        config = TrainConfig.from_dict(meta["config"])
        trainer = cls(config, sequences if sequences is not None else np.zeros((0, config.seq_len), dtype=np.int64))
        trainer.restore(path)
        return trainer


def load_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def prepare_data(config: TrainConfig) -> tuple[Vocab, np.ndarray, np.ndarray]:
    """Vocabulary, training sequences and held-out evaluation sequences."""
    if config.corpus_paths:
        vocab = build_vocab(config.corpus_paths, config.vocab_max_size, config.min_freq)
        stream = encode_corpus(config.corpus_paths, vocab)
    else:
        docs = synthetic_documents(config.synthetic_vocab_size, config.synthetic_num_tokens, config.synthetic_seed)
        vocab = vocab_from_counts(count_tokens(docs), config.vocab_max_size, config.min_freq)
        stream = np.asarray([i for d in docs for i in encode(d, vocab)], dtype=np.int64)
    seqs = pack_sequences(stream, config.seq_len)
    n_eval = max(config.eval_batches * config.batch_size, int(len(seqs) * config.eval_fraction))
    if len(seqs) - n_eval < config.batch_size:
        raise ConfigurationError(
            f"corpus gives {len(seqs)} sequences; need {n_eval} for evaluation plus a training batch"
        )
    return vocab, seqs[:-n_eval], seqs[-n_eval:]


def eval_batch_list(config: TrainConfig, eval_sequences: np.ndarray) -> list[np.ndarray]:
    b = config.batch_size
    n = min(config.eval_batches, len(eval_sequences) // b)
    return [eval_sequences[i * b:(i + 1) * b] for i in range(n)]


def evaluate(trainer: Trainer, eval_sequences: np.ndarray) -> dict:
    cfg = trainer.config
    batches = eval_batch_list(cfg, eval_sequences)
    if cfg.objective == "mlm":
        return {"mlm_accuracy": mlm_accuracy(trainer.model, batches, cfg.corruption_rate, seed=cfg.seed)}
    return {"relpos_accuracy": relpos_accuracy(
        trainer.model, trainer.readout, batches, cfg.objective, cfg.corruption_rate, seed=cfg.seed
    )}


def _with_model_vocab(config: TrainConfig, vocab: Vocab) -> TrainConfig:
    if config.model.vocab_size == len(vocab):
        return config
    return dataclasses.replace(config, model=dataclasses.replace(config.model, vocab_size=len(vocab)))


def run(config: TrainConfig, resume_from: str | Path | None = None) -> dict:
    """Train end to end and write ``metrics.csv``, checkpoints and ``summary.json``."""
    config.validate()
    with T.precision(config.precision):
        vocab, train_seqs, eval_seqs = prepare_data(config)
        config = _with_model_vocab(config, vocab)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.json")
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

        trainer = Trainer(config, train_seqs)
        if resume_from is not None:
            trainer.restore(resume_from)
        metrics_path = out / "metrics.csv"
        mode = "w"
        if resume_from is not None and metrics_path.exists():
            # rows past the checkpoint will be replayed, so drop them
            kept = [r for r in read_metrics(metrics_path) if int(r["step"]) <= trainer.step]
            with open(metrics_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(METRICS_COLUMNS)
                writer.writerows([r[c] for c in METRICS_COLUMNS] for r in kept)
            mode = "a"
        losses: list[float] = []
        max_consecutive_skips = 100
        consecutive = 0
        with open(metrics_path, mode, newline="") as fh:
            writer = csv.writer(fh)
            if mode == "w":
                writer.writerow(METRICS_COLUMNS)
            while trainer.step < config.total_steps:
                try:
                    m = trainer.train_step()
                except NumericError:
                    trainer.save(out / "checkpoints" / "emergency")
                    log.error("numeric failure at step %d; emergency checkpoint written", trainer.step)
                    raise
                if m.skipped:
                    consecutive += 1
                    if consecutive >= max_consecutive_skips:
                        raise ConfigurationError("every batch selects an empty pair set")
                    continue
                consecutive = 0
                losses.append(m.loss)
                ms = 0.0 if config.deterministic else round(m.ms, 3)
                writer.writerow((m.step, repr(m.loss), m.labels, ms))
                if m.step % config.checkpoint_every == 0 or m.step == config.total_steps:
                    trainer.save(out / "checkpoints" / f"step_{m.step:06d}")
                    fh.flush()

        scores = evaluate(trainer, eval_seqs)
        cost = flop_estimate(config.model, config.objective, config.corruption_rate,
                             config.seq_len, config.batch_size, config.readout)
        per_step = cost.head_flops_per_batch + cost.body_flops_per_batch
        summary = {
            "objective": config.objective,
            "corruption_rate": config.corruption_rate,
            "steps": trainer.step,
            "skipped_batches": trainer.skipped,
            "final_loss": losses[-1] if losses else None,
            "smoothed_final_loss": float(np.mean(losses[-100:])) if losses else None,
            **scores,
            "total_flops_estimate": per_step * trainer.step,
            "head_flops_per_batch": cost.head_flops_per_batch,
            "body_flops_per_batch": cost.body_flops_per_batch,
            "optimizer": {"name": "adam", "lr": config.learning_rate, "beta1": config.beta1,
                          "beta2": config.beta2, "eps": config.eps, "weight_decay": 0.0, "schedule": "constant"},
            "vocab_size": len(vocab),
            "parameters": trainer.model.num_parameters(),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
