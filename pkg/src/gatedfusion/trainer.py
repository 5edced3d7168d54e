"""MLE training with Adam, global-norm clipping and per-epoch validation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import numerics as nx
from .corpus import PAD_ID, CorpusSplit
from .errors import ConfigError, ContractError
from .model import FusionModel

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "split", "loss", "ppl")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # <= 0 turns clipping off
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    log_every: int = 0  # steps between train rows; 0 = one row per epoch
    checkpoint_every: int = 0  # epochs; 0 = final checkpoint only
    patience: int = 0  # epochs without val improvement before stopping; 0 = never

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("epochs", "seed", "log_every", "checkpoint_every", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        return self


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.keys() != grads.keys():
        raise ContractError("params and grads name different tensors")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float) -> dict:
    """Scale every gradient by ``clip_norm / norm`` when the global L2 norm exceeds it."""
    norm = global_norm(grads)
    if clip_norm <= 0 or norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}


class Batch(NamedTuple):
    source: np.ndarray  # [B, n]
    source_mask: np.ndarray  # [B, n] True on real tokens
    decoder_input: np.ndarray  # [B, T] target[:-1], right-padded
    decoder_target: np.ndarray  # [B, T] target[1:], PAD_ID where unsupervised

    @property
    def n_tokens(self) -> int:
        return int(np.count_nonzero(self.decoder_target != PAD_ID))


def pad_batch(pairs, pad_id: int = PAD_ID) -> Batch:
    """Right-pad sources and targets of ``pairs`` to the per-batch maxima."""
    if not pairs:
        raise ContractError("empty batch")
    for pair in pairs:
        if len(pair.source) == 0 or len(pair.target) < 2:
            raise ContractError("every pair needs a non-empty source and a target of length >= 2")
    B = len(pairs)
    n = max(len(p.source) for p in pairs)
    T = max(len(p.target) for p in pairs) - 1
    src = np.full((B, n), pad_id, dtype=np.int64)
    mask = np.zeros((B, n), dtype=bool)
    dec_in = np.full((B, T), pad_id, dtype=np.int64)
    dec_out = np.full((B, T), pad_id, dtype=np.int64)
    for i, pair in enumerate(pairs):
        src[i, : len(pair.source)] = pair.source
        mask[i, : len(pair.source)] = True
        tgt = pair.target
        dec_in[i, : len(tgt) - 1] = tgt[:-1]
        dec_out[i, : len(tgt) - 1] = tgt[1:]
    return Batch(src, mask, dec_in, dec_out)


def batches(pairs, batch_size: int):
    for i in range(0, len(pairs), batch_size):
        yield pad_batch(pairs[i : i + batch_size])


def mean_loss(model: FusionModel, pairs, batch_size: int = 64) -> float:
    """Eval-mode NLL averaged over every supervised token of ``pairs``."""
    nll, count = 0.0, 0
    for batch in batches(list(pairs), batch_size):
        nll += float(model.token_nll(batch).sum())
        count += batch.n_tokens
    if count == 0:
        raise ContractError("no supervised positions")
    return nll / count


@dataclass
class LogRow:
    epoch: int
    step: int
    split: str
    loss: float

    @property
    def ppl(self) -> float:
        return math.exp(self.loss)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, step, split, loss):
        self.rows.append(LogRow(epoch, step, split, float(loss)))

    def losses(self, split="train") -> list[float]:
        return [r.loss for r in self.rows if r.split == split]

    def epoch_means(self, split="train") -> dict:
        """Mean logged loss per epoch for ``split``."""
        acc = {}
        for r in self.rows:
            if r.split == split:
                acc.setdefault(r.epoch, []).append(r.loss)
        return {e: sum(v) / len(v) for e, v in acc.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([r.epoch, r.step, r.split, f"{r.loss:.17g}", f"{r.ppl:.17g}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != LOG_HEADER:
                raise ValueError(f"{path}: unexpected log header")
            for epoch, step, split, loss, _ in reader:
                out.append(int(epoch), int(step), split, float(loss))
        return out


def epoch_seed(seed: int, epoch: int) -> int:
    return seed ^ epoch


def train(
    model: FusionModel,
    split: CorpusSplit,
    config: TrainConfig,
    on_checkpoint: Callable[[int, FusionModel], None] | None = None,
) -> tuple[FusionModel, TrainingLog]:
    """Train a copy of ``model`` on ``split.train``; ``model`` itself is untouched.

    Each epoch shuffles the training pairs with seed ``seed ^ epoch``, runs
    forward/backward/clip/Adam per batch, then logs the eval-mode
    validation loss. ``on_checkpoint(epoch, model)`` fires every
    ``checkpoint_every`` epochs.
    """
    config.validate()
    train_pairs = list(split.train)
    if not train_pairs:
        raise ConfigError("training split is empty")
    for pair in train_pairs:
        pair.check_vocab(model.config.vocab_size)

    model = FusionModel(model.config, {k: v.copy() for k, v in model.params.items()})
    state = AdamState.zeros_like(model.params)
    dropout_rng = np.random.default_rng([config.seed, 1])
    history = TrainingLog()
    step = 0
    best_val, stale = math.inf, 0

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(epoch_seed(config.seed, epoch)).permutation(len(train_pairs))
        shuffled = [train_pairs[i] for i in order]
        window_loss, window_steps = 0.0, 0
        for batch in batches(shuffled, config.batch_size):
            leaves = model.leaves()
            loss = model.batch_loss(batch, leaves, dropout_rng)
            nx.backward(loss)
            grads = clip_gradients({k: n.grad for k, n in leaves.items()}, config.clip_norm)
            adam_step(model.params, grads, state, config)
            step += 1
            window_loss += float(loss.value)
            window_steps += 1
            if config.log_every and step % config.log_every == 0:
                history.append(epoch, step, "train", window_loss / window_steps)
                window_loss, window_steps = 0.0, 0
        if window_steps:
            history.append(epoch, step, "train", window_loss / window_steps)

        if split.validation:
            val = mean_loss(model, split.validation)
            history.append(epoch, step, "val", val)
            log.info("epoch %d step %d train %.4f val %.4f", epoch, step, history.rows[-2].loss, val)
            if config.patience:
                if val < best_val:
                    best_val, stale = val, 0
                else:
                    stale += 1
        if on_checkpoint and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            on_checkpoint(epoch, model)
        if config.patience and stale >= config.patience:
            log.info("stopping early after epoch %d", epoch)
            break
    return model, history
