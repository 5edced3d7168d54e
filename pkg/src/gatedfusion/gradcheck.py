"""Finite-difference check of every model parameter on a tiny configuration."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .corpus import BOS_ID, EOS_ID, ExamplePair
from .model import FusionModel, ModelConfig, init_parameters
from .trainer import pad_batch

TOLERANCE = 1e-5


def tiny_config(seed: int = 0, fusion_mode: str = "both", gate_granularity: str = "scalar") -> ModelConfig:
    return ModelConfig(
        vocab_size=20,
        d_model=16,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=1,
        d_ff=32,
        max_len=8,
        dropout_rate=0.0,
        fusion_mode=fusion_mode,
        gate_granularity=gate_granularity,
        seed=seed,
    )


def tiny_pairs(config: ModelConfig, seed: int = 0, n_pairs: int = 2, length: int = 5):
    rng = np.random.default_rng([seed, 7])
    out = []
    for _ in range(n_pairs):
        src = rng.integers(4, config.vocab_size, size=length)
        tgt = rng.integers(4, config.vocab_size, size=length)
        out.append(ExamplePair(tuple(int(t) for t in src), (BOS_ID, *(int(t) for t in tgt), EOS_ID)))
    return out


def perturbed_model(model: FusionModel, scale: float = 0.3, seed: int = 0) -> FusionModel:
    """Copy of ``model`` with all parameters jittered.

    At init the biases are zero and gains one; jitter keeps the check from
    passing only because some paths are switched off.
    """
    rng = np.random.default_rng([seed, 11])
    return FusionModel(model.config, {k: v + scale * rng.standard_normal(v.shape) for k, v in model.params.items()})


def check_model(model: FusionModel, pairs, step: float = 1e-6, names=None) -> dict:
    """Max relative finite-difference error per parameter tensor, eval mode."""
    batch = pad_batch(pairs)
    base = model.leaves()
    errors = {}
    for name in names or model.params:

        def loss_of(leaf, name=name):
            p = dict(base)
            p[name] = leaf
            return model.batch_loss(batch, p)

        errors[name] = nx.finite_diff_check(loss_of, model.params[name], step)
    return errors


def run(seed: int = 0, fusion_mode: str = "both", gate_granularity: str = "scalar") -> dict:
    config = tiny_config(seed, fusion_mode, gate_granularity)
    model = perturbed_model(init_parameters(config), seed=seed)
    return check_model(model, tiny_pairs(config, seed))
