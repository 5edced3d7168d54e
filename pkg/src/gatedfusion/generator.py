"""Autoregressive decoding: greedy and temperature/top-k sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID
from .errors import ConfigError, ContractError, LengthError
from .model import FusionModel, _pad

# never emitted: <pad> and <bos> have no meaning mid-sequence
_BANNED = (PAD_ID, BOS_ID)


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    top_k: int = 0
    max_len: int = 32
    seed: int = 0

    def validate(self) -> "DecodeConfig":
        if self.strategy not in ("greedy", "sample"):
            raise ConfigError(f"strategy must be greedy or sample, got {self.strategy!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        return self


def _check_sources(model: FusionModel, sources):
    for src in sources:
        if len(src) == 0:
            raise ContractError("source must be non-empty")
        if len(src) > model.config.max_len:
            raise LengthError(f"source length {len(src)} exceeds max_len={model.config.max_len}")


def _step_limit(model: FusionModel, max_len: int) -> int:
    # the decoder input (<bos> + generated) must fit in the model's positions
    return min(max_len, model.config.max_len)


class _Stepper:
    """Encodes once, then returns next-token logits for growing prefixes."""

    def __init__(self, model: FusionModel, sources):
        self.model = model
        self.leaves = model.leaves()
        self.enc = None
        if model.config.fusion_mode != "none":
            src, mask = _pad([list(s) for s in sources])
            self.enc = model.encode_batch(src, mask, self.leaves)

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        out = self.model.decode_batch(prefixes, self.enc, self.leaves)
        logits = out.logits.value[:, -1, :].copy()
        logits[:, list(_BANNED)] = -np.inf
        return logits


def _trim(row) -> list[int]:
    out = []
    for tok in row:
        if tok == EOS_ID:
            break
        out.append(int(tok))
    return out


def greedy_decode_batch(model: FusionModel, sources, max_len: int = 32) -> list[list[int]]:
    """Greedy decoding of several sources at once; see :func:`greedy_decode`."""
    sources = [list(s) for s in sources]
    if not sources:
        return []
    _check_sources(model, sources)
    step = _Stepper(model, sources)
    prefixes = np.full((len(sources), 1), BOS_ID, dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    for _ in range(_step_limit(model, max_len)):
        nxt = np.argmax(step(prefixes), axis=-1)  # first maximum = lowest id
        nxt = np.where(done, EOS_ID, nxt)
        prefixes = np.concatenate([prefixes, nxt[:, None]], axis=1)
        done |= nxt == EOS_ID
        if done.all():
            break
    return [_trim(row[1:]) for row in prefixes]


def greedy_decode(model: FusionModel, source, max_len: int = 32) -> list[int]:
    """Argmax decoding from <bos> until <eos> or ``max_len`` tokens.

    The result excludes <bos> and the terminating <eos>.
    """
    return greedy_decode_batch(model, [source], max_len)[0]


def _draw(logits: np.ndarray, config: DecodeConfig, rng: np.random.Generator) -> int:
    scaled = logits / config.temperature
    if config.top_k:
        keep = np.argsort(-scaled, kind="stable")[: config.top_k]
        masked = np.full_like(scaled, -np.inf)
        masked[keep] = scaled[keep]
        scaled = masked
    probs = np.exp(scaled - scaled.max())
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(cdf) - 1)


def sample_decode(model: FusionModel, source, config: DecodeConfig) -> list[int]:
    """Temperature / top-k sampling with a PRNG seeded from ``config.seed``."""
    config.validate()
    source = list(source)
    _check_sources(model, [source])
    rng = np.random.default_rng(config.seed)
    step = _Stepper(model, [source])
    prefix = [BOS_ID]
    for _ in range(_step_limit(model, config.max_len)):
        tok = _draw(step(np.asarray([prefix]))[0], config, rng)
        if tok == EOS_ID:
            break
        prefix.append(tok)
    return prefix[1:]


def decode_many(model: FusionModel, sources, config: DecodeConfig) -> list[list[int]]:
    """Decode every source with ``config``; sample streams are seeded per index."""
    config.validate()
    if config.strategy == "greedy":
        return greedy_decode_batch(model, sources, config.max_len)
    return [
        sample_decode(model, src, DecodeConfig("sample", config.temperature, config.top_k, config.max_len, config.seed + i))
        for i, src in enumerate(sources)
    ]
