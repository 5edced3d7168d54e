"""Bidirectional encoder + causal decoder joined by cross-attention and a sigmoid gate.

Encoder and decoder are pre-norm transformer stacks with learned positional
embeddings. One token embedding table is shared by the encoder input, the
decoder input and the (tied) output projection.

How the decoder is conditioned on the encodings ``h`` depends on
``fusion_mode``:

* ``none``: the source is ignored (decoder-only ablation).
* ``cross_attention``: every decoder block gets a residual cross-attention sublayer.
* ``gate``: after the final block, ``c_t = cross_attend(z_t, h)`` is mixed in by
  ``alpha_t = sigmoid(W z_t + b)`` and ``z'_t = alpha_t c_t + (1 - alpha_t) z_t``.
* ``both``: the two mechanisms together.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .corpus import PAD_ID
from .errors import ConfigError, ContractError, FormatError, LengthError
from .numerics import Node

FUSION_MODES = ("none", "cross_attention", "gate", "both")
GATE_GRANULARITIES = ("scalar", "per_dimension")
INIT_STD = 0.02
LN_EPS = 1e-5

MAGIC = b"GFUS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    n_encoder_layers: int = 1
    n_decoder_layers: int = 1
    d_ff: int = 64
    max_len: int = 32
    dropout_rate: float = 0.1
    fusion_mode: str = "both"
    gate_granularity: str = "scalar"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_heads", "n_encoder_layers", "n_decoder_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.gate_granularity not in GATE_GRANULARITIES:
            raise ConfigError(f"gate_granularity must be one of {GATE_GRANULARITIES}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        return self

    @property
    def uses_cross_attention(self) -> bool:
        return self.fusion_mode in ("cross_attention", "both")

    @property
    def uses_gate(self) -> bool:
        return self.fusion_mode in ("gate", "both")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            key, sep, raw = line.partition("=")
            if not sep or key not in types:
                raise ValueError(f"bad config line {line!r}")
            kind = types[key]
            values[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        return cls(**values)


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered ``(name, shape, init)`` for every parameter; init is normal/ones/zeros."""
    d, f, v, L = config.d_model, config.d_ff, config.vocab_size, config.max_len
    out = [("tok_emb", (v, d), "normal")]

    def ln(prefix):
        out.extend([(f"{prefix}.gain", (d,), "ones"), (f"{prefix}.bias", (d,), "zeros")])

    def attn(prefix, with_output=True):
        for p in ("q", "k", "v") + (("o",) if with_output else ()):
            out.extend([(f"{prefix}.w{p}", (d, d), "normal"), (f"{prefix}.b{p}", (d,), "zeros")])

    def ffn(prefix):
        out.extend(
            [
                (f"{prefix}.w1", (d, f), "normal"),
                (f"{prefix}.b1", (f,), "zeros"),
                (f"{prefix}.w2", (f, d), "normal"),
                (f"{prefix}.b2", (d,), "zeros"),
            ]
        )

    out.append(("enc.pos_emb", (L, d), "normal"))
    for i in range(config.n_encoder_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    ln("enc.ln_f")

    out.append(("dec.pos_emb", (L, d), "normal"))
    for i in range(config.n_decoder_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        if config.uses_cross_attention:
            ln(f"dec.{i}.ln_x")
            attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ff")
    ln("dec.ln_f")

    if config.uses_gate:
        # the gate's context is the pooled value projection, so no output matrix
        attn("gate.attn", with_output=False)
        width = 1 if config.gate_granularity == "scalar" else d
        out.extend([("gate.w", (d, width), "normal"), ("gate.b", (width,), "zeros")])
    return out


class EncoderOutput(NamedTuple):
    h: Node  # [B, n, d]
    mask: np.ndarray  # [B, n] True on real tokens

    @property
    def encodings(self) -> np.ndarray:
        return self.h.value


@dataclass
class GateTrace:
    """Per-step gate values; ``[T]`` in scalar mode, ``[T, d]`` per dimension."""

    alphas: np.ndarray

    def __len__(self):
        return len(self.alphas)


class DecoderOutput(NamedTuple):
    logits: Node  # [B, T, V]
    hidden: Node  # decoder state z before fusion
    fused: Node  # z' (equals hidden when there is no gate)
    alpha: Node | None


def gate(z, c, w, b, alpha=None):
    """Return ``(alpha, alpha * c + (1 - alpha) * z)`` with ``alpha = sigmoid(z @ w + b)``.

    Passing ``alpha`` pins the gate instead of computing it.
    """
    if alpha is None:
        alpha = nx.sigmoid(nx.linear(nx._node(z), nx._node(w), nx._node(b)))
    else:
        alpha = nx._node(alpha)
    return alpha, nx.mul(alpha, c) + nx.mul(nx.sub(1.0, alpha), z)


def _mask_bias(key_mask: np.ndarray, n_query: int, causal: bool) -> np.ndarray:
    """Additive attention bias of shape [B, 1, Tq, Tk]."""
    bias = np.where(key_mask[:, None, None, :], 0.0, nx.MASK_VALUE)
    if causal:
        future = np.triu(np.ones((n_query, key_mask.shape[1]), dtype=bool), k=1)
        bias = np.where(future[None, None], nx.MASK_VALUE, bias)
    else:
        bias = np.broadcast_to(bias, bias.shape[:2] + (n_query, key_mask.shape[1]))
    return np.ascontiguousarray(bias)


class FusionModel:
    """A model configuration plus its named parameter arrays (the checkpoint)."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config.validate()
        expected = {name: shape for name, shape, _ in parameter_layout(config)}
        if list(params) != list(expected):
            raise ContractError("parameter names do not match the configuration")
        for name, value in params.items():
            if value.shape != expected[name]:
                raise ContractError(f"{name} has shape {value.shape}, expected {expected[name]}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def leaves(self) -> dict:
        """Fresh leaf nodes over the current parameter arrays."""
        return {k: Node(v, name=k) for k, v in self.params.items()}

    # --- building blocks ----------------------------------------------------

    def _attention(self, p, prefix, xq, xkv, key_mask, causal, with_output=True):
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H = self.config.n_heads
        dh = d // H

        def heads(x, which, T):
            y = nx.linear(x, p[f"{prefix}.w{which}"], p[f"{prefix}.b{which}"])
            return nx.transpose(nx.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, "q", Tq), heads(xkv, "k", Tk), heads(xkv, "v", Tk)
        scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(dh))
        weights = nx.softmax(nx.add(scores, _mask_bias(key_mask, Tq, causal)))
        ctx = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (B, Tq, d))
        if with_output:
            ctx = nx.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
        return ctx, weights

    def _ffn(self, p, prefix, x):
        hidden = nx.gelu(nx.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return nx.linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _ln(self, p, prefix, x):
        return nx.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"], LN_EPS)

    def _embed(self, p, ids, pos_name, rng):
        T = ids.shape[1]
        if T > self.config.max_len:
            raise LengthError(f"sequence length {T} exceeds max_len={self.config.max_len}")
        x = nx.embedding(p["tok_emb"], ids) + nx.embedding(p[pos_name], np.arange(T))
        return nx.dropout(x, self.config.dropout_rate, rng)

    # --- batched forward ----------------------------------------------------

    def encode_batch(self, src, src_mask, p=None, rng=None) -> EncoderOutput:
        """Encode right-padded ``src`` [B, n]; dropout runs only when ``rng`` is given."""
        p = p or self.leaves()
        src = np.asarray(src, dtype=np.int64)
        src_mask = np.asarray(src_mask, dtype=bool)
        rate = self.config.dropout_rate
        x = self._embed(p, src, "enc.pos_emb", rng)
        for i in range(self.config.n_encoder_layers):
            y = self._ln(p, f"enc.{i}.ln1", x)
            a, _ = self._attention(p, f"enc.{i}.attn", y, y, src_mask, False)
            x = x + nx.dropout(a, rate, rng)
            x = x + nx.dropout(self._ffn(p, f"enc.{i}.ff", self._ln(p, f"enc.{i}.ln2", x)), rate, rng)
        return EncoderOutput(self._ln(p, "enc.ln_f", x), src_mask)

    def cross_attend(self, z, enc: EncoderOutput, p=None, prefix="gate.attn"):
        """Attention-pooled value projection of ``h`` with queries from ``z``.

        Returns ``(c, weights)`` with weights shaped [B, heads, T, n].
        """
        p = p or self.leaves()
        return self._attention(p, prefix, nx._node(z), enc.h, enc.mask, False, with_output=False)

    def decode_batch(self, tgt_in, enc: EncoderOutput | None, p=None, rng=None, alpha=None) -> DecoderOutput:
        """Teacher-forced decoder pass over ``tgt_in`` [B, T]."""
        p = p or self.leaves()
        cfg = self.config
        rate = cfg.dropout_rate
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        conditioned = cfg.fusion_mode != "none"
        if conditioned and enc is None:
            raise ContractError(f"fusion_mode={cfg.fusion_mode} needs encoder output")
        causal_keys = np.ones(tgt_in.shape, dtype=bool)

        x = self._embed(p, tgt_in, "dec.pos_emb", rng)
        for i in range(cfg.n_decoder_layers):
            y = self._ln(p, f"dec.{i}.ln1", x)
            a, _ = self._attention(p, f"dec.{i}.self", y, y, causal_keys, True)
            x = x + nx.dropout(a, rate, rng)
            if cfg.uses_cross_attention:
                y = self._ln(p, f"dec.{i}.ln_x", x)
                c, _ = self._attention(p, f"dec.{i}.cross", y, enc.h, enc.mask, False)
                x = x + nx.dropout(c, rate, rng)
            x = x + nx.dropout(self._ffn(p, f"dec.{i}.ff", self._ln(p, f"dec.{i}.ln2", x)), rate, rng)
        z = self._ln(p, "dec.ln_f", x)

        fused, a_t = z, None
        if cfg.uses_gate:
            c, _ = self.cross_attend(z, enc, p)
            a_t, fused = gate(z, c, p["gate.w"], p["gate.b"], alpha)
        logits = nx.matmul(fused, nx.swap_last(p["tok_emb"]))
        return DecoderOutput(logits, z, fused, a_t)

    def batch_loss(self, batch, p=None, rng=None) -> Node:
        """Mean next-token NLL over every supervised position of a padded batch."""
        p = p or self.leaves()
        enc = None
        if self.config.fusion_mode != "none":
            enc = self.encode_batch(batch.source, batch.source_mask, p, rng)
        out = self.decode_batch(batch.decoder_input, enc, p, rng)
        return nx.cross_entropy_mean(out.logits, batch.decoder_target, ignore=PAD_ID)

    def token_nll(self, batch) -> np.ndarray:
        """Eval-mode NLL per supervised position, [B, T], zero at padding."""
        p = self.leaves()
        enc = None
        if self.config.fusion_mode != "none":
            enc = self.encode_batch(batch.source, batch.source_mask, p)
        logits = self.decode_batch(batch.decoder_input, enc, p).logits.value
        return nx.token_nll(logits, batch.decoder_target, ignore=PAD_ID)

    def next_token_logits(self, sources, prefixes) -> np.ndarray:
        """Eval-mode logits for the token after each prefix.

        ``sources`` is a list of id sequences and ``prefixes`` a [B, T] array
        of equal-length decoder inputs. Returns [B, V].
        """
        src, mask = _pad(sources)
        p = self.leaves()
        enc = self.encode_batch(src, mask, p) if self.config.fusion_mode != "none" else None
        return self.decode_batch(prefixes, enc, p).logits.value[:, -1, :]

    # --- single-sequence API ------------------------------------------------

    def encode(self, source, train_mode=False, rng=None) -> EncoderOutput:
        source = np.asarray(source, dtype=np.int64)[None, :]
        return self.encode_batch(source, np.ones(source.shape, dtype=bool), rng=self._rng(train_mode, rng))

    def decode_forward(self, prefix, enc: EncoderOutput, train_mode=False, rng=None):
        """Logits [T, V] for every prefix position and the gate trace."""
        prefix = np.asarray(prefix, dtype=np.int64)[None, :]
        out = self.decode_batch(prefix, enc, rng=self._rng(train_mode, rng))
        alphas = np.empty((prefix.shape[1], 0)) if out.alpha is None else out.alpha.value[0]
        if self.config.gate_granularity == "scalar" and alphas.shape[1] <= 1:
            alphas = alphas.reshape(-1)
        return out.logits.value[0], GateTrace(alphas)

    def forward_loss(self, pair, train_mode=False, rng=None) -> Node:
        """Teacher-forced mean NLL of ``pair.target[1:]`` given ``pair.target[:-1]``."""
        target = np.asarray(pair.target, dtype=np.int64)
        if target.size < 2:
            raise ContractError("target must hold at least two tokens")
        batch = _SingleBatch(np.asarray(pair.source, dtype=np.int64)[None], target[None, :-1], target[None, 1:])
        return self.batch_loss(batch, rng=self._rng(train_mode, rng))

    def _rng(self, train_mode, rng):
        if not train_mode:
            return None
        return rng if rng is not None else np.random.default_rng(self.config.seed)


class _SingleBatch(NamedTuple):
    source: np.ndarray
    decoder_input: np.ndarray
    decoder_target: np.ndarray

    @property
    def source_mask(self):
        return np.ones(self.source.shape, dtype=bool)


def _pad(seqs):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def init_parameters(config: ModelConfig) -> FusionModel:
    """Normal(0, 0.02^2) weights from ``config.seed``; gains 1, biases 0."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape, kind in parameter_layout(config):
        if kind == "normal":
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "ones":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return FusionModel(config, params)


# --- checkpoint file --------------------------------------------------------
#
# "GFUS" | u32 version | u32 config byte length | config "key=value\n" lines
# | u32 tensor count | per tensor: u16 name length, name, u8 rank,
# u64 dims..., f64 payload. All little-endian.


def save_checkpoint(model: FusionModel, path) -> None:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = model.config.to_text().encode("utf-8")
    chunks += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        chunks += [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim)]
        chunks += [struct.pack(f"<{value.ndim}Q", *value.shape), value.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path) -> FusionModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", 0)
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        config = ModelConfig.from_text(r.take(cfg_len, "config").decode("utf-8")).validate()
    except (ValueError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid config block: {exc}", cfg_at) from exc

    layout = parameter_layout(config)
    count_at = r.pos
    (count,) = r.unpack("<I", "tensor count")
    if count != len(layout):
        raise FormatError(f"config implies {len(layout)} tensors, file has {count}", count_at)
    params = {}
    for name, shape, _ in layout:
        at = r.pos
        (name_len,) = r.unpack("<H", "name length")
        found = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}Q", "dims")
        if found != name or tuple(dims) != shape:
            raise FormatError(
                f"tensor {found!r} {tuple(dims)} does not match config ({name!r} {shape})", at
            )
        payload = r.take(8 * math.prod(shape), f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return FusionModel(config, params)

