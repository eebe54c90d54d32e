"""Pre-norm transformer encoder-decoder with a causal language-model mode.

Parameter names are canonical and fully determined by :class:`ModelConfig`:

    src_embed, tgt_embed, tgt_out_bias
    enc.<i>.self_attn.{q,k,v,o}   enc.<i>.ff.{w1,b1,w2,b2}   enc.<i>.norm{1,2}.{gain,bias}
    dec.<i>.self_attn.{q,k,v,o}   dec.<i>.cross_attn.{q,k,v,o}
    dec.<i>.ff.{w1,b1,w2,b2}      dec.<i>.norm{1,2,3}.{gain,bias}

Decoder ``norm2`` belongs to the cross-attention sublayer, so a language-model
stack (no cross-attention) carries ``norm1`` and ``norm3`` only. With tied
target embeddings the output projection is ``tgt_embed`` transposed and no
separate weight exists; otherwise it is ``tgt_out_proj``.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

ParameterStore = dict  # canonical name -> np.ndarray (float32)

MASK_VALUE = -1e9
ATTN = ("q", "k", "v", "o")
FF = ("w1", "b1", "w2", "b2")


class MaskMode(str, enum.Enum):
    BIDIRECTIONAL = "bidirectional"
    CAUSAL = "causal"


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    heads: int = 4
    src_vocab: int = 0
    tgt_vocab: int = 0
    dropout: float = 0.1
    tie_tgt_embeddings: bool = True

    def __post_init__(self):
        if self.model_dim <= 0 or self.ff_dim <= 0 or self.heads <= 0:
            raise ConfigError("model_dim, ff_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.enc_layers and self.src_vocab <= 0:
            raise ConfigError("src_vocab must be positive when the encoder is used")
        if self.dec_layers and self.tgt_vocab <= 0:
            raise ConfigError("tgt_vocab must be positive when the decoder is used")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- schema -------------------------------------------------------------------


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{p}" for p in ATTN]


def _norm_names(prefix: str) -> list[str]:
    return [f"{prefix}.gain", f"{prefix}.bias"]


def encoder_layer_names(i: int) -> list[str]:
    p = f"enc.{i}"
    return (
        _attn_names(f"{p}.self_attn")
        + [f"{p}.ff.{n}" for n in FF]
        + _norm_names(f"{p}.norm1")
        + _norm_names(f"{p}.norm2")
    )


def decoder_layer_names(i: int, cross: bool = True) -> list[str]:
    p = f"dec.{i}"
    names = _attn_names(f"{p}.self_attn") + [f"{p}.ff.{n}" for n in FF] + _norm_names(f"{p}.norm1")
    if cross:
        names += _attn_names(f"{p}.cross_attn") + _norm_names(f"{p}.norm2")
    return names + _norm_names(f"{p}.norm3")


def parameter_names(config: ModelConfig) -> list[str]:
    """Full encoder-decoder schema."""
    names = []
    if config.enc_layers:
        names.append("src_embed")
        for i in range(config.enc_layers):
            names += encoder_layer_names(i)
    names += ["tgt_embed", "tgt_out_bias"]
    if not config.tie_tgt_embeddings:
        names.append("tgt_out_proj")
    for i in range(config.dec_layers):
        names += decoder_layer_names(i)
    return sorted(names)


def lm_parameter_names(config: ModelConfig, side: str) -> list[str]:
    """Schema of a causal LM stack for one side (never any cross-attention)."""
    if side == "src":
        names = ["src_embed"]
        for i in range(config.enc_layers):
            names += encoder_layer_names(i)
    elif side == "tgt":
        names = ["tgt_embed", "tgt_out_bias"]
        if not config.tie_tgt_embeddings:
            names.append("tgt_out_proj")
        for i in range(config.dec_layers):
            names += decoder_layer_names(i, cross=False)
    else:
        raise ConfigError(f"unknown side {side!r}")
    return sorted(names)


def parameter_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, f = config.model_dim, config.ff_dim
    if name == "src_embed":
        return (config.src_vocab, d)
    if name == "tgt_embed":
        return (config.tgt_vocab, d)
    if name == "tgt_out_bias":
        return (config.tgt_vocab,)
    if name == "tgt_out_proj":
        return (d, config.tgt_vocab)
    leaf = name.rsplit(".", 1)[1]
    if leaf in ATTN:
        return (d, d)
    return {"w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,), "gain": (d,), "bias": (d,)}[leaf]


def _init_std(config: ModelConfig, name: str) -> float:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "w2":
        return config.ff_dim**-0.5
    return config.model_dim**-0.5


def _name_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_parameter(config: ModelConfig, name: str, seed: int) -> np.ndarray:
    """Fresh value for one parameter; independent of which others exist."""
    shape = parameter_shape(config, name)
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape, dtype=np.float32)
    if leaf in ("bias", "b1", "b2") or name == "tgt_out_bias":
        return np.zeros(shape, dtype=np.float32)
    rng = _name_rng(seed, name)
    return (rng.standard_normal(shape) * _init_std(config, name)).astype(np.float32)


def init_parameters(config: ModelConfig, seed: int, names=None) -> ParameterStore:
    """Scaled-normal weights (std ``model_dim**-0.5``; ``ff_dim**-0.5`` for
    the second FF matrix), zero biases and unit norm gains."""
    names = parameter_names(config) if names is None else names
    return {n: init_parameter(config, n, seed) for n in names}


# -- forward ------------------------------------------------------------------


_POS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(length: int, dim: int) -> np.ndarray:
    key = (length, dim)
    pe = _POS_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(pos * rate)
        pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
        pe = pe.astype(np.float32)
        _POS_CACHE[key] = pe
    return pe


def _check_ids(ids: np.ndarray, vocab: int, side: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{side} token id {int(ids.max())} out of range for vocabulary of size {vocab}")


def attention_bias(key_mask: np.ndarray, causal: bool) -> np.ndarray:
    """Additive attention bias of shape (B, 1, Lq|1, Lk)."""
    bias = np.where(key_mask, 0.0, MASK_VALUE).astype(np.float32)[:, None, None, :]
    if causal:
        L = key_mask.shape[1]
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        bias = bias + np.where(future, MASK_VALUE, 0.0).astype(np.float32)[None, None]
    return bias


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, heads, d // heads).transpose(0, 2, 1, 3)


def attention(params, prefix: str, query: Tensor, memory: Tensor, bias: np.ndarray, heads: int) -> Tensor:
    B, Lq, d = query.shape
    q = _split_heads(ad.matmul(query, params[f"{prefix}.q"]), heads)
    k = _split_heads(ad.matmul(memory, params[f"{prefix}.k"]), heads)
    v = _split_heads(ad.matmul(memory, params[f"{prefix}.v"]), heads)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // heads))
    weights = ad.softmax(scores + Tensor(bias.astype(scores.dtype, copy=False)), axis=-1)
    ctx = ad.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    return ad.matmul(ctx, params[f"{prefix}.o"])


def feed_forward(params, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _norm(params, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _embed(params, table: str, ids: np.ndarray, config: ModelConfig, p: float, rng) -> Tensor:
    d = config.model_dim
    x = ad.embedding(params[table], ids) * math.sqrt(d)
    x = x + Tensor(positional_encoding(ids.shape[1], d).astype(x.dtype, copy=False))
    return ad.dropout(x, p, rng)


def _ensure_tensors(params) -> dict:
    return {k: (v if isinstance(v, Tensor) else Tensor(v)) for k, v in params.items()}


def encode(
    params,
    config: ModelConfig,
    src_ids: np.ndarray,
    src_mask: np.ndarray,
    mode: MaskMode = MaskMode.BIDIRECTIONAL,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Encoder states, shape (B, L, model_dim). Dropout applies only when an
    RNG is given."""
    params = _ensure_tensors(params)
    src_ids = np.asarray(src_ids)
    _check_ids(src_ids, config.src_vocab, "source")
    p = config.dropout if rng is not None else 0.0
    x = _embed(params, "src_embed", src_ids, config, p, rng)
    bias = attention_bias(np.asarray(src_mask, dtype=bool), causal=MaskMode(mode) is MaskMode.CAUSAL)
    for i in range(config.enc_layers):
        pre = f"enc.{i}"
        h = _norm(params, f"{pre}.norm1", x)
        x = x + ad.dropout(attention(params, f"{pre}.self_attn", h, h, bias, config.heads), p, rng)
        x = x + ad.dropout(feed_forward(params, f"{pre}.ff", _norm(params, f"{pre}.norm2", x)), p, rng)
    return x


def _output_logits(params, config: ModelConfig, h: Tensor, table: str, bias: str | None) -> Tensor:
    if table == "tgt_embed" and not config.tie_tgt_embeddings:
        logits = ad.matmul(h, params["tgt_out_proj"])
    else:
        logits = ad.matmul(h, params[table].transpose(1, 0)) * (config.model_dim**-0.5)
    if bias is not None:
        logits = logits + params[bias]
    return logits


def decode_step_logits(
    params,
    config: ModelConfig,
    tgt_ids: np.ndarray,
    tgt_mask: np.ndarray,
    enc_states: Tensor | None = None,
    src_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Decoder logits, shape (B, L, tgt_vocab); position t sees tgt[:t+1].

    Without ``enc_states`` the cross-attention sublayers are skipped (LM mode).
    """
    params = _ensure_tensors(params)
    tgt_ids = np.asarray(tgt_ids)
    _check_ids(tgt_ids, config.tgt_vocab, "target")
    p = config.dropout if rng is not None else 0.0
    x = _embed(params, "tgt_embed", tgt_ids, config, p, rng)
    self_bias = attention_bias(np.asarray(tgt_mask, dtype=bool), causal=True)
    cross_bias = None
    if enc_states is not None:
        cross_bias = attention_bias(np.asarray(src_mask, dtype=bool), causal=False)
    for i in range(config.dec_layers):
        pre = f"dec.{i}"
        h = _norm(params, f"{pre}.norm1", x)
        x = x + ad.dropout(attention(params, f"{pre}.self_attn", h, h, self_bias, config.heads), p, rng)
        if enc_states is not None:
            h = _norm(params, f"{pre}.norm2", x)
            x = x + ad.dropout(attention(params, f"{pre}.cross_attn", h, enc_states, cross_bias, config.heads), p, rng)
        x = x + ad.dropout(feed_forward(params, f"{pre}.ff", _norm(params, f"{pre}.norm3", x)), p, rng)
    return _output_logits(params, config, x, "tgt_embed", "tgt_out_bias")


def src_lm_logits(params, config: ModelConfig, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
    """Causal encoder followed by the tied ``src_embed`` output head."""
    params = _ensure_tensors(params)
    h = encode(params, config, ids, mask, MaskMode.CAUSAL, rng)
    return _output_logits(params, config, h, "src_embed", None)


def lm_logits(params, config: ModelConfig, side: str, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
    if side == "src":
        return src_lm_logits(params, config, ids, mask, rng)
    return decode_step_logits(params, config, ids, mask, None, None, rng)
