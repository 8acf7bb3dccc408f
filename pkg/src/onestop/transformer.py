"""Post-norm encoder/decoder transformer built on :mod:`onestop.numcore`.

The basic block is the self-attentive unit: scaled dot-product attention,
residual add, layer norm, a ReLU feed-forward layer, residual add, layer
norm. Decoder layers insert a cross-attention sublayer over the encoder
states between the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .numcore import Tensor, concat, dropout, embedding, get_default_dtype, layer_norm, softmax


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 768
    heads: int = 12
    d_ff: int = 3072
    encoder_layers: int = 6
    decoder_layers: int = 6
    max_document_len: int = 512
    max_question_len: int = 64
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "ModelConfig":
        """The small profile used by the test suite (2+2 layers, width 64)."""
        base = dict(
            d_model=64, heads=4, d_ff=256, encoder_layers=2, decoder_layers=2,
            max_document_len=160, max_question_len=32,
        )
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Runtime:
    """State shared by every layer of one model: dropout rate, RNG, train/eval flag."""

    rate: float
    rng: np.random.Generator
    training: bool = False


class Module:
    """Minimal parameter container; parameters are Tensor attributes, children are Modules.

    Attributes starting with an underscore are references owned elsewhere and
    are not registered.
    """

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Initializer:
    def __init__(self, rng: np.random.Generator, std: float):
        self.rng = rng
        self.std = std

    def normal(self, shape) -> Tensor:
        dtype = get_default_dtype()
        return Tensor(self.rng.normal(0.0, self.std, size=shape).astype(dtype), requires_grad=True, dtype=dtype)

    def zeros(self, shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)

    def ones(self, shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=True)


class LayerNorm(Module):
    def __init__(self, d_model: int, init: Initializer, eps: float = 1e-5):
        self.gain = init.ones((d_model,))
        self.bias = init.zeros((d_model,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, init: Initializer):
        self.w1 = init.normal((d_model, d_ff))
        self.b1 = init.zeros((d_ff,))
        self.w2 = init.normal((d_ff, d_model))
        self.b2 = init.zeros((d_model,))

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.w1 + self.b1).relu() @ self.w2 + self.b2


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, init: Initializer, rt: Runtime):
        self.heads = heads
        self.head_dim = d_model // heads
        self.w_q = init.normal((d_model, d_model))
        self.w_k = init.normal((d_model, d_model))
        self.w_v = init.normal((d_model, d_model))
        self.w_o = init.normal((d_model, d_model))
        self.rt = rt

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def keys_values(self, src: Tensor) -> tuple[Tensor, Tensor]:
        """Project ``src [B, S, m]`` to per-head keys and values ``[B, H, S, dh]``."""
        return self._split(src @ self.w_k), self._split(src @ self.w_v)

    def __call__(self, x: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        B, T, m = x.shape
        q = self._split(x @ self.w_q)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        weights = dropout(softmax(scores, mask), self.rt.rate, self.rt.rng, self.rt.training)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, m)
        return out @ self.w_o


class SelfAttentiveUnit(Module):
    """Attention sublayer + feed-forward sublayer, each with residual and post layer norm.

    Used directly as the encoder layer. ``kv`` defaults to ``x`` (self-attention).
    """

    def __init__(self, cfg: ModelConfig, init: Initializer, rt: Runtime):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, init, rt)
        self.norm1 = LayerNorm(cfg.d_model, init)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, init)
        self.norm2 = LayerNorm(cfg.d_model, init)
        self.rt = rt

    def __call__(self, x: Tensor, mask=None, kv: Tensor | None = None) -> Tensor:
        rt = self.rt
        k, v = self.attn.keys_values(x if kv is None else kv)
        a = self.attn(x, k, v, mask)
        x1 = self.norm1(x + dropout(a, rt.rate, rt.rng, rt.training))
        x2 = self.ffn(x1)
        return self.norm2(x1 + dropout(x2, rt.rate, rt.rng, rt.training))


def self_attentive_unit(x: Tensor, kv: Tensor, attn_mask, unit: SelfAttentiveUnit) -> Tensor:
    """Apply ``unit`` to queries ``x [t, m]`` over keys/values ``kv [s, m]``.

    Accepts unbatched 2-D inputs (a batch axis is added and removed) or
    batched 3-D inputs. ``attn_mask`` is boolean ``[t, s]`` (or broadcastable
    to ``[B, H, t, s]``), True where attention is allowed.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
        kv = kv.reshape(1, *kv.shape)
    out = unit(x, attn_mask, kv=kv)
    return out.reshape(out.shape[1:]) if squeeze else out


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, init: Initializer, rt: Runtime):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, init, rt)
        self.norm1 = LayerNorm(cfg.d_model, init)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, init, rt)
        self.norm2 = LayerNorm(cfg.d_model, init)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, init)
        self.norm3 = LayerNorm(cfg.d_model, init)
        self.rt = rt

    def __call__(self, x, self_k, self_v, self_mask, cross_k, cross_v, cross_mask) -> Tensor:
        rt = self.rt
        a = self.self_attn(x, self_k, self_v, self_mask)
        x1 = self.norm1(x + dropout(a, rt.rate, rt.rng, rt.training))
        c = self.cross_attn(x1, cross_k, cross_v, cross_mask)
        x2 = self.norm2(x1 + dropout(c, rt.rate, rt.rng, rt.training))
        f = self.ffn(x2)
        return self.norm3(x2 + dropout(f, rt.rate, rt.rng, rt.training))


@dataclass
class EncoderOutput:
    states: Tensor          # [B, L, m]
    pad_mask: np.ndarray    # [B, L], True on real tokens

    @property
    def attn_mask(self) -> np.ndarray:
        return self.pad_mask[:, None, None, :]

    def select(self, rows) -> "EncoderOutput":
        return EncoderOutput(self.states[np.asarray(rows)], self.pad_mask[np.asarray(rows)])


@dataclass
class DecoderState:
    tokens: np.ndarray                              # [B, t] ids generated so far, starting with <bos>
    self_cache: list = field(default_factory=list)  # per layer (k, v) [B, H, t-1, dh]
    cross_cache: list = field(default_factory=list)  # per layer (k, v) over the encoder states

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    def select(self, rows) -> "DecoderState":
        """Reorder/duplicate batch rows (beam search bookkeeping)."""
        rows = np.asarray(rows)
        return DecoderState(
            self.tokens[rows],
            [(k[rows], v[rows]) for k, v in self.self_cache],
            [(k[rows], v[rows]) for k, v in self.cross_cache],
        )

    def append(self, next_tokens) -> "DecoderState":
        next_tokens = np.asarray(next_tokens).reshape(-1, 1)
        return DecoderState(np.concatenate([self.tokens, next_tokens], axis=1), self.self_cache, self.cross_cache)


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, embed: Tensor, init: Initializer, rt: Runtime):
        self.cfg = cfg
        self._embed = embed  # shared, registered by the owning model
        self.pos = init.normal((cfg.max_document_len, cfg.d_model))
        self.layers = [SelfAttentiveUnit(cfg, init, rt) for _ in range(cfg.encoder_layers)]
        self.rt = rt

    def __call__(self, doc_ids: np.ndarray, pad_mask: np.ndarray | None = None) -> EncoderOutput:
        doc_ids = np.atleast_2d(np.asarray(doc_ids))
        B, L = doc_ids.shape
        if L == 0:
            raise ValueError("cannot encode an empty document")
        if L > self.cfg.max_document_len:
            raise ValueError(f"document length {L} exceeds max_document_len={self.cfg.max_document_len}")
        if pad_mask is None:
            pad_mask = np.ones((B, L), dtype=bool)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if not pad_mask.any(axis=1).all():
            raise ValueError("document has no non-pad token")
        x = embedding(self._embed, doc_ids) + self.pos[:L]
        x = dropout(x, self.rt.rate, self.rt.rng, self.rt.training)
        mask = pad_mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, mask)
        return EncoderOutput(x, pad_mask)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, embed: Tensor, init: Initializer, rt: Runtime):
        self.cfg = cfg
        self._embed = embed
        self.pos = init.normal((cfg.max_question_len, cfg.d_model))
        self.layers = [DecoderLayer(cfg, init, rt) for _ in range(cfg.decoder_layers)]
        self.rt = rt

    def _check_len(self, t: int) -> None:
        if t > self.cfg.max_question_len:
            raise ValueError(f"decoder prefix length {t} exceeds max_question_len={self.cfg.max_question_len}")

    def __call__(self, dec_ids: np.ndarray, enc: EncoderOutput) -> Tensor:
        """Teacher-forced pass over ``dec_ids [B, T]``; returns final-layer states ``[B, T, m]``."""
        dec_ids = np.atleast_2d(np.asarray(dec_ids))
        T = dec_ids.shape[1]
        self._check_len(T)
        x = embedding(self._embed, dec_ids) + self.pos[:T]
        x = dropout(x, self.rt.rate, self.rt.rng, self.rt.training)
        mask = causal_mask(T)
        for layer in self.layers:
            k, v = layer.self_attn.keys_values(x)
            ck, cv = layer.cross_attn.keys_values(enc.states)
            x = layer(x, k, v, mask, ck, cv, enc.attn_mask)
        return x

    def start(self, enc: EncoderOutput, bos_id: int) -> DecoderState:
        B = enc.states.shape[0]
        cross = [layer.cross_attn.keys_values(enc.states) for layer in self.layers]
        return DecoderState(np.full((B, 1), bos_id, dtype=np.int64), [], cross)

    def step(self, state: DecoderState, enc: EncoderOutput) -> tuple[Tensor, DecoderState]:
        """Run the newest token of ``state`` through every layer reusing cached keys/values.

        Returns the final-layer state of that position ``[B, m]`` and the state
        with the extended cache.
        """
        t = state.length
        self._check_len(t)
        x = embedding(self._embed, state.tokens[:, -1:]) + self.pos[t - 1:t]
        new_cache = []
        for i, layer in enumerate(self.layers):
            k_new, v_new = layer.self_attn.keys_values(x)
            if state.self_cache:
                k_old, v_old = state.self_cache[i]
                k = concat([k_old, k_new], axis=2)
                v = concat([v_old, v_new], axis=2)
            else:
                k, v = k_new, v_new
            new_cache.append((k, v))
            ck, cv = state.cross_cache[i]
            x = layer(x, k, v, None, ck, cv, enc.attn_mask)
        B, _, m = x.shape
        return x.reshape(B, m), DecoderState(state.tokens, new_cache, state.cross_cache)
