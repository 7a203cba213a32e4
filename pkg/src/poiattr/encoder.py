"""Post-norm transformer encoder over stay tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Linear, Module, Tensor, dropout, layer_norm, parameter, softmax

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"
_NEG = -1e9


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 96
    d_ff: int = 256
    attention: str = BIDIRECTIONAL
    dropout: float = 0.1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.attention not in (BIDIRECTIONAL, CAUSAL):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self):
        return asdict(self)


def attention_bias(key_mask, mode):
    """Additive mask ``(B, 1, n, n)``: padding keys, and future keys when causal."""
    key_mask = np.asarray(key_mask, dtype=bool)
    B, n = key_mask.shape
    allowed = np.broadcast_to(key_mask[:, None, :], (B, n, n)).copy()
    if mode == CAUSAL:
        allowed &= np.tril(np.ones((n, n), dtype=bool))[None]
    return np.where(allowed, 0.0, _NEG)[:, None, :, :]


class MultiHeadAttention(Module):
    def __init__(self, d_model, heads, rng):
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights = None

    def _split(self, x, B, n):
        return x.reshape(B, n, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, bias) -> Tensor:
        B, n, d = x.shape
        q = self._split(self.q(x), B, n)
        k = self._split(self.k(x), B, n)
        v = self._split(self.v(x), B, n)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head)) + bias
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        return self.out(ctx)


class EncoderBlock(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        d = cfg.d_model
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.ff1 = Linear(d, cfg.d_ff, rng)
        self.ff2 = Linear(cfg.d_ff, d, rng)
        self.ln1_g = parameter(np.ones(d))
        self.ln1_b = parameter(np.zeros(d))
        self.ln2_g = parameter(np.ones(d))
        self.ln2_b = parameter(np.zeros(d))
        self.rate = cfg.dropout
        self.last_normed = ()

    def __call__(self, x, bias, rng=None):
        a = dropout(self.attn(x, bias), self.rate, rng)
        h = layer_norm(x + a, self.ln1_g, self.ln1_b)
        f = dropout(self.ff2(self.ff1(h).gelu()), self.rate, rng)
        out = layer_norm(h + f, self.ln2_g, self.ln2_b)
        self.last_normed = (h.data, out.data)
        return out


class TransformerEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, tokens, key_mask=None, rng=None) -> Tensor:
        """Hidden states ``(B, n, d)``. Dropout is active only when ``rng``
        is given."""
        tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.d_model:
            raise ValueError(f"expected tokens (B, n, {self.cfg.d_model}), got {tokens.shape}")
        B, n, _ = tokens.shape
        if n < 1:
            raise ValueError("need at least one token")
        if key_mask is None:
            key_mask = np.ones((B, n), dtype=bool)
        bias = attention_bias(key_mask, self.cfg.attention)
        x = tokens
        for block in self.blocks:
            x = block(x, bias, rng)
        return x


def encoder_forward(cfg: EncoderConfig, params: TransformerEncoder, tokens) -> np.ndarray:
    """Deterministic forward pass of a single ``(n, d)`` sequence."""
    if params.cfg != cfg:
        raise ValueError("encoder parameters were built for a different config")
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValueError(f"expected tokens of shape (n, d), got {tokens.shape}")
    return params(tokens[None]).data[0]


def extract_context(H, i):
    """Row ``i`` of the hidden states; with a batch of targets ``i`` may be an
    index array, one per sequence."""
    if isinstance(H, Tensor):
        if np.ndim(i) == 0:
            _check_index(H.shape[-2], i)
            return H[..., int(i), :]
        i = np.asarray(i)
        return H[np.arange(H.shape[0]), i]
    H = np.asarray(H)
    _check_index(H.shape[-2], i)
    return H[..., int(i), :]


def _check_index(n, i):
    if not 0 <= int(i) < n:
        raise IndexError(f"context index {i} out of range for {n} stays")
