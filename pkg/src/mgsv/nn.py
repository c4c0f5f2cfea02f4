"""Transformer building blocks on top of the autodiff core.

Blocks are post-norm residual (original transformer default), with a
4x-width ReLU feed-forward. Attention supports an optional boolean key
mask so padded rows can be excluded from normalization; there is no other
masking. All blocks are shape-preserving and side-effect free in eval mode.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


def parameter(array: np.ndarray, dtype=None) -> Tensor:
    return Tensor(array, requires_grad=True, dtype=dtype or ad.DEFAULT_DTYPE)


class Linear:
    """Affine map x . W + b with W of shape (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int, dtype=None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        dtype = dtype or ad.DEFAULT_DTYPE
        self.weight = parameter(np.zeros((in_dim, out_dim)), dtype)
        self.bias = parameter(np.zeros(out_dim), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def linear(x: Tensor, layer: Linear) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"linear expects width {layer.in_dim}, got {x.shape[-1]}")
    return ad.add(ad.matmul(x, layer.weight), layer.bias)


class LayerNorm:
    def __init__(self, d: int, dtype=None):
        dtype = dtype or ad.DEFAULT_DTYPE
        self.gain = parameter(np.ones(d), dtype)
        self.bias = parameter(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self):
        return [("gain", self.gain), ("bias", self.bias)]


class MultiHeadAttention:
    """Scaled dot-product attention with `heads` parallel heads.

    Accepts (n, d) or batched (..., n, d) inputs; `key_mask` is a boolean
    array over key rows, broadcastable after head expansion.
    """

    def __init__(self, d: int, heads: int, dtype=None):
        if d % heads != 0:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.wq = Linear(d, d, dtype)
        self.wk = Linear(d, d, dtype)
        self.wv = Linear(d, d, dtype)
        self.wo = Linear(d, d, dtype)

    def __call__(self, q, k, v, key_mask=None, return_weights=False):
        return mha(q, k, v, self, key_mask=key_mask, return_weights=return_weights)

    def named_parameters(self):
        out = []
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out += [(f"{tag}.{n}", p) for n, p in lin.named_parameters()]
        return out


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, head_dim)
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, heads, head_dim))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.transpose(x, tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    # (..., heads, n, head_dim) -> (..., n, heads*head_dim)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ad.transpose(x, tuple(axes))
    *lead, n, heads, head_dim = x.shape
    return ad.reshape(x, (*lead, n, heads * head_dim))


def mha(q: Tensor, k: Tensor, v: Tensor, block: MultiHeadAttention,
        key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head attention; scale is 1/sqrt(d/heads) per head."""
    if k.shape[-2] < 1:
        raise ShapeError("attention requires at least one key")
    if q.shape[-1] != block.d or k.shape[-1] != block.d or v.shape[-1] != block.d:
        raise ShapeError(f"attention width mismatch with d={block.d}")
    qh = _split_heads(block.wq(q), block.heads, block.head_dim)
    kh = _split_heads(block.wk(k), block.heads, block.head_dim)
    vh = _split_heads(block.wv(v), block.heads, block.head_dim)

    axes = list(range(kh.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, tuple(axes))),
                    1.0 / math.sqrt(block.head_dim))
    mask = None
    if key_mask is not None:
        mask = np.expand_dims(np.expand_dims(key_mask, -2), -2)  # (..., 1, 1, nk)
    weights = ad.softmax(logits, axis=-1, mask=mask)
    out = block.wo(_merge_heads(ad.matmul(weights, vh)))
    if return_weights:
        return out, weights
    return out


class FeedForward:
    """Position-wise FFN: d -> 4d -> d with ReLU."""

    def __init__(self, d: int, dtype=None):
        self.fc1 = Linear(d, 4 * d, dtype)
        self.fc2 = Linear(4 * d, d, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def named_parameters(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.named_parameters()] + \
               [(f"fc2.{n}", p) for n, p in self.fc2.named_parameters()]


class EncoderBlock:
    """Self-attention block: x <- LN(x + Drop(MHA(x,x,x))); x <- LN(x + Drop(FFN(x)))."""

    def __init__(self, d: int, heads: int, dropout: float = 0.1, dtype=None):
        self.attn = MultiHeadAttention(d, heads, dtype)
        self.ffn = FeedForward(d, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, key_mask=None, train: bool = False, rng=None) -> Tensor:
        att = self.attn(x, x, x, key_mask=key_mask)
        x = self.ln1(ad.add(x, ad.dropout(att, self.dropout, rng, train)))
        x = self.ln2(ad.add(x, ad.dropout(self.ffn(x), self.dropout, rng, train)))
        return x

    def named_parameters(self):
        out = [(f"attn.{n}", p) for n, p in self.attn.named_parameters()]
        out += [(f"ffn.{n}", p) for n, p in self.ffn.named_parameters()]
        out += [(f"ln1.{n}", p) for n, p in self.ln1.named_parameters()]
        out += [(f"ln2.{n}", p) for n, p in self.ln2.named_parameters()]
        return out


class DecoderBlock:
    """Cross-attention block without a self-attention sublayer.

    The query row count is preserved; memory rows act as keys/values only.
    """

    def __init__(self, d: int, heads: int, dropout: float = 0.1, dtype=None):
        self.attn = MultiHeadAttention(d, heads, dtype)
        self.ffn = FeedForward(d, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.dropout = dropout

    def __call__(self, query: Tensor, memory: Tensor, key_mask=None,
                 train: bool = False, rng=None) -> Tensor:
        if memory.shape[-2] < 1:
            raise ShapeError("decoder memory is empty")
        att = self.attn(query, memory, memory, key_mask=key_mask)
        x = self.ln1(ad.add(query, ad.dropout(att, self.dropout, rng, train)))
        x = self.ln2(ad.add(x, ad.dropout(self.ffn(x), self.dropout, rng, train)))
        return x

    def named_parameters(self):
        out = [(f"attn.{n}", p) for n, p in self.attn.named_parameters()]
        out += [(f"ffn.{n}", p) for n, p in self.ffn.named_parameters()]
        out += [(f"ln1.{n}", p) for n, p in self.ln1.named_parameters()]
        out += [(f"ln2.{n}", p) for n, p in self.ln2.named_parameters()]
        return out


def sinusoidal_pe(n: int, d: int, dtype=None) -> Tensor:
    """Fixed sin/cos position table: PE[p,2i]=sin(p/10000^(2i/d)), PE[p,2i+1]=cos(...)."""
    if d % 2 != 0:
        raise ShapeError(f"positional encoding width must be even, got {d}")
    dtype = dtype or ad.DEFAULT_DTYPE
    positions = np.arange(n, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    angles = positions * freqs
    pe = np.empty((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return Tensor(pe.astype(dtype))


class DetectionHead:
    """FC(d,d) -> ReLU -> FC(d,d) -> ReLU -> FC(d,out) -> sigmoid."""

    def __init__(self, d: int, out_dim: int = 2, dtype=None):
        self.fc1 = Linear(d, d, dtype)
        self.fc2 = Linear(d, d, dtype)
        self.fc3 = Linear(d, out_dim, dtype)

    def __call__(self, phi: Tensor) -> Tensor:
        return mlp_head(phi, self)

    def named_parameters(self):
        out = []
        for tag, lin in (("fc1", self.fc1), ("fc2", self.fc2), ("fc3", self.fc3)):
            out += [(f"{tag}.{n}", p) for n, p in lin.named_parameters()]
        return out


def mlp_head(phi: Tensor, head: DetectionHead) -> Tensor:
    """Detection MLP; outputs lie strictly in (0, 1) via the final sigmoid."""
    x = ad.relu(head.fc1(phi))
    x = ad.relu(head.fc2(x))
    return ad.sigmoid(head.fc3(x))


# -- initialization --------------------------------------------------------

KAIMING = "kaiming"
XAVIER = "xavier"


def init_parameters(named_params, scheme_for, seed: int) -> None:
    """Fill weight matrices in place, deterministically for a given seed.

    `scheme_for(name)` chooses 'kaiming' (He normal, var 2/fan_in) or
    'xavier' (uniform with bound sqrt(6/(fan_in+fan_out))) per parameter.
    Vectors and scalars (biases, norm gains, scales) are left at their
    constructed values, so biases stay zero.
    """
    rng = np.random.default_rng([int(seed), 0x1417])
    for name, p in named_params:
        if p.ndim < 2:
            continue
        fan_in, fan_out = p.shape[-2], p.shape[-1]
        scheme = scheme_for(name)
        if scheme == KAIMING:
            std = math.sqrt(2.0 / fan_in)
            values = rng.normal(0.0, std, size=p.shape)
        elif scheme == XAVIER:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values = rng.uniform(-bound, bound, size=p.shape)
        else:
            raise ConfigError(f"unknown init scheme '{scheme}' for {name}")
        p.data[...] = values.astype(p.data.dtype)
