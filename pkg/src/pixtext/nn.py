"""Neural building blocks: linear, layer norm, multi-head attention,
transformer encoder/decoder layers.

All blocks expose `parameters()` yielding (name, Tensor) pairs so the
optimizer and checkpointing can traverse them uniformly. Initialization
is symmetric uniform scaled by 1/sqrt(fan_in); biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    gelu,
    linear,
    record,
)

__all__ = [
    "Linear",
    "LayerNorm",
    "layer_norm",
    "attention_heads",
    "MultiHeadAttention",
    "mhsa_forward",
    "TransformerBlock",
    "TransformerDecoderLayer",
    "decoder_forward",
    "init_uniform",
]


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x W^T + b with weight stored (out, in)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(init_uniform(rng, (out_dim, in_dim), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"linear expects {self.in_dim} columns, got {x.shape}")
        return linear(x, self.weight, self.bias)

    def parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by the affine (scale, shift).

    Fused op: the whole Jacobian is hand-derived so a single tape node
    covers mean/variance/affine. Variance-zero rows are handled by eps.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"layer_norm expects 2-d input, got {x.shape}")
    c = xd.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError("layer_norm affine params must match the channel dim")
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    out = xh * scale.data[None, :] + shift.data[None, :]

    def grad_fn(g):
        gxh = g * scale.data[None, :]
        gscale = (g * xh).sum(axis=0)
        gshift = g.sum(axis=0)
        m1 = gxh.mean(axis=1, keepdims=True)
        m2 = (gxh * xh).mean(axis=1, keepdims=True)
        gx = (gxh - m1 - xh * m2) * inv
        return [gx, gscale, gshift]

    return record([x, scale, shift], out, grad_fn)


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.scale = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift, self.eps)

    def parameters(self):
        yield "scale", self.scale
        yield "shift", self.shift


def attention_heads(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Fused per-head scaled dot-product attention over projected q/k/v.

    Column blocks of width dim/heads are independent heads: each computes
    softmax(q_h k_h^T / sqrt(head_dim)) v_h; outputs re-occupy the same
    columns. One tape node; the backward rule walks the heads again using
    the attention weights saved from the forward pass.
    """
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(f"attention shapes: q {q.shape}, k {k.shape}, v {v.shape}")
    dim = q.shape[1]
    if dim % heads != 0:
        raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
    hd = dim // heads
    scale = 1.0 / math.sqrt(hd)
    qd, kd, vd = q.data, k.data, v.data
    out = np.empty((q.shape[0], dim))
    attn_saved = []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        s = (qd[:, lo:hi] @ kd[:, lo:hi].T) * scale
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=1, keepdims=True)
        attn_saved.append(a)
        out[:, lo:hi] = a @ vd[:, lo:hi]

    def grad_fn(g):
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.empty_like(vd)
        for h in range(heads):
            lo, hi = h * hd, (h + 1) * hd
            a = attn_saved[h]
            gh = g[:, lo:hi]
            gv[:, lo:hi] = a.T @ gh
            ga = gh @ vd[:, lo:hi].T
            gs = (ga - (ga * a).sum(axis=1, keepdims=True)) * a * scale
            gq[:, lo:hi] = gs @ kd[:, lo:hi]
            gk[:, lo:hi] = gs.T @ qd[:, lo:hi]
        return [gq, gk, gv]

    return record([q, k, v], out, grad_fn)


class MultiHeadAttention:
    """Scaled dot-product attention, self- or cross-, no masking or dropout."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, queries: Tensor, memory: Tensor | None = None) -> Tensor:
        kv = queries if memory is None else memory
        if queries.shape[1] != self.dim or kv.shape[1] != self.dim:
            raise ShapeError(
                f"attention dim mismatch: {queries.shape} / {kv.shape} vs {self.dim}"
            )
        q = self.q_proj(queries)
        k = self.k_proj(kv)
        v = self.v_proj(kv)
        return self.out_proj(attention_heads(q, k, v, self.heads))

    def parameters(self):
        for tag, layer in (
            ("q_proj", self.q_proj),
            ("k_proj", self.k_proj),
            ("v_proj", self.v_proj),
            ("out_proj", self.out_proj),
        ):
            for name, p in layer.parameters():
                yield f"{tag}.{name}", p


def mhsa_forward(layer: MultiHeadAttention, seq: Tensor) -> Tensor:
    return layer(seq)


class FeedForward:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def parameters(self):
        for name, p in self.fc1.parameters():
            yield f"fc1.{name}", p
        for name, p in self.fc2.parameters():
            yield f"fc2.{name}", p


class TransformerBlock:
    """Pre-norm encoder block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ffn = FeedForward(dim, ffn_hidden, rng)
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = add(x, self.attn(self.ln1(x)))
        return add(x, self.ffn(self.ln2(x)))

    def parameters(self):
        for tag, mod in (("attn", self.attn), ("ffn", self.ffn), ("ln1", self.ln1), ("ln2", self.ln2)):
            for name, p in mod.parameters():
                yield f"{tag}.{name}", p


class TransformerDecoderLayer:
    """Pre-norm decoder layer: self-attention, cross-attention over memory,
    feed-forward; residuals around each. Memory enters un-normalized."""

    def __init__(self, dim: int, heads: int, ffn_hidden: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ffn = FeedForward(dim, ffn_hidden, rng)
        self.ln1 = LayerNorm(dim)
        self.ln2 = LayerNorm(dim)
        self.ln3 = LayerNorm(dim)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        if queries.shape[1] != memory.shape[1]:
            raise ShapeError(f"decoder dims differ: {queries.shape} vs {memory.shape}")
        q = add(queries, self.self_attn(self.ln1(queries)))
        q = add(q, self.cross_attn(self.ln2(q), memory))
        return add(q, self.ffn(self.ln3(q)))

    def parameters(self):
        mods = (
            ("self_attn", self.self_attn),
            ("cross_attn", self.cross_attn),
            ("ffn", self.ffn),
            ("ln1", self.ln1),
            ("ln2", self.ln2),
            ("ln3", self.ln3),
        )
        for tag, mod in mods:
            for name, p in mod.parameters():
                yield f"{tag}.{name}", p


def decoder_forward(layers, queries: Tensor, memory: Tensor) -> Tensor:
    if not layers:
        raise ShapeError("decoder needs at least one layer")
    out = queries
    for layer in layers:
        out = layer(out, memory)
    return out
