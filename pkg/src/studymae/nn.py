"""Transformer building blocks on the autodiff substrate.

Layers follow the standard pre-norm ViT recipe: residual attention and MLP
sublayers, GELU activations, expansion factor 4. Weights initialize to
truncated-normal(0, 0.02), biases and norm offsets to zero, norm gains to
one. Parameter collection is explicit: every layer exposes
``parameters(prefix)`` returning a flat name -> Parameter dict.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ValidationError

MLP_EXPANSION = 4


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def merge_params(*groups: dict) -> dict:
    merged: dict[str, Parameter] = {}
    for group in groups:
        for name, param in group.items():
            if name in merged:
                raise ValidationError(f"duplicate parameter name {name!r}")
            param.name = name
            merged[name] = param
    return merged


def sincos_1d(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position table, shape (length, dim)."""
    if dim % 2 != 0:
        raise ValidationError(f"sinusoidal embedding needs an even dim, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    omega = 1.0 / 10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2))
    angles = pos * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_2d(grid_side: int, dim: int) -> np.ndarray:
    """2-D sinusoidal table over a square token grid, shape (grid², dim)."""
    if dim % 4 != 0:
        raise ValidationError(f"2-D sinusoidal embedding needs dim % 4 == 0, got {dim}")
    coords = np.arange(grid_side, dtype=np.float64)
    rows = np.repeat(coords, grid_side)
    cols = np.tile(coords, grid_side)
    half = dim // 2
    omega = 1.0 / 10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2))
    row_ang = rows[:, None] * omega[None, :]
    col_ang = cols[:, None] * omega[None, :]
    return np.concatenate(
        [np.sin(row_ang), np.cos(row_ang), np.sin(col_ang), np.cos(col_ang)], axis=1)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.w = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.b = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y

    def parameters(self, prefix: str) -> dict:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class LayerNorm:
    """Layer normalization over the last axis with learnable affine."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, eps=self.eps) * self.gain + self.bias

    def parameters(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, dim = x.shape
    return x.reshape(n, heads, dim // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    heads, n, hd = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * hd)


def causal_bias(length: int) -> np.ndarray:
    """Additive attention bias masking strictly-upper (future) positions."""
    bias = np.zeros((length, length))
    bias[np.triu_indices(length, k=1)] = ad.NEG_INF
    return bias


class SelfAttention:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        n, dim = x.shape
        qkv = self.qkv(x).reshape(n, 3, dim).transpose(1, 0, 2)
        q = _split_heads(qkv[0], self.heads)
        k = _split_heads(qkv[1], self.heads)
        v = _split_heads(qkv[2], self.heads)
        scores = (q @ k.transpose(0, 2, 1)) * self.scale
        if bias is not None:
            scores = scores + bias[None, :, :]
        attn = ad.softmax(scores, axis=-1)
        return self.proj(_merge_heads(attn @ v))

    def parameters(self, prefix: str) -> dict:
        return merge_params(self.qkv.parameters(f"{prefix}.qkv"),
                            self.proj.parameters(f"{prefix}.proj"))


class CrossAttention:
    """Queries from the running sequence, keys/values from a memory."""

    def __init__(self, dim: int, memory_dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(memory_dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        m, _ = memory.shape
        kv = self.kv(memory).reshape(m, 2, x.shape[1]).transpose(1, 0, 2)
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(kv[0], self.heads)
        v = _split_heads(kv[1], self.heads)
        scores = (q @ k.transpose(0, 2, 1)) * self.scale
        attn = ad.softmax(scores, axis=-1)
        return self.proj(_merge_heads(attn @ v))

    def parameters(self, prefix: str) -> dict:
        return merge_params(self.q.parameters(f"{prefix}.q"),
                            self.kv.parameters(f"{prefix}.kv"),
                            self.proj.parameters(f"{prefix}.proj"))


class Mlp:
    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, MLP_EXPANSION * dim, rng)
        self.fc2 = Linear(MLP_EXPANSION * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    def parameters(self, prefix: str) -> dict:
        return merge_params(self.fc1.parameters(f"{prefix}.fc1"),
                            self.fc2.parameters(f"{prefix}.fc2"))


class EncoderBlock:
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))

    def parameters(self, prefix: str) -> dict:
        return merge_params(self.norm1.parameters(f"{prefix}.norm1"),
                            self.attn.parameters(f"{prefix}.attn"),
                            self.norm2.parameters(f"{prefix}.norm2"),
                            self.mlp.parameters(f"{prefix}.mlp"))


class DecoderBlock:
    """Causal self-attention, cross-attention over a memory, then MLP."""

    def __init__(self, dim: int, memory_dim: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross = CrossAttention(dim, memory_dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, bias: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm1(x), bias=bias)
        x = x + self.cross(self.norm2(x), memory)
        return x + self.mlp(self.norm3(x))

    def parameters(self, prefix: str) -> dict:
        return merge_params(self.norm1.parameters(f"{prefix}.norm1"),
                            self.attn.parameters(f"{prefix}.attn"),
                            self.norm2.parameters(f"{prefix}.norm2"),
                            self.cross.parameters(f"{prefix}.cross"),
                            self.norm3.parameters(f"{prefix}.norm3"),
                            self.mlp.parameters(f"{prefix}.mlp"))
