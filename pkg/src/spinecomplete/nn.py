"""Layers of the completion network, built on :mod:`spinecomplete.autodiff`.

Point tensors are batched ``(B, N, C)``.  Neighbourhood graphs are computed
from coordinate *values* each forward pass and treated as constants by the
backward pass.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatchError, InvalidInputError
from .spatial import knn_graph


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64):
        self.weight = Tensor(glorot(rng, d_in, d_out, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Linear layers with GELU in between (none after the last)."""

    def __init__(self, dims, rng, dtype=np.float64):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


def batched_knn(coords: np.ndarray, k: int) -> np.ndarray:
    """(B, N, k) neighbour indices (self excluded) for each cloud in a batch."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[1]
    if k >= n:
        raise InvalidInputError(f"k={k} must be smaller than the {n} points")
    return ad.branch_choice(lambda: np.stack([knn_graph(c, k) for c in coords]))


def edge_features(feats: Tensor, index: np.ndarray) -> Tensor:
    """(B, N, k, 2D) edge features ``[f_i, f_j - f_i]`` over a neighbour index."""
    b, n, d = feats.shape
    k = index.shape[-1]
    fj = ad.gather(feats, index)
    fi = ad.broadcast_to(feats.reshape(b, n, 1, d), (b, n, k, d))
    return ad.concat([fi, fj - fi], axis=-1)


class EdgeConv(Module):
    """Max over neighbours of ``MLP([f_i, f_j - f_i])``; neighbours from coordinates."""

    def __init__(self, d_in: int, d_out: int, k: int, rng, dtype=np.float64):
        self.k = k
        self.mlp = MLP([2 * d_in, d_out, d_out], rng, dtype)

    def __call__(self, coords: np.ndarray, feats: Tensor, index: np.ndarray | None = None) -> Tensor:
        if coords.shape[:2] != feats.shape[:2]:
            raise DimensionMismatchError("coordinates and features disagree on (B, N)")
        if index is None:
            index = batched_knn(coords, self.k)
        return self.mlp(edge_features(feats, index)).max(axis=2)


class MultiHeadAttention(Module):
    def __init__(self, d: int, num_heads: int, rng, dtype=np.float64):
        if d % num_heads:
            raise InvalidInputError(f"hidden size {d} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d, d, rng, dtype)
        self.v = Linear(d, d, rng, dtype)
        self.out = Linear(d, d, rng, dtype)
        self.last_weights = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.num_heads, d // self.num_heads).transpose(0, 2, 1, 3)

    def __call__(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        if queries.ndim != 3 or keys_values.ndim != 3 or queries.shape[-1] != keys_values.shape[-1]:
            raise DimensionMismatchError(f"attention shapes {queries.shape} and {keys_values.shape}")
        if queries.shape[0] != keys_values.shape[0]:
            raise DimensionMismatchError("queries and keys disagree on batch size")
        b, m, d = queries.shape
        q = self._split(self.q(queries))
        k = self._split(self.k(keys_values))
        v = self._split(self.v(keys_values))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // self.num_heads))
        weights = ad.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, m, d)
        return self.out(out)


class GeometryAwareBlock(Module):
    """Pre-norm block: global self-attention beside a kNN edge branch, then an FFN.

    The two branches are concatenated and merged by a linear layer; both the
    merge and the FFN are residual.
    """

    def __init__(self, d: int, num_heads: int, k: int, rng, dtype=np.float64, mlp_ratio: int = 2):
        self.k = k
        self.norm1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, num_heads, rng, dtype)
        self.local = Linear(2 * d, d, rng, dtype)
        self.merge = Linear(2 * d, d, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = MLP([d, mlp_ratio * d, d], rng, dtype)

    def __call__(self, tokens: Tensor, coords: np.ndarray, index: np.ndarray | None = None) -> Tensor:
        if index is None:
            index = batched_knn(coords, self.k)
        h = self.norm1(tokens)
        glob = self.attn(h, h)
        loc = ad.gelu(self.local(edge_features(h, index))).max(axis=2)
        tokens = tokens + self.merge(ad.concat([glob, loc], axis=-1))
        return tokens + self.ffn(self.norm2(tokens))


class DecoderBlock(Module):
    """Geometry-aware self block over the queries followed by cross-attention to memory."""

    def __init__(self, d: int, num_heads: int, k: int, rng, dtype=np.float64, mlp_ratio: int = 2):
        self.self_block = GeometryAwareBlock(d, num_heads, k, rng, dtype, mlp_ratio)
        self.norm_q = LayerNorm(d, dtype)
        self.norm_m = LayerNorm(d, dtype)
        self.cross = MultiHeadAttention(d, num_heads, rng, dtype)
        self.norm_f = LayerNorm(d, dtype)
        self.ffn = MLP([d, mlp_ratio * d, d], rng, dtype)

    def __call__(self, queries: Tensor, coords: np.ndarray, memory: Tensor, index=None) -> Tensor:
        queries = self.self_block(queries, coords, index)
        queries = queries + self.cross(self.norm_q(queries), self.norm_m(memory))
        return queries + self.ffn(self.norm_f(queries))
