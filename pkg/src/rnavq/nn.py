"""Layers built on :mod:`rnavq.tensor`."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters(prefix).items()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = sorted(set(params) - set(state))
        if missing:
            raise KeyError(f"missing parameters in state: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {name}", arr.shape, p.shape)
            p.data = arr.copy()

    def n_params(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        self.weight = T.parameter(rng.standard_normal((d_in, d_out)) * init_scale / math.sqrt(d_in))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.eps) * self.gain + self.bias


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, out_scale: float = 1.0):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, init_scale=out_scale)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = T.parameter(rng.standard_normal((n, d)))

    def __call__(self, idx) -> Tensor:
        return T.embedding(self.weight, idx)


def distance_bins(points: np.ndarray, n_bins: int, d_max: float) -> np.ndarray:
    """Bin index floor(d / (d_max / n_bins)) clamped to [0, n_bins - 1]."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return np.clip(np.floor(dist / (d_max / n_bins)).astype(np.int64), 0, n_bins - 1)


def relpos_index(length: int, clip: int) -> np.ndarray:
    pos = np.arange(length)
    return np.clip(pos[None, :] - pos[:, None], -clip, clip) + clip


def window_mask(length: int, window: int | None) -> np.ndarray:
    if window is None:
        return np.ones((length, length), dtype=bool)
    if window < 1:
        raise ValueError(f"sliding window must be >= 1, got {window}")
    pos = np.arange(length)
    return np.abs(pos[:, None] - pos[None, :]) <= window


class PairFeatures(Module):
    """Pair tensor from binned distances plus clipped relative positions."""

    def __init__(self, pair_dim: int, dist_bins: int, dist_max: float, relpos_clip: int, rng: np.random.Generator):
        self.dist_emb = Embedding(dist_bins, pair_dim, rng)
        self.pos_emb = Embedding(2 * relpos_clip + 1, pair_dim, rng)
        self.norm = LayerNorm(pair_dim)
        self.mlp = MLP(pair_dim, pair_dim, pair_dim, rng)
        self.dist_bins = dist_bins
        self.dist_max = dist_max
        self.relpos_clip = relpos_clip

    def indices(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (distance_bins(points, self.dist_bins, self.dist_max),
                relpos_index(len(points), self.relpos_clip))

    def __call__(self, points: np.ndarray) -> Tensor:
        dist_idx, pos_idx = self.indices(points)
        e = self.dist_emb(dist_idx) + self.pos_emb(pos_idx)
        return self.mlp(self.norm(e))


class PairBiasAttention(Module):
    """Multi-head self-attention with an additive per-head pair bias."""

    def __init__(self, d: int, heads: int, pair_dim: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"hidden dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.d = d
        self.wq = Linear(d, d, rng, bias=False)
        self.wk = Linear(d, d, rng, bias=False)
        self.wv = Linear(d, d, rng, bias=False)
        self.wo = Linear(d, d, rng, init_scale=0.5)
        self.bias_proj = Linear(pair_dim, heads, rng, bias=False)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = T.reshape(x, (*lead, self.heads, self.d // self.heads))
        n = x.ndim
        return T.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))

    def weights(self, h: Tensor, pair: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        q, k, v = self._split(self.wq(h)), self._split(self.wk(h)), self._split(self.wv(h))
        n = k.ndim
        kt = T.transpose(k, (*range(n - 2), n - 1, n - 2))
        bias = T.transpose(self.bias_proj(pair), (2, 0, 1))
        scores = T.matmul(q, kt) * (1.0 / math.sqrt(self.d // self.heads)) + bias
        return T.softmax(scores, mask), v

    def __call__(self, h: Tensor, pair: Tensor, mask: np.ndarray | None = None) -> Tensor:
        attn, v = self.weights(h, pair, mask)
        o = T.matmul(attn, v)
        n = o.ndim
        o = T.transpose(o, (*range(n - 3), n - 2, n - 3, n - 1))
        o = T.reshape(o, (*o.shape[:-2], self.d))
        return self.wo(o)


class TransformerLayer(Module):
    def __init__(self, d: int, heads: int, pair_dim: int, mlp_factor: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = PairBiasAttention(d, heads, pair_dim, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_factor * d, d, rng, out_scale=0.5)

    def __call__(self, h: Tensor, pair: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = h + self.attn(self.norm1(h), pair, mask)
        return h + self.mlp(self.norm2(h))


def sinusoidal_embedding(t: float, n_freq: int = 128, max_period: float = 1000.0) -> np.ndarray:
    freqs = max_period ** (-np.arange(n_freq) / n_freq) * max_period
    arg = t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])
