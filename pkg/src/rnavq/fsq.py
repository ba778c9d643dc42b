"""Finite scalar quantisation with straight-through rounding."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

PRESETS = {240: (8, 6, 5), 1000: (8, 5, 5, 5), 4375: (7, 5, 5, 5, 5)}


@dataclass(frozen=True)
class FsqConfig:
    levels: tuple[int, ...] = (7, 5, 5, 5, 5)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        self.validate()

    def validate(self) -> None:
        if not self.levels:
            raise ValueError("FSQ needs at least one level")
        if any(l < 2 for l in self.levels):
            raise ValueError(f"every FSQ level must be >= 2, got {self.levels}")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels))

    @property
    def shifts(self) -> np.ndarray:
        return np.array([l // 2 for l in self.levels], dtype=np.int64)

    @property
    def radix(self) -> np.ndarray:
        return np.cumprod((1,) + self.levels[:-1]).astype(np.int64)


def bound(z: Tensor | np.ndarray, cfg: FsqConfig) -> Tensor:
    """Squash each dimension so rounding reaches exactly ``l`` integer values.

    Odd ``l``: (l-1)/2 * tanh(z), range (-(l-1)/2, (l-1)/2).
    Even ``l``: (l-1)/2 * tanh(z + s) - 1/2, with s chosen so z=0 maps to 0;
    range (-l/2, l/2 - 1). For l=2 that s is infinite, so s=0 there.
    """
    levels = np.array(cfg.levels, dtype=np.float64)
    half = (levels - 1.0) / 2.0
    offset = np.where(levels % 2 == 0, 0.5, 0.0)
    ratio = offset / half
    shift = np.arctanh(np.where(ratio < 1.0, ratio, 0.0))
    return T.tanh(T.add(z, shift)) * half - offset


def digits_to_index(digits: np.ndarray, cfg: FsqConfig) -> np.ndarray:
    return (np.asarray(digits, dtype=np.int64) * cfg.radix).sum(-1)


def index_to_digits(index: np.ndarray | int, cfg: FsqConfig) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= cfg.codebook_size):
        raise ValueError(f"token index out of range [0, {cfg.codebook_size})")
    return (index[..., None] // cfg.radix) % np.array(cfg.levels)


def index_to_grid(index: np.ndarray | int, cfg: FsqConfig) -> np.ndarray:
    return (index_to_digits(index, cfg) - cfg.shifts).astype(np.float64)


@dataclass
class TokenSequence:
    indices: np.ndarray
    quantized: np.ndarray
    config: FsqConfig
    id: str = ""

    def __len__(self) -> int:
        return len(self.indices)


def quantize(bounded: Tensor | np.ndarray, cfg: FsqConfig) -> tuple[Tensor, TokenSequence]:
    """Round to the grid (forward) with identity gradient (backward)."""
    q = T.ste_round(bounded)
    digits = q.data.astype(np.int64) + cfg.shifts
    return q, TokenSequence(digits_to_index(digits, cfg), q.data.copy(), cfg)


def utilization(tokens: Iterable[TokenSequence | Sequence[int]], cfg: FsqConfig) -> float:
    seen: set[int] = set()
    n = 0
    for t in tokens:
        idx = t.indices if isinstance(t, TokenSequence) else np.asarray(t)
        seen.update(int(i) for i in idx)
        n += len(idx)
    if n == 0:
        raise ValueError("utilization of an empty token set")
    return len(seen) / cfg.codebook_size


def format_utilization(u: float) -> str:
    return f"{100.0 * u:.1f}"


class FSQ(Module):
    """Linear to ``len(levels)`` dims, bound, round; then a linear map back up."""

    def __init__(self, cfg: FsqConfig, d_model: int, rng: np.random.Generator):
        self.cfg = cfg
        self.proj_in = Linear(d_model, cfg.dim, rng)
        self.proj_out = Linear(cfg.dim, d_model, rng)

    def __call__(self, latents: Tensor) -> tuple[Tensor, TokenSequence]:
        q, tokens = quantize(bound(self.proj_in(latents), self.cfg), self.cfg)
        return self.proj_out(q), tokens

    def embed_indices(self, indices: np.ndarray) -> Tensor:
        return self.proj_out(index_to_grid(indices, self.cfg))


TOKEN_HEADER = "id\tlength\tlevels\tindices"


def write_tokens(path, tokens: Sequence[TokenSequence]) -> None:
    """Tab-separated token file: one header line, then one row per structure."""
    lines = [TOKEN_HEADER]
    for t in tokens:
        levels = ",".join(map(str, t.config.levels))
        lines.append(f"{t.id}\t{len(t)}\t{levels}\t{' '.join(map(str, t.indices.tolist()))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_tokens(path) -> list[TokenSequence]:
    rows = Path(path).read_text().splitlines()
    if not rows or rows[0] != TOKEN_HEADER:
        raise ValueError(f"{path}: not a token file (missing header)")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row.strip():
            continue
        sid, length, levels, idx = (row.split("\t") + [""])[:4]
        cfg = FsqConfig(tuple(int(x) for x in levels.split(",")))
        indices = np.array([int(x) for x in idx.split()], dtype=np.int64)
        if len(indices) != int(length):
            raise ValueError(f"{path}:{lineno}: length {length} but {len(indices)} indices")
        out.append(TokenSequence(indices, index_to_grid(indices, cfg), cfg, sid))
    return out
