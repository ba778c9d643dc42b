from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Module, PairFeatures, TransformerLayer, window_mask
from .structure import RnaStructure, mean_center
from .tensor import Tensor


@dataclass
class EncoderConfig:
    layers: int = 2
    hidden_dim: int = 256
    heads: int = 8
    pair_dim: int = 64
    window: int | None = 8
    dist_bins: int = 64
    dist_max: float = 40.0
    relpos_clip: int = 32
    mlp_factor: int = 4

    def validate(self) -> None:
        if self.layers < 0:
            raise ValueError("encoder layers must be >= 0")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be >= 1 or None, got {self.window}")
        if self.dist_max <= 0 or self.dist_bins < 1:
            raise ValueError("dist_max must be > 0 and dist_bins >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


class Encoder(Module):
    """Centred per-nucleotide coordinates -> per-nucleotide continuous latents.

    Inputs to the atom MLP are divided by ``scale`` so the network sees
    O(1) values; pair distances stay in Angstrom.
    """

    def __init__(self, cfg: EncoderConfig, n_atoms: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.n_atoms = n_atoms
        self.mlp_in = MLP(3 * n_atoms, cfg.hidden_dim, cfg.hidden_dim, rng)
        self.pair = PairFeatures(cfg.pair_dim, cfg.dist_bins, cfg.dist_max, cfg.relpos_clip, rng)
        self.layers = [TransformerLayer(cfg.hidden_dim, cfg.heads, cfg.pair_dim, cfg.mlp_factor, rng)
                       for _ in range(cfg.layers)]
        self.norm_out = LayerNorm(cfg.hidden_dim)

    def embed_nucleotides(self, coords: np.ndarray, scale: float = 1.0) -> Tensor:
        if coords.ndim != 3 or coords.shape[1:] != (self.n_atoms, 3):
            raise T.ShapeError("embed_nucleotide", coords.shape, ("L", self.n_atoms, 3))
        return self.mlp_in(coords.reshape(len(coords), -1) / scale)

    def pair_features(self, c4: np.ndarray) -> Tensor:
        return self.pair(c4)

    def forward_coords(self, coords: np.ndarray, c4: np.ndarray, scale: float = 1.0) -> Tensor:
        h = self.embed_nucleotides(coords, scale)
        p = self.pair_features(c4)
        mask = window_mask(len(coords), self.cfg.window)
        for layer in self.layers:
            h = layer(h, p, mask)
        return self.norm_out(h)

    def __call__(self, s: RnaStructure, scale: float = 1.0, center: bool = True) -> Tensor:
        """Latents (L, d). Centring first makes the output translation invariant."""
        if s.n_atoms != self.n_atoms:
            raise T.ShapeError("encode", (len(s), s.n_atoms, 3), ("L", self.n_atoms, 3))
        if center:
            s = mean_center(s)
        return self.forward_coords(s.coords, s.representative(), scale)
