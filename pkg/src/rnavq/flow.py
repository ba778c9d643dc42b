"""Conditional flow matching over atom coordinates in the zero centre-of-mass
subspace: noise, interpolation, loss, Euler / Euler-Maruyama samplers,
classifier-free guidance and the vector-field network."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, PairFeatures, TransformerLayer, sinusoidal_embedding, window_mask
from .tensor import Tensor

Field = Callable[[np.ndarray, float], np.ndarray]

SCORE_T_MAX = 1.0 - 1e-3


class TerminalTimeError(ValueError):
    pass


def center_of_mass(x: np.ndarray) -> np.ndarray:
    """Per-axis mean over the atom axes (-3, -2) of (..., L, A, 3) arrays."""
    return x.mean(axis=(-3, -2))


def project_zero_com(x: np.ndarray) -> np.ndarray:
    return x - center_of_mass(x)[..., None, None, :]


def sample_noise_zero_com(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard normal (..., L, A, 3) with the per-axis atom mean removed."""
    return project_zero_com(rng.standard_normal(shape))


def interpolate(x1: np.ndarray, x0: np.ndarray, t: float) -> np.ndarray:
    if x1.shape != x0.shape:
        raise T.ShapeError("interpolate", x1.shape, x0.shape)
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return x1.copy()
    return t * x1 + (1.0 - t) * x0


def cfg_field(v_cond: np.ndarray, v_uncond: np.ndarray, g: float) -> np.ndarray:
    if np.shape(v_cond) != np.shape(v_uncond):
        raise T.ShapeError("cfg_field", np.shape(v_cond), np.shape(v_uncond))
    if g == 0.0:
        return v_cond
    return v_cond + g * (v_cond - v_uncond)


def vf_to_score(v: np.ndarray, x_t: np.ndarray, t: float) -> np.ndarray:
    """Noise-scaled score implied by a velocity field: ``t v - x_t``.

    For the straight path x_t = t x1 + (1-t) x0 and the exact field x1 - x0
    this is -x0, i.e. (1-t) times the score of N(t x1, (1-t)^2 I) at x_t.
    Scaling by the path's standard deviation keeps the SDE drift bounded as
    t -> 1; divide by (1-t) for the unscaled score.
    """
    if t > SCORE_T_MAX:
        raise TerminalTimeError(f"score conversion undefined near t=1 (t={t}); use deterministic dynamics")
    return t * v - x_t


SCHEDULES: dict[str, Callable[[float], float]] = {
    "constant": lambda t: 1.0,
    "linear": lambda t: 1.0 - t,
    "cosine": lambda t: math.cos(0.5 * math.pi * t),
}


@dataclass
class SamplerConfig:
    steps: int = 100
    guidance: float = 0.0
    eta: float = 0.0
    gamma: float = 0.0
    schedule: str = "constant"
    terminal: float = 0.9

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError(f"sampler steps must be >= 1, got {self.steps}")
        if self.guidance < 0 or self.gamma < 0:
            raise ValueError("guidance and gamma must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown noise schedule {self.schedule!r}; choose from {sorted(SCHEDULES)}")


def euler_integrate(field: Field, x0: np.ndarray, steps: int,
                    on_step: Callable[[int, float, np.ndarray], None] | None = None) -> np.ndarray:
    """x <- x + v(x, t) dt at t = k/N, re-projected to zero CoM after each step."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps
    x = x0
    for k in range(steps):
        t = k / steps
        x = project_zero_com(x + field(x, t) * dt)
        if on_step is not None:
            on_step(k, t + dt, x)
    return x


def sde_integrate(field: Field, x0: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator,
                  score: Callable[[np.ndarray, float, np.ndarray], np.ndarray] | None = None,
                  on_step: Callable[[int, float, np.ndarray], None] | None = None) -> np.ndarray:
    """Euler-Maruyama for dx = v dt + g(t) eta s dt + sqrt(2 g(t) gamma) dW.

    ``score`` defaults to the analytic conversion of ``v``. For
    ``t >= cfg.terminal`` both eta and gamma are treated as zero.
    """
    cfg.validate()
    sched = SCHEDULES[cfg.schedule]
    dt = 1.0 / cfg.steps
    x = x0
    for k in range(cfg.steps):
        t = k / cfg.steps
        v = field(x, t)
        eta, gamma = (cfg.eta, cfg.gamma) if t < cfg.terminal else (0.0, 0.0)
        g = sched(t)
        drift = v
        if eta != 0.0 and g != 0.0:
            s = score(x, t, v) if score is not None else vf_to_score(v, x, t)
            drift = v + (g * eta) * s
        x = x + drift * dt
        if gamma != 0.0 and g != 0.0:
            x = x + math.sqrt(2.0 * g * gamma * dt) * sample_noise_zero_com(x.shape, rng)
        x = project_zero_com(x)
        if on_step is not None:
            on_step(k, t + dt, x)
    return x


def flow_matching_loss(v: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over unmasked atoms of ||v - target||^2."""
    if v.shape != target.shape:
        raise T.ShapeError("flow_loss", v.shape, target.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("flow loss over zero unmasked atoms")
    diff = v - target
    return T.sum(T.sum(diff * diff, axis=-1) * mask.astype(np.float64)) * (1.0 / n)


@dataclass
class DecoderConfig:
    layers: int = 8
    hidden_dim: int = 512
    heads: int = 8
    pair_dim: int = 64
    window: int | None = None
    dist_bins: int = 64
    dist_max: float = 40.0
    relpos_clip: int = 32
    mlp_factor: int = 4
    time_freqs: int = 128
    endpoint_param: bool = True
    min_denominator: float = 0.05

    def validate(self) -> None:
        if not 0.0 < self.min_denominator <= 1.0:
            raise ValueError("min_denominator must lie in (0, 1]")
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.hidden_dim % self.heads:
            raise ValueError(f"decoder hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.window is not None and self.window < 1:
            raise ValueError("decoder window must be >= 1 or None")


class VectorFieldNet(Module):
    """v(x_t, t, cond): per-residue transformer over noisy coordinates.

    ``cond`` is an (L, cond_dim) tensor of token embeddings, or ``None`` for
    the learned null conditioning. The output is projected to zero CoM.

    With ``endpoint_param`` the trunk predicts the clean structure D and the
    velocity is returned as (D - x_t) / max(1 - t, min_denominator), which
    keeps the linear dependence on x_t out of the normalised trunk.
    """

    def __init__(self, cfg: DecoderConfig, n_atoms: int, cond_dim: int, c4_slot: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.n_atoms = n_atoms
        self.c4_slot = c4_slot
        d = cfg.hidden_dim
        self.in_proj = Linear(3 * n_atoms, d, rng)
        self.time_mlp = MLP(2 * cfg.time_freqs, d, d, rng)
        self.cond_proj = Linear(cond_dim, d, rng)
        self.null_cond = T.parameter(rng.standard_normal(cond_dim) * 0.1)
        self.pair = PairFeatures(cfg.pair_dim, cfg.dist_bins, cfg.dist_max, cfg.relpos_clip, rng)
        self.layers = [TransformerLayer(d, cfg.heads, cfg.pair_dim, cfg.mlp_factor, rng) for _ in range(cfg.layers)]
        self.norm_out = LayerNorm(d)
        self.out_proj = Linear(d, 3 * n_atoms, rng, init_scale=0.1)

    def null_condition(self, length: int) -> Tensor:
        return T.embedding(T.reshape(self.null_cond, (1, -1)), np.zeros(length, dtype=np.int64))

    def __call__(self, x_t: np.ndarray, t: float, cond: Tensor | None, scale: float = 1.0) -> Tensor:
        L, A = x_t.shape[0], self.n_atoms
        if x_t.shape != (L, A, 3):
            raise T.ShapeError("vector_field", x_t.shape, ("L", A, 3))
        if cond is None:
            cond = self.null_condition(L)
        h = self.in_proj(x_t.reshape(L, 3 * A))
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.time_freqs)[None])
        h = h + T.reshape(temb, (self.cfg.hidden_dim,))
        h = h + self.cond_proj(cond)
        p = self.pair(x_t[:, self.c4_slot] * scale)
        mask = window_mask(L, self.cfg.window)
        for layer in self.layers:
            h = layer(h, p, mask)
        v = T.reshape(self.out_proj(self.norm_out(h)), (L * A, 3))
        v = v - T.mean(v, axis=0)
        v = T.reshape(v, (L, A, 3))
        if self.cfg.endpoint_param:
            v = (v - x_t) * (1.0 / max(1.0 - t, self.cfg.min_denominator))
        return v
