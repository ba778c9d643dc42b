"""Encoder -> FSQ -> flow decoder, assembled into one trainable model."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig
from .flow import (DecoderConfig, SamplerConfig, VectorFieldNet, cfg_field, euler_integrate,
                   flow_matching_loss, interpolate, sample_noise_zero_com, sde_integrate)
from .fsq import FSQ, FsqConfig, TokenSequence
from .nn import Module
from .structure import RnaStructure, atom_set, mean_center
from .tensor import Tensor


@dataclass
class ModelConfig:
    atom_set: str = "A11"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    levels: tuple[int, ...] = (7, 5, 5, 5, 5)

    def validate(self) -> None:
        atom_set(self.atom_set)
        self.encoder.validate()
        self.decoder.validate()
        FsqConfig(tuple(self.levels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(atom_set=d.get("atom_set", "A11"),
                   encoder=EncoderConfig(**d.get("encoder", {})),
                   decoder=DecoderConfig(**d.get("decoder", {})),
                   levels=tuple(d.get("levels", (7, 5, 5, 5, 5))))


def corpus_scale(structures) -> float:
    """RMS distance of unmasked atoms from their structure's centroid."""
    total, n = 0.0, 0
    for s in structures:
        c = mean_center(s)
        total += float((c.coords[c.mask] ** 2).sum())
        n += int(c.mask.sum())
    if n == 0:
        raise ValueError("cannot compute scale of an empty corpus")
    return float(np.sqrt(total / n))


class RnaAutoencoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, scale: float = 1.0):
        cfg.validate()
        self.cfg = cfg
        self.atoms = atom_set(cfg.atom_set)
        self.fsq_cfg = FsqConfig(tuple(cfg.levels))
        self.scale = float(scale)
        A = self.atoms.size
        self.encoder = Encoder(cfg.encoder, A, rng)
        self.fsq = FSQ(self.fsq_cfg, cfg.encoder.hidden_dim, rng)
        self.decoder = VectorFieldNet(cfg.decoder, A, cfg.encoder.hidden_dim, self.atoms.index("C4'"), rng)

    # -- encoding -------------------------------------------------------------
    def _check(self, s: RnaStructure) -> None:
        if s.atom_set.tag != self.atoms.tag:
            raise ValueError(f"{s.id}: atom set {s.atom_set.tag} but model expects {self.atoms.tag}")

    def encode(self, s: RnaStructure) -> Tensor:
        self._check(s)
        return self.encoder(s, self.scale)

    def tokenize(self, s: RnaStructure) -> tuple[Tensor, TokenSequence]:
        """(token embeddings (L, d), TokenSequence)."""
        emb, tokens = self.fsq(self.encode(s))
        tokens.id = s.id
        return emb, tokens

    def condition(self, s: RnaStructure) -> Tensor:
        return self.tokenize(s)[0]

    def token_embedding(self, tokens: TokenSequence) -> Tensor:
        return self.fsq.embed_indices(tokens.indices)

    # -- decoding -------------------------------------------------------------
    def velocity(self, x_t: np.ndarray, t: float, cond: Tensor | None) -> Tensor:
        return self.decoder(x_t, t, cond, self.scale)

    def field(self, cond: Tensor | None, guidance: float = 0.0):
        """Numpy velocity field (x, t) -> v with optional classifier-free guidance."""
        def f(x: np.ndarray, t: float) -> np.ndarray:
            v = self.velocity(x, t, cond).data
            if guidance == 0.0:
                return v
            return cfg_field(v, self.velocity(x, t, None).data, guidance)
        return f

    def sample(self, cond: Tensor, cfg: SamplerConfig, rng: np.random.Generator,
               on_step=None) -> np.ndarray:
        """Coordinates in Angstrom, shape (L, A, 3), zero centre of mass."""
        cfg.validate()
        L = cond.shape[0]
        x0 = sample_noise_zero_com((L, self.atoms.size, 3), rng)
        f = self.field(cond, cfg.guidance)
        if cfg.eta == 0.0 and cfg.gamma == 0.0:
            x = euler_integrate(f, x0, cfg.steps, on_step)
        else:
            x = sde_integrate(f, x0, cfg, rng, on_step=on_step)
        return x * self.scale

    def reconstruct(self, s: RnaStructure, cfg: SamplerConfig, rng: np.random.Generator) -> RnaStructure:
        cond, _ = self.tokenize(s)
        coords = self.sample(cond, cfg, rng)
        out = s.with_coords(coords)
        out.coords[~out.mask] = 0.0
        return out

    def decode_tokens(self, tokens: TokenSequence, sequence: str, cfg: SamplerConfig,
                      rng: np.random.Generator) -> RnaStructure:
        coords = self.sample(self.token_embedding(tokens), cfg, rng)
        mask = np.ones((len(tokens), self.atoms.size), dtype=bool)
        return RnaStructure(tokens.id or "recon", sequence, self.atoms, coords, mask)

    # -- training -------------------------------------------------------------
    def flow_loss(self, s: RnaStructure, rng: np.random.Generator, cond_drop_prob: float = 0.1,
                  rotate: bool = True) -> Tensor:
        """Flow-matching loss for one structure with optional SO(3) augmentation."""
        from .structure import random_rotation
        self._check(s)
        s = mean_center(s)
        if rotate:
            s = random_rotation(s, rng)
        drop = rng.random() < cond_drop_prob
        t = float(rng.random())
        x1 = s.coords / self.scale
        x0 = sample_noise_zero_com(x1.shape, rng)
        cond = None if drop else self.condition(s)
        v = self.velocity(interpolate(x1, x0, t), t, cond)
        return flow_matching_loss(v, x1 - x0, s.mask)

    # -- persistence ----------------------------------------------------------
    def meta(self) -> dict:
        return {"model": self.cfg.to_dict(), "scale": self.scale}

    def save(self, path, extra_tensors: dict | None = None, extra_meta: dict | None = None) -> None:
        tensors = self.state_dict()
        tensors.update(extra_tensors or {})
        save_checkpoint(path, tensors, {**self.meta(), **(extra_meta or {})})

    @classmethod
    def load(cls, path) -> tuple["RnaAutoencoder", dict[str, np.ndarray], dict]:
        tensors, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model"]), np.random.default_rng(0), meta["scale"])
        model.load_state_dict(tensors)
        return model, tensors, meta
