"""Structure-conditioned sequence design on top of frozen structure tokens.

A dual-path (scalar / vector) geometry adapter turns token embeddings and
backbone directions into per-nucleotide features; a causal decoder then
predicts nucleotides 5' to 3'.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import diversity_3mer, recovery
from .nn import MLP, Embedding, LayerNorm, Linear, Module, PairBiasAttention, relpos_index
from .optim import AdamW, clip_grad_norm
from .structure import RnaStructure
from .tensor import Tensor

VOCAB = "AUCG"
START = len(VOCAB)
_VOCAB_INDEX = {c: i for i, c in enumerate(VOCAB)}

BACKBONE_TAG = "B6"
NEIGHBOUR_OFFSETS = (-2, -1, 1, 2)
OTHER_ATOMS = ("P", "O5'", "C5'", "C3'", "O3'")
N_VECTOR_CHANNELS = len(NEIGHBOUR_OFFSETS) + 3 + len(OTHER_ATOMS)


def encode_sequence(seq: str) -> np.ndarray:
    try:
        return np.array([_VOCAB_INDEX[c] for c in seq], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"nucleotide {e.args[0]!r} not in {VOCAB}") from None


def decode_sequence(idx: np.ndarray) -> str:
    return "".join(VOCAB[int(i)] for i in idx)


# ---------------------------------------------------------------- geometry

def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    ok = n[..., 0] > 1e-8
    return np.where(ok[..., None], v / np.where(n > 1e-8, n, 1.0), 0.0), ok


def local_frames(s: RnaStructure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-nucleotide frames and directional features from B6 backbone atoms.

    Returns ``(frames (L, 3, 3), v_local (L, V, 3), valid (L,))``. Frame
    columns are e1 = C4'->C3', e2 = the component of C4'->C5' orthogonal to
    e1, and e3 = e1 x e2. ``v_local`` holds unit vectors from C4' to the
    C4' of neighbours i-2, i-1, i+1, i+2, the three frame axes, and unit
    vectors from C4' to the other backbone atoms. Channels that are missing
    or degenerate are zero.
    """
    if s.atom_set.tag != BACKBONE_TAG:
        raise ValueError(f"{s.id}: local frames need the {BACKBONE_TAG} atom set, got {s.atom_set.tag}")
    c4, m4 = s.atom("C4'")
    c3, m3 = s.atom("C3'")
    c5, m5 = s.atom("C5'")
    e1, ok1 = _unit(c3 - c4)
    u2 = c5 - c4
    e2, ok2 = _unit(u2 - (u2 * e1).sum(-1, keepdims=True) * e1)
    e3 = np.cross(e1, e2)
    valid = m4 & m3 & m5 & ok1 & ok2
    bad = (m4 & m3 & m5) & ~valid
    if bad.any():
        warnings.warn(f"{s.id}: degenerate backbone at residues {np.flatnonzero(bad).tolist()}; frames masked",
                      stacklevel=2)
    frames = np.stack([e1, e2, e3], axis=-1)
    frames[~valid] = 0.0
    L = len(s)
    chans = []
    for off in NEIGHBOUR_OFFSETS:
        d = np.zeros((L, 3))
        keep = np.zeros(L, dtype=bool)
        lo, hi = max(0, -off), min(L, L - off)
        d[lo:hi] = c4[lo + off:hi + off] - c4[lo:hi]
        keep[lo:hi] = m4[lo:hi] & m4[lo + off:hi + off]
        u, ok = _unit(d)
        chans.append(np.where((keep & ok)[:, None], u, 0.0))
    chans += [frames[:, :, 0], frames[:, :, 1], frames[:, :, 2]]
    for name in OTHER_ATOMS:
        x, m = s.atom(name)
        u, ok = _unit(x - c4)
        chans.append(np.where((m & m4 & ok)[:, None], u, 0.0))
    return frames, np.stack(chans, axis=1), valid


# ---------------------------------------------------------------- model

@dataclass
class InvFoldConfig:
    d_s: int = 128
    vector_channels: int = 16
    blocks: int = 3
    heads: int = 4
    pair_dim: int = 16
    relpos_clip: int = 32
    prior_dim: int = 2
    pos_freqs: int = 16
    smoothing: float = 0.1

    def validate(self) -> None:
        if self.d_s % self.heads:
            raise ValueError(f"d_s {self.d_s} not divisible by heads {self.heads}")
        if self.blocks < 1 or self.vector_channels < 1:
            raise ValueError("need at least one decoder block and one vector channel")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")


def causal_mask(length: int) -> np.ndarray:
    """M[i, j] = j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def _vec_norm(v: Tensor) -> Tensor:
    return T.sqrt(T.sum(v * v, axis=-1) + 1e-8)


class GeometryAdapter(Module):
    """Scalar / vector features from token embeddings and local directions.

    Vectors are kept as (L, K, 3). Scalars are invariant and vectors rotate
    with the input directions; position i only sees directions at j <= i
    through the pairwise path.
    """

    def __init__(self, cfg: InvFoldConfig, d_in: int, rng: np.random.Generator):
        self.cfg = cfg
        d, K = cfg.d_s, cfg.vector_channels
        self.w_s = Linear(d_in + cfg.prior_dim, d, rng)
        self.w_v = Linear(d_in + cfg.prior_dim, K, rng)
        self.w_s2v = Linear(d, K, rng, init_scale=0.1)
        self.relpos = Embedding(2 * cfg.relpos_clip + 1, cfg.pair_dim, rng)
        self.relation = MLP(cfg.pair_dim, cfg.pair_dim, K, rng)
        self.w_v2s = Linear(K, d, rng, init_scale=0.1)

    def _inputs(self, c, priors: np.ndarray | None) -> Tensor:
        c = c if isinstance(c, Tensor) else T.tensor(np.asarray(c, dtype=np.float64))
        L = c.shape[0]
        if priors is None:
            priors = np.zeros((L, self.cfg.prior_dim))
        if priors.shape != (L, self.cfg.prior_dim):
            raise T.ShapeError("adapter_priors", priors.shape, (L, self.cfg.prior_dim))
        return T.concat([c, priors], axis=-1) if self.cfg.prior_dim else c

    def pair_weights(self, length: int) -> Tensor:
        """sigma(S) * M as (K, L, L)."""
        S = self.relation(self.relpos(relpos_index(length, self.cfg.relpos_clip)))
        w = T.sigmoid(S) * causal_mask(length)[:, :, None].astype(np.float64)
        return T.transpose(w, (2, 0, 1))

    def vector_path(self, c, v_local: np.ndarray, priors: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """(node_s before vector feedback, node_v)."""
        x = self._inputs(c, priors)
        L = x.shape[0]
        if v_local.ndim != 3 or v_local.shape[0] != L or v_local.shape[2] != 3:
            raise T.ShapeError("adapter_vectors", v_local.shape, (L, "V", 3))
        node_s = self.w_s(x)
        v_gate = T.tanh(self.w_v(x))
        v_weight = v_gate + self.w_s2v(node_s)
        u = v_local.mean(axis=1)
        node_v = T.reshape(v_weight, (L, -1, 1)) * u[:, None, :]
        v_pair = T.matmul(self.pair_weights(L), u)
        node_v = node_v + T.transpose(v_pair, (1, 0, 2))
        return node_s, node_v

    def __call__(self, c, v_local: np.ndarray, priors: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        node_s, node_v = self.vector_path(c, v_local, priors)
        return node_s + self.w_v2s(_vec_norm(node_v)), node_v


class DecoderBlock(Module):
    """Causal scalar attention, vector-norm feedback and gated vector update."""

    def __init__(self, cfg: InvFoldConfig, rng: np.random.Generator):
        d, K = cfg.d_s, cfg.vector_channels
        self.norm1 = LayerNorm(d)
        self.attn = PairBiasAttention(d, cfg.heads, cfg.pair_dim, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, 2 * d, d, rng, out_scale=0.5)
        self.v_mix = Linear(K, K, rng, bias=False)
        self.v_norm_in = Linear(K, d, rng, init_scale=0.1)
        self.v_gate = Linear(K, K, rng)

    def __call__(self, s: Tensor, v: Tensor, pair: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        s = s + self.attn(self.norm1(s), pair, mask)
        L, K = v.shape[0], v.shape[1]
        vh = T.transpose(self.v_mix(T.transpose(v, (0, 2, 1))), (0, 2, 1))
        n = _vec_norm(vh)
        s = s + self.mlp(self.norm2(s)) + self.v_norm_in(n)
        v = vh * T.reshape(T.sigmoid(self.v_gate(n)), (L, K, 1))
        return s, v


def position_features(length: int, n_freq: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    freqs = 1.0 / (100.0 ** (np.arange(n_freq) / n_freq))
    return np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=-1)


class InverseFolder(Module):
    """Adapter + autoregressive decoder. Logits at i depend on inputs at j <= i
    and on nucleotides at j < i only."""

    def __init__(self, cfg: InvFoldConfig, d_in: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.d_in = d_in
        d = cfg.d_s
        self.adapter = GeometryAdapter(cfg, d_in, rng)
        self.prev_emb = Embedding(len(VOCAB) + 1, d, rng)
        self.pos_proj = Linear(2 * cfg.pos_freqs, d, rng)
        self.relpos = Embedding(2 * cfg.relpos_clip + 1, cfg.pair_dim, rng)
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.norm_out = LayerNorm(d)
        self.head = Linear(d, len(VOCAB), rng, init_scale=0.1)

    def logits(self, c, v_local: np.ndarray, prev: np.ndarray, priors: np.ndarray | None = None) -> Tensor:
        """Logits (..., L, 4) for previous-nucleotide indices ``prev`` of shape (..., L)."""
        node_s, node_v = self.adapter(c, v_local, priors)
        L = node_s.shape[0]
        if prev.shape[-1] != L:
            raise T.ShapeError("decoder_prefix", prev.shape, ("...", L))
        s = self.prev_emb(prev) + (node_s + self.pos_proj(position_features(L, self.cfg.pos_freqs)))
        pair = self.relpos(relpos_index(L, self.cfg.relpos_clip))
        mask = causal_mask(L)
        v = node_v
        for block in self.blocks:
            s, v = block(s, v, pair, mask)
        return self.head(self.norm_out(s))

    def teacher_forced(self, c, v_local: np.ndarray, seq: np.ndarray, priors: np.ndarray | None = None) -> Tensor:
        return self.logits(c, v_local, shift_right(seq), priors)

    def sample(self, c, v_local: np.ndarray, temperature: float, rng: np.random.Generator,
               n_samples: int = 1, priors: np.ndarray | None = None) -> list[str]:
        """Left-to-right sampling; ``temperature <= 0`` decodes by argmax."""
        L = v_local.shape[0]
        out = np.full((n_samples, L), START, dtype=np.int64)
        for i in range(L):
            prev = shift_right(out[:, :i + 1])
            z = self.logits(np.asarray(c)[:i + 1], v_local[:i + 1], prev,
                            None if priors is None else priors[:i + 1]).data[:, i]
            out[:, i] = sample_logits(z, temperature, rng)
        return [decode_sequence(row) for row in out]


def shift_right(seq: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    prev = np.full_like(seq, START)
    prev[..., 1:] = seq[..., :-1]
    return prev


def sample_logits(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of (B, 4) logits; argmax when ``temperature <= 0``."""
    if temperature <= 0:
        return logits.argmax(-1)
    z = logits / temperature
    p = np.exp(z - z.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    u = rng.random(len(p))
    return np.minimum((np.cumsum(p, -1) < u[:, None]).sum(-1), len(VOCAB) - 1)


def label_smooth_ce(logits: Tensor, targets: np.ndarray, eps: float = 0.1) -> tuple[Tensor, Tensor]:
    """(sum over positions, per-position mean) of
    -[(1 - eps) log p(target) + eps/4 * sum_s log p(s)]."""
    logp = T.log_softmax(logits)
    n_cls = logits.shape[-1]
    onehot = np.eye(n_cls)[np.asarray(targets, dtype=np.int64)]
    w = (1.0 - eps) * onehot + eps / n_cls
    total = -T.sum(logp * w)
    n = int(np.prod(np.shape(targets)))
    return total, total * (1.0 / n)


# ---------------------------------------------------------------- data / training

@dataclass
class InvFoldExample:
    id: str
    sequence: str
    cond: np.ndarray
    v_local: np.ndarray
    priors: np.ndarray | None = None

    @property
    def targets(self) -> np.ndarray:
        return encode_sequence(self.sequence)


def featurize(s: RnaStructure, cond: np.ndarray) -> InvFoldExample:
    if cond.shape[0] != len(s):
        raise T.ShapeError("featurize", cond.shape, (len(s), "d"))
    _, v_local, _ = local_frames(s)
    return InvFoldExample(s.id, s.sequence, np.asarray(cond, dtype=np.float64), v_local)


def featurize_with(model, structures: Sequence[RnaStructure]) -> list[InvFoldExample]:
    """Token embeddings from a frozen autoencoder (no gradient recorded)."""
    return [featurize(s, model.condition(s).data) for s in structures]


@dataclass
class InvFoldTrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0


def train_inverse_folder(model: InverseFolder, examples: Sequence[InvFoldExample], cfg: InvFoldTrainConfig,
                         on_log: Callable[[dict], None] | None = None) -> list[dict]:
    """Full-batch training on the per-position mean of the smoothed loss."""
    if not examples:
        raise ValueError("no inverse-folding examples")
    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    for step in range(1, cfg.steps + 1):
        total, n_pos = 0.0, 0
        for ex in examples:
            with T.Tape() as tape:
                logits = model.teacher_forced(ex.cond, ex.v_local, ex.targets, ex.priors)
                loss_sum, loss_mean = label_smooth_ce(logits, ex.targets, model.cfg.smoothing)
                scaled = loss_mean * (1.0 / len(examples))
            tape.backward(scaled)
            total += loss_sum.item()
            n_pos += len(ex.sequence)
        gnorm = clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        opt.zero_grad()
        row = {"step": step, "loss": total / n_pos, "grad_norm": gnorm}
        rows.append(row)
        if on_log is not None:
            on_log(row)
    return rows


def teacher_forced_recovery(model: InverseFolder, examples: Sequence[InvFoldExample]) -> float:
    """Position-weighted argmax recovery under teacher forcing."""
    hit = n = 0
    for ex in examples:
        pred = model.teacher_forced(ex.cond, ex.v_local, ex.targets, ex.priors).data.argmax(-1)
        hit += int((pred == ex.targets).sum())
        n += len(ex.sequence)
    return hit / n


SWEEP_TEMPERATURES = (0.1, 0.3, 0.5, 0.7, 1.0)
SWEEP_HEADER = "temperature\trecovery_mean\trecovery_best\tdiversity"


@dataclass
class Design:
    structure_id: str
    temperature: float
    sample: int
    sequence: str


def tradeoff_sweep(model: InverseFolder, examples: Sequence[InvFoldExample],
                   temperatures: Sequence[float] = SWEEP_TEMPERATURES, samples: int = 16,
                   seed: int = 0) -> tuple[list[dict], list[Design]]:
    """Recovery (mean and best of ``samples``) and 3-mer diversity per temperature."""
    if not examples:
        raise ValueError("tradeoff sweep over an empty structure set")
    rows, designs = [], []
    for ti, temp in enumerate(temperatures):
        rec_mean, rec_best, div = [], [], []
        for ei, ex in enumerate(examples):
            rng = T.make_rng(seed, ti, ei)
            seqs = model.sample(ex.cond, ex.v_local, temp, rng, samples, ex.priors)
            recs = [recovery(s, ex.sequence) for s in seqs]
            rec_mean.append(float(np.mean(recs)))
            rec_best.append(float(np.max(recs)))
            if samples > 1 and len(ex.sequence) >= 3:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    try:
                        div.append(diversity_3mer(seqs))
                    except ValueError:
                        pass
            designs += [Design(ex.id, temp, k, s) for k, s in enumerate(seqs)]
        rows.append({"temperature": temp, "recovery_mean": float(np.mean(rec_mean)),
                     "recovery_best": float(np.mean(rec_best)),
                     "diversity": float(np.mean(div)) if div else float("nan")})
    return rows, designs


def format_sweep(rows: Sequence[dict]) -> str:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(f"{r['temperature']!r}\t{r['recovery_mean']:.6f}\t{r['recovery_best']:.6f}\t{r['diversity']:.6f}")
    return "\n".join(lines) + "\n"


def write_fasta(path, designs: Sequence[Design]) -> None:
    with open(Path(path), "w") as fh:
        for d in designs:
            fh.write(f">{d.structure_id}|T={d.temperature!r}|sample={d.sample}\n{d.sequence}\n")


def read_fasta(path) -> list[tuple[str, str]]:
    out, header, seq = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith(">"):
            if header is not None:
                out.append((header, "".join(seq)))
            header, seq = line[1:].strip(), []
        elif line.strip():
            seq.append(line.strip())
    if header is not None:
        out.append((header, "".join(seq)))
    return out


def save_inverse_folder(path, model: InverseFolder, meta: dict | None = None) -> None:
    save_checkpoint(path, model.state_dict(), {"invfold": asdict(model.cfg), "d_in": model.d_in, **(meta or {})})


def load_inverse_folder(path) -> tuple[InverseFolder, dict]:
    tensors, meta = load_checkpoint(path)
    if "invfold" not in meta:
        raise ValueError(f"{path}: not an inverse-folding checkpoint")
    model = InverseFolder(InvFoldConfig(**meta["invfold"]), int(meta["d_in"]), np.random.default_rng(0))
    model.load_state_dict(tensors)
    return model, meta

