"""RNA structures: atom sets, PDB text in and out, centring, augmentation,
synthetic helices and deterministic corpus splits."""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

BASES = "AUCG"
PURINES = frozenset("AG")

_BACKBONE10 = ("P", "C5'", "C4'", "C3'", "C2'", "C1'", "O5'", "O4'", "O3'", "O2'")
BASE_ANCHOR = "N9/N1"


@dataclass(frozen=True)
class AtomSet:
    tag: str
    names: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def resolve(self, base: str) -> tuple[str, ...]:
        """Concrete PDB atom names for a residue of the given base."""
        anchor = "N9" if base in PURINES else "N1"
        return tuple(anchor if n == BASE_ANCHOR else n for n in self.names)


ATOM_SETS = {
    "A1": AtomSet("A1", ("C4'",)),
    "A10": AtomSet("A10", _BACKBONE10),
    "A11": AtomSet("A11", _BACKBONE10 + (BASE_ANCHOR,)),
    "B6": AtomSet("B6", ("P", "C5'", "C4'", "C3'", "O5'", "O3'")),
}


def atom_set(tag: str | AtomSet) -> AtomSet:
    if isinstance(tag, AtomSet):
        return tag
    try:
        return ATOM_SETS[tag]
    except KeyError:
        raise ValueError(f"unknown atom set {tag!r}; expected one of {sorted(ATOM_SETS)}") from None


@dataclass
class RnaStructure:
    id: str
    sequence: str
    atom_set: AtomSet
    coords: np.ndarray
    mask: np.ndarray
    chain_id: str = "A"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        L = len(self.sequence)
        if L < 1:
            raise ValueError(f"{self.id}: empty structure")
        if self.coords.shape != (L, self.atom_set.size, 3) or self.mask.shape != (L, self.atom_set.size):
            raise ValueError(f"{self.id}: coords {self.coords.shape} / mask {self.mask.shape} "
                             f"do not match L={L}, A={self.atom_set.size}")
        bad = set(self.sequence) - set(BASES)
        if bad:
            raise ValueError(f"{self.id}: unsupported bases {sorted(bad)}")
        self.coords[~self.mask] = 0.0

    def __len__(self) -> int:
        return len(self.sequence)

    @property
    def n_atoms(self) -> int:
        return self.atom_set.size

    def atom(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """(L, 3) coordinates and (L,) mask of one named atom slot."""
        i = self.atom_set.index(name)
        return self.coords[:, i], self.mask[:, i]

    def representative(self) -> np.ndarray:
        return self.atom("C4'")[0]

    def with_coords(self, coords: np.ndarray, **kw) -> "RnaStructure":
        return replace(self, coords=np.array(coords, dtype=np.float64), mask=self.mask.copy(), **kw)

    def select(self, tag: str | AtomSet) -> "RnaStructure":
        """Restrict to a sub-atom-set (e.g. the B6 backbone of an A10 structure)."""
        target = atom_set(tag)
        try:
            cols = [self.atom_set.index(n) for n in target.names]
        except ValueError:
            raise ValueError(f"{self.id}: atom set {self.atom_set.tag} does not contain {target.tag}") from None
        return RnaStructure(self.id, self.sequence, target, self.coords[:, cols], self.mask[:, cols],
                            self.chain_id, dict(self.meta))


class PdbParseError(ValueError):
    pass


_AMINO = frozenset(
    "ALA ARG ASN ASP CYS GLN GLU GLY HIS ILE LEU LYS MET PHE PRO SER THR TRP TYR VAL SEC PYL MSE".split()
)
_WATER = frozenset({"HOH", "WAT", "DOD", "H2O"})


def _norm_atom(name: str) -> str:
    return name.strip().replace("*", "'")


def parse_pdb(text: str, tag: str | AtomSet = "A10", name: str = "pdb") -> list[RnaStructure]:
    """One structure per (model, chain) built from ATOM records of A/U/C/G residues.

    Multi-model files yield one structure per MODEL block with ids
    ``{name}_m{model}_{chain}``; single-model files use ``{name}_{chain}``.
    """
    aset = atom_set(tag)
    models: list[dict] = []
    current: dict | None = None
    dropped: set[tuple[str, str]] = set()

    for lineno, line in enumerate(text.splitlines(), 1):
        rec = line[:6].strip()
        if rec == "MODEL":
            current = {"serial": line[10:14].strip() or str(len(models) + 1), "chains": {}}
            models.append(current)
            continue
        if rec == "ENDMDL":
            current = None
            continue
        if rec != "ATOM":
            continue
        if current is None:
            if not models or models[-1].get("implicit") is not True:
                current = {"serial": str(len(models) + 1), "chains": {}, "implicit": True}
                models.append(current)
            else:
                current = models[-1]
        resname = line[17:20].strip()
        if resname in _AMINO or resname in _WATER:
            continue
        if resname not in BASES:
            dropped.add((resname, line[22:27].strip()))
            continue
        altloc = line[16:17]
        if altloc not in (" ", "", "A", "1"):
            continue
        try:
            xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError:
            raise PdbParseError(f"line {lineno}: malformed coordinate field: {line.rstrip()!r}") from None
        if not all(map(math.isfinite, xyz)):
            raise PdbParseError(f"line {lineno}: non-finite coordinate")
        chain = line[21:22].strip() or "A"
        reskey = (line[22:26].strip(), line[26:27].strip())
        residues = current["chains"].setdefault(chain, {})
        res = residues.setdefault(reskey, {"base": resname, "atoms": {}})
        atom = _norm_atom(line[12:16])
        if atom in res["atoms"]:
            raise PdbParseError(f"line {lineno}: duplicate atom {atom} in residue {reskey[0]}{reskey[1]} chain {chain}")
        res["atoms"][atom] = xyz

    if dropped:
        warnings.warn(f"{name}: dropped {len(dropped)} residue(s) with unknown bases: "
                      f"{sorted({r for r, _ in dropped})}", stacklevel=2)
    multi = len(models) > 1
    out = []
    for model in models:
        for chain, residues in model["chains"].items():
            if not residues:
                continue
            seq = "".join(r["base"] for r in residues.values())
            coords = np.zeros((len(seq), aset.size, 3))
            mask = np.zeros((len(seq), aset.size), dtype=bool)
            for i, r in enumerate(residues.values()):
                for j, atom in enumerate(aset.resolve(r["base"])):
                    if atom in r["atoms"]:
                        coords[i, j] = r["atoms"][atom]
                        mask[i, j] = True
            sid = f"{name}_m{model['serial']}_{chain}" if multi else f"{name}_{chain}"
            out.append(RnaStructure(sid, seq, aset, coords, mask, chain))
    if not out:
        raise PdbParseError(f"{name}: no RNA chains found")
    return out


def read_pdb(path, tag: str | AtomSet = "A10") -> list[RnaStructure]:
    from pathlib import Path
    p = Path(path)
    return parse_pdb(p.read_text(), tag, name=p.stem)


def _atom_line(serial: int, atom: str, base: str, chain: str, resseq: int, xyz, bfac: float) -> str:
    padded = f" {atom:<3s}" if len(atom) < 4 else atom
    element = atom[0]
    return (f"ATOM  {serial % 100000:5d} {padded:<4s} {base:>3s} {chain[:1]:1s}{resseq % 10000:4d}    "
            f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{1.0:6.2f}{bfac:6.2f}          {element:>2s}")


def to_pdb(structures: Sequence[RnaStructure] | RnaStructure,
           bfactors: Sequence[np.ndarray | None] | None = None, models: bool | None = None) -> str:
    """Write structures as PDB text; multiple structures become MODEL blocks.

    Occupancy is fixed at 1.00; the B-factor column carries the optional
    per-residue value (e.g. lDDT) of the matching entry in ``bfactors``.
    """
    if isinstance(structures, RnaStructure):
        structures = [structures]
    if models is None:
        models = len(structures) > 1
    lines = []
    for k, s in enumerate(structures):
        bf = None if bfactors is None else bfactors[k]
        if models:
            lines.append(f"MODEL     {k + 1:4d}")
        serial = 1
        for i, base in enumerate(s.sequence):
            for j, atom in enumerate(s.atom_set.resolve(base)):
                if not s.mask[i, j]:
                    continue
                b = 0.0 if bf is None else float(bf[i])
                lines.append(_atom_line(serial, atom, base, s.chain_id, i + 1, s.coords[i, j], b))
                serial += 1
        lines.append("TER")
        if models:
            lines.append("ENDMDL")
    lines.append("END")
    return "\n".join(lines) + "\n"


def centroid(s: RnaStructure) -> np.ndarray:
    if not s.mask.any():
        raise ValueError(f"{s.id}: all atoms masked")
    return s.coords[s.mask].mean(axis=0)


def mean_center(s: RnaStructure) -> RnaStructure:
    """Subtract the centroid of present atoms; masked atoms are zeroed.

    Coordinates are first taken relative to one present atom, so the result
    depends only on coordinate differences: any shift that is exact in
    floating point leaves the output bitwise unchanged.
    """
    if not s.mask.any():
        raise ValueError(f"{s.id}: all atoms masked")
    rel = s.coords - s.coords[s.mask][0]
    c = rel - rel[s.mask].mean(axis=0)
    c[~s.mask] = 0.0
    return s.with_coords(c)


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from SO(3) via a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotate(s: RnaStructure, R: np.ndarray) -> RnaStructure:
    c = s.coords @ R.T
    c[~s.mask] = 0.0
    return s.with_coords(c)


def random_rotation(s: RnaStructure, rng: np.random.Generator) -> RnaStructure:
    return rotate(s, random_rotation_matrix(rng))


def pairwise_distances(s: RnaStructure) -> np.ndarray:
    pts = s.coords[s.mask]
    diff = pts[:, None] - pts[None]
    return np.sqrt((diff * diff).sum(-1))


# Per-atom offsets (radial, tangential, axial) in Angstrom from the C4' atom,
# in the residue's cylindrical frame. An approximate, fixed geometry used only
# to give synthetic helices a plausible multi-atom footprint.
HELIX_OFFSETS = {
    "P": (0.6, -2.3, 3.2),
    "C5'": (0.4, -1.0, 1.0),
    "C4'": (0.0, 0.0, 0.0),
    "C3'": (-0.3, 1.3, 0.6),
    "C2'": (-1.7, 1.3, -0.3),
    "C1'": (-2.4, 0.0, -0.6),
    "O5'": (0.2, -1.7, 2.1),
    "O4'": (-1.2, -0.6, -0.4),
    "O3'": (0.2, 2.3, 1.4),
    "O2'": (-2.3, 2.4, 0.3),
    BASE_ANCHOR: (-3.8, 0.2, -0.9),
}
HELIX_RADIUS = 8.7


def synth_helix(length: int, twist_deg: float = 32.7, rise: float = 2.81,
                rng: np.random.Generator | None = None, tag: str | AtomSet = "A10",
                radius: float = HELIX_RADIUS, phase_deg: float = 0.0, sid: str | None = None) -> RnaStructure:
    """Regular helix of C4' atoms along +z with fixed local atom offsets.

    The generator only draws the sequence, so geometry is a pure function of
    the shape arguments.
    """
    if length < 4:
        raise ValueError(f"helix length must be >= 4, got {length}")
    aset = atom_set(tag)
    rng = rng if rng is not None else np.random.default_rng(0)
    seq = "".join(rng.choice(list(BASES), size=length))
    ang = np.deg2rad(phase_deg + twist_deg * np.arange(length))
    radial = np.stack([np.cos(ang), np.sin(ang), np.zeros(length)], -1)
    tangent = np.stack([-np.sin(ang), np.cos(ang), np.zeros(length)], -1)
    axial = np.array([0.0, 0.0, 1.0])
    c4 = radius * radial + rise * np.arange(length)[:, None] * axial
    coords = np.zeros((length, aset.size, 3))
    for j, name in enumerate(aset.names):
        dr, dt, dz = HELIX_OFFSETS[name]
        coords[:, j] = c4 + dr * radial + dt * tangent + dz * axial
    mask = np.ones((length, aset.size), dtype=bool)
    return RnaStructure(sid or f"helix{length}", seq, aset, coords, mask)


def synthetic_corpus(n: int, min_len: int, max_len: int, seed: int, tag: str = "A10",
                     random_phase: bool = False) -> list[RnaStructure]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        L = int(rng.integers(min_len, max_len + 1))
        phase = float(rng.uniform(0, 360)) if random_phase else 0.0
        out.append(mean_center(synth_helix(L, rng=rng, tag=tag, phase_deg=phase, sid=f"helix{k:04d}_L{L}")))
    return out


def _unit_hash(key: str, seed: int) -> float:
    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2.0 ** 64


def split_dataset(corpus: Iterable[RnaStructure], fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> dict[str, list[RnaStructure]]:
    """Rank structures by a hash of (seed, id) and cut the ranking at the
    requested fractions, so sizes match the fractions up to rounding and the
    result does not depend on input order."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot split an empty corpus")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ranked = sorted(corpus, key=lambda s: (_unit_hash(s.id, seed), s.id))
    n = len(ranked)
    quota = np.floor(np.asarray(fractions) * n).astype(int)
    # hand leftover slots to the largest remainders
    for k in np.argsort(-(np.asarray(fractions) * n - quota), kind="stable")[: n - quota.sum()]:
        quota[k] += 1
    a, b = int(quota[0]), int(quota[0] + quota[1])
    return {"train": ranked[:a], "val": ranked[a:b], "test": ranked[b:]}


def save_corpus(path, structures: Sequence[RnaStructure]) -> None:
    """Write structures to one binary container (lossless, byte-deterministic)."""
    from .checkpoint import save_checkpoint
    tensors, index = {}, []
    for k, s in enumerate(structures):
        tensors[f"coords.{k}"] = s.coords
        tensors[f"mask.{k}"] = s.mask.astype(np.float64)
        index.append({"id": s.id, "sequence": s.sequence, "atom_set": s.atom_set.tag,
                      "chain_id": s.chain_id, "meta": s.meta})
    save_checkpoint(path, tensors, {"kind": "corpus", "structures": index})


def load_corpus(path) -> list[RnaStructure]:
    from .checkpoint import CheckpointError, load_checkpoint
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "corpus":
        raise CheckpointError(f"{path}: not a structure corpus")
    return [RnaStructure(e["id"], e["sequence"], atom_set(e["atom_set"]), tensors[f"coords.{k}"],
                         tensors[f"mask.{k}"] > 0.5, e["chain_id"], e["meta"])
            for k, e in enumerate(meta["structures"])]
