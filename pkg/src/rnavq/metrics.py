"""Structure and sequence metrics: Kabsch RMSD, TM-score, lDDT, recovery,
3-mer diversity and AUROC."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .structure import BASES, RnaStructure


class DegenerateStructureError(ValueError):
    pass


@dataclass
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation


def kabsch_align(mobile: np.ndarray, reference: np.ndarray) -> Alignment:
    """Proper rotation + translation minimising squared deviation mobile -> reference."""
    mobile = np.asarray(mobile, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if mobile.shape != reference.shape or mobile.ndim != 2 or mobile.shape[1] != 3:
        raise ValueError(f"kabsch: need matching (N, 3) arrays, got {mobile.shape} and {reference.shape}")
    if len(mobile) < 3:
        raise DegenerateStructureError(f"kabsch: need at least 3 points, got {len(mobile)}")
    cm, cr = mobile.mean(0), reference.mean(0)
    P, Q = mobile - cm, reference - cr
    for name, X in (("mobile", P), ("reference", Q)):
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise DegenerateStructureError(f"kabsch: {name} points are collinear or coincident (rank < 2)")
    H = P.T @ Q
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return Alignment(R, cr - cm @ R.T)


def rmsd(a: np.ndarray, b: np.ndarray, align: bool = True) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError(f"rmsd: shape mismatch {a.shape} vs {b.shape}")
    if len(a) == 0:
        raise ValueError("rmsd of zero points")
    if align:
        a = kabsch_align(a, b).apply(a)
    diff = a - b
    return float(np.sqrt((diff * diff).sum(-1).mean()))


def tm_d0(length: int) -> float:
    """1.24 (L-15)^(1/3) - 1.8, clamped below at 0.5.

    Evaluated in hundredths so perfect cubes give the decimal value exactly
    (``tm_d0(42) == 1.92``); ``1.24 * 3 - 1.8`` would round to 1.9199999999999997.
    """
    return max(0.5, float((124.0 * np.cbrt(length - 15.0) - 180.0) / 100.0))


def _tm_terms(a: np.ndarray, b: np.ndarray, d0: float) -> float:
    d2 = ((a - b) ** 2).sum(-1)
    return float((1.0 / (1.0 + d2 / (d0 * d0))).mean())


def _points(x) -> np.ndarray:
    return x.representative() if isinstance(x, RnaStructure) else np.asarray(x, dtype=np.float64)


def tm_score(pred, ref) -> float:
    """TM-score over index-paired representative atoms.

    Superpositions are Kabsch fits on every contiguous fragment of length
    L, L//2 and L//4 (minimum 3); each is scored over all L residues and the
    best score is returned.
    """
    a, b = _points(pred), _points(ref)
    if a.shape != b.shape:
        raise ValueError(f"tm_score: length mismatch {a.shape} vs {b.shape}")
    L = len(a)
    d0 = tm_d0(L)
    best = 0.0
    for frag in sorted({L, L // 2, L // 4}, reverse=True):
        if frag < 3:
            continue
        for start in range(L - frag + 1):
            sl = slice(start, start + frag)
            try:
                al = kabsch_align(a[sl], b[sl])
            except DegenerateStructureError:
                continue
            best = max(best, _tm_terms(al.apply(a), b, d0))
    if best == 0.0:
        raise DegenerateStructureError("tm_score: no non-degenerate fragment to superpose")
    return best


def _flatten(x, mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(x, RnaStructure):
        mask = x.mask if mask is None else mask
        x = x.coords
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    L, A = x.shape[:2]
    mask = np.ones((L, A), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    residue = np.repeat(np.arange(L), A).reshape(L, A)
    return x[mask], residue[mask], mask


def _lddt_pairs(pred, ref, mask, cutoff):
    p, res, m = _flatten(pred, mask)
    r, _, _ = _flatten(ref, m)
    dr = np.sqrt(((r[:, None] - r[None]) ** 2).sum(-1))
    dp = np.sqrt(((p[:, None] - p[None]) ** 2).sum(-1))
    upper = np.triu(np.ones_like(dr, dtype=bool), 1)
    sel = upper & (dr < cutoff) & (res[:, None] != res[None])
    return dp, dr, sel, res


def lddt(pred, ref, cutoff: float = 15.0, thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
         mask: np.ndarray | None = None) -> float:
    """Superposition-free lDDT over inter-residue atom pairs with ref distance < cutoff."""
    dp, dr, sel, _ = _lddt_pairs(pred, ref, mask, cutoff)
    if not sel.any():
        raise ValueError("lddt: no atom pairs within the inclusion radius")
    dev = np.abs(dp - dr)[sel]
    return float(np.mean([(dev < t).mean() for t in thresholds]))


def lddt_per_residue(pred, ref, cutoff: float = 15.0, thresholds: Sequence[float] = (0.5, 1.0, 2.0, 4.0),
                     mask: np.ndarray | None = None) -> np.ndarray:
    dp, dr, sel, res = _lddt_pairs(pred, ref, mask, cutoff)
    sel = sel | sel.T
    dev = np.abs(dp - dr)
    score = np.mean([(dev < t) for t in thresholds], axis=0)
    L = int(res.max()) + 1
    out = np.full(L, np.nan)
    for i in range(L):
        rows = res == i
        s = sel[rows]
        if s.any():
            out[i] = score[rows][s].mean()
    return out


def recovery(pred_seq: str, true_seq: str) -> float:
    if len(pred_seq) != len(true_seq):
        raise ValueError(f"recovery: length mismatch {len(pred_seq)} vs {len(true_seq)}")
    if not true_seq:
        raise ValueError("recovery of empty sequences")
    return sum(a == b for a, b in zip(pred_seq, true_seq)) / len(true_seq)


KMERS = ["".join(k) for k in itertools.product(BASES, repeat=3)]
_KMER_INDEX = {k: i for i, k in enumerate(KMERS)}


def kmer_profile(seq: str) -> np.ndarray:
    """Overlapping 3-mer counts divided by (L - 2)."""
    if len(seq) < 3:
        raise ValueError(f"3-mer profile needs length >= 3, got {len(seq)}")
    v = np.zeros(64)
    for i in range(len(seq) - 2):
        v[_KMER_INDEX[seq[i:i + 3]]] += 1
    return v / (len(seq) - 2)


def diversity_3mer(seqs: Sequence[str]) -> float:
    """1 - mean Pearson correlation of 3-mer profiles over distinct pairs."""
    if len(seqs) < 2:
        raise ValueError("diversity needs at least two sequences")
    profiles = [kmer_profile(s) for s in seqs]
    corr = []
    for i, j in itertools.combinations(range(len(profiles)), 2):
        a, b = profiles[i], profiles[j]
        if a.std() == 0 or b.std() == 0:
            warnings.warn("diversity: skipping a pair with a constant 3-mer profile", stacklevel=2)
            continue
        ac, bc = a - a.mean(), b - b.mean()
        corr.append(float((ac * bc).sum() / np.sqrt((ac * ac).sum() * (bc * bc).sum())))
    if not corr:
        raise ValueError("diversity undefined: every pair had a constant profile")
    return 1.0 - float(np.mean(corr))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with mid-ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    """Per-structure rows plus column means."""

    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("id", "length", "rmsd", "rmsd_c4", "tm_score", "lddt")

    def add(self, **row) -> None:
        self.rows.append(row)

    def aggregate(self) -> dict:
        out = {"id": "mean", "length": float(np.mean([r["length"] for r in self.rows])) if self.rows else 0.0}
        for c in self.COLUMNS[2:]:
            vals = [r[c] for r in self.rows if c in r]
            out[c] = float(np.mean(vals)) if vals else float("nan")
        return out

    def to_tsv(self) -> str:
        lines = ["\t".join(self.COLUMNS)]
        for r in self.rows + ([self.aggregate()] if self.rows else []):
            lines.append("\t".join(_fmt(r.get(c, "")) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"columns": list(self.COLUMNS), "rows": self.rows, "aggregate": self.aggregate()}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate_pair(pred: RnaStructure, ref: RnaStructure) -> dict:
    """Aligned all-atom and C4' RMSD, C4' TM-score and all-atom lDDT."""
    if len(pred) != len(ref) or pred.atom_set != ref.atom_set:
        raise ValueError(f"evaluate: {pred.id} and {ref.id} are not index-paired")
    mask = pred.mask & ref.mask
    slot = ref.atom_set.index("C4'")
    c4 = mask[:, slot]
    pa, ra = pred.coords[c4, slot], ref.coords[c4, slot]
    row = {"id": ref.id, "length": len(ref),
           "rmsd": rmsd(pred.coords[mask], ref.coords[mask]),
           "rmsd_c4": rmsd(pa, ra),
           "tm_score": tm_score(pa, ra),
           "lddt": lddt(pred.coords, ref.coords, mask=mask)}
    return row
