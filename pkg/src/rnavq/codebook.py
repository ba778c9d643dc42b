"""Token n-gram mining, geometric consistency of n-gram instances, and
motif-conditioned token distributions."""
from __future__ import annotations

import itertools
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .fsq import TokenSequence
from .metrics import rmsd
from .structure import RnaStructure

MOTIF_CLASSES = ("HL", "IL", "J3", "background")


@dataclass
class NgramInstance:
    structure_id: str
    start: int
    tokens: tuple[int, ...]
    coords: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass
class NgramHit:
    ngram: tuple[int, ...]
    count: int
    instances: list[NgramInstance] = field(default_factory=list)


def mine_ngrams(corpus: Sequence[TokenSequence], n: int, top_k: int | None = 20) -> list[NgramHit]:
    """Exact overlapping n-gram counts, ranked by (count desc, ngram asc)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not corpus:
        raise ValueError("empty token corpus")
    if all(len(t) < n for t in corpus):
        raise ValueError(f"n={n} exceeds every sequence length")
    found: dict[tuple[int, ...], list[NgramInstance]] = defaultdict(list)
    for k, t in enumerate(corpus):
        idx = [int(i) for i in t.indices]
        sid = t.id or str(k)
        for start in range(len(idx) - n + 1):
            gram = tuple(idx[start:start + n])
            found[gram].append(NgramInstance(sid, start, gram))
    hits = [NgramHit(g, len(inst), inst) for g, inst in found.items()]
    hits.sort(key=lambda h: (-h.count, h.ngram))
    return hits if top_k is None else hits[:top_k]


def attach_coords(hit: NgramHit, structures: Mapping[str, RnaStructure]) -> NgramHit:
    for inst in hit.instances:
        s = structures[inst.structure_id]
        inst.coords = s.coords[inst.start:inst.start + inst.n]
    return hit


def _trace(x, slot: int | None) -> np.ndarray:
    c = x.coords if isinstance(x, NgramInstance) else np.asarray(x, dtype=np.float64)
    if c.ndim == 3:
        c = c[:, slot if slot is not None else 0]
    return c


def ngram_consistency(instances: Sequence, c4_slot: int | None = None) -> dict:
    """Kabsch-aligned RMSD over all unordered pairs of instance traces.

    Instances are (n, 3) traces, (n, A, 3) blocks (``c4_slot`` picks the
    atom) or :class:`NgramInstance` objects with coordinates attached.
    """
    if len(instances) < 2:
        raise ValueError("consistency needs at least two instances")
    traces = [_trace(x, c4_slot) for x in instances]
    if len({t.shape for t in traces}) != 1:
        raise ValueError("instances must all have the same length")
    k = len(traces)
    mat = np.zeros((k, k))
    for i, j in itertools.combinations(range(k), 2):
        mat[i, j] = mat[j, i] = rmsd(traces[i], traces[j], align=True)
    iu = np.triu_indices(k, 1)
    return {"mean_rmsd": float(mat[iu].mean()), "matrix": mat}


def token_distribution(tokens: Iterable[int], codebook_size: int, alpha: float = 0.0) -> np.ndarray:
    counts = np.bincount(np.asarray(list(tokens), dtype=np.int64), minlength=codebook_size).astype(np.float64)
    if len(counts) > codebook_size:
        raise ValueError("token index beyond codebook size")
    total = counts.sum() + alpha * codebook_size
    if total == 0:
        raise ValueError("empty token distribution")
    return (counts + alpha) / total


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) in nats; terms with p = 0 contribute nothing."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.size == 0:
        raise ValueError("KL needs two non-empty distributions over the same support")
    nz = p > 0
    if np.any(q[nz] == 0):
        return float("inf")
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def motif_kl(motif_tokens: Sequence[int], background_tokens: Sequence[int], codebook_size: int,
             alpha: float = 1.0) -> float:
    """KL(motif || background) of Laplace-smoothed token frequencies, in nats."""
    if len(motif_tokens) == 0:
        raise ValueError("empty motif token set")
    p = token_distribution(motif_tokens, codebook_size, alpha)
    q = token_distribution(background_tokens, codebook_size, alpha)
    return kl_divergence(p, q)


def motif_js(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Jensen-Shannon divergence (nats, in [0, ln 2]) and its square root."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("JS needs non-empty distributions")
    if a.shape != b.shape:
        raise ValueError("JS needs distributions over the same support")
    m = 0.5 * (a + b)
    js = 0.5 * kl_divergence(a, m) + 0.5 * kl_divergence(b, m)
    js = max(0.0, js)
    return js, float(np.sqrt(js))


# ---------------------------------------------------------------- motifs

@dataclass
class MotifAnnotation:
    structure_id: str
    motif: str
    residues: tuple[int, ...]
    closing_pairs: tuple[tuple[int, int], ...] = ()
    source: str = "dot-bracket"

    @property
    def size(self) -> int:
        """Number of unpaired loop nucleotides."""
        return len(self.residues)

    @property
    def span(self) -> tuple[int, ...]:
        """Loop nucleotides plus the nucleotides of its closing pairs."""
        flat = {i for p in self.closing_pairs for i in p}
        return tuple(sorted(flat | set(self.residues)))


_OPEN = {"(": ")", "[": "]", "{": "}", "<": ">"}
_CLOSE = {v: k for k, v in _OPEN.items()}


def parse_dot_bracket(db: str) -> list[tuple[int, int]]:
    stacks: dict[str, list[int]] = {k: [] for k in _OPEN}
    pairs = []
    for i, ch in enumerate(db):
        if ch in _OPEN:
            stacks[ch].append(i)
        elif ch in _CLOSE:
            st = stacks[_CLOSE[ch]]
            if not st:
                raise ValueError(f"unbalanced dot-bracket at position {i}")
            pairs.append((st.pop(), i))
        elif ch not in ".-:,_":
            raise ValueError(f"unexpected dot-bracket character {ch!r} at {i}")
    if any(stacks.values()):
        raise ValueError("unbalanced dot-bracket: unclosed brackets")
    return sorted(pairs)


def read_dot_brackets(path) -> dict[str, str]:
    """``id dot-bracket`` per line (whitespace separated); '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'id dot-bracket'")
        out[parts[0]] = parts[1]
    return out


def _nested(pairs: Sequence[tuple[int, int]], length: int) -> list[tuple[int, int]]:
    kept: list[tuple[int, int]] = []
    used: set[int] = set()
    for i, j in sorted((min(p), max(p)) for p in pairs):
        if not (0 <= i < j < length):
            raise ValueError(f"base pair ({i}, {j}) outside chain bounds [0, {length})")
        if i in used or j in used:
            raise ValueError(f"nucleotide paired twice in ({i}, {j})")
        if any(a < i < b < j or i < a < j < b for a, b in kept):
            warnings.warn(f"dropping crossing (pseudoknot) pair ({i}, {j})", stacklevel=3)
            continue
        kept.append((i, j))
        used.update((i, j))
    return kept


def annotate_motifs(s: RnaStructure | int, pairs: Sequence[tuple[int, int]], structure_id: str | None = None,
                    source: str = "dot-bracket") -> list[MotifAnnotation]:
    """Classify loops by the number of helices that close them.

    One helix: hairpin (HL). Two: internal loop or bulge (IL); directly
    stacked pairs are not loops. Three: three-way junction (J3). Residues
    outside every motif span, including higher-order junctions and the
    exterior loop, form one trailing background annotation.
    ``s`` may be a structure or just a chain length.
    """
    if isinstance(s, RnaStructure):
        length, structure_id = len(s), s.id if structure_id is None else structure_id
    else:
        length, structure_id = int(s), structure_id or ""
    kept = _nested(pairs, length)
    partner = {}
    for i, j in kept:
        partner[i], partner[j] = j, i
    out = []
    for i, j in kept:
        inner, unpaired = [], []
        k = i + 1
        while k < j:
            if k in partner and partner[k] > k:
                inner.append((k, partner[k]))
                k = partner[k] + 1
            else:
                unpaired.append(k)
                k += 1
        branches = len(inner) + 1
        if branches == 1:
            motif = "HL"
        elif branches == 2:
            if not unpaired:
                continue
            motif = "IL"
        elif branches == 3:
            motif = "J3"
        else:
            continue
        out.append(MotifAnnotation(structure_id, motif, tuple(unpaired), ((i, j), *inner), source))
    covered = {r for a in out for r in a.span}
    rest = tuple(r for r in range(length) if r not in covered)
    if rest:
        out.append(MotifAnnotation(structure_id, "background", rest, (), source))
    return out


COMPLEMENTARY = frozenset({("A", "U"), ("U", "A"), ("G", "C"), ("C", "G"), ("G", "U"), ("U", "G")})


def heuristic_pairs(s: RnaStructure, lo: float = 9.5, hi: float = 11.5, min_loop: int = 3) -> list[tuple[int, int]]:
    """Fallback base pairs: complementary bases with C1'-C1' distance in [lo, hi].

    Candidates are accepted greedily by closeness to the window centre,
    skipping any that would cross or reuse a nucleotide.
    """
    if "C1'" not in s.atom_set.names:
        raise ValueError(f"{s.id}: heuristic pairing needs C1' atoms (atom set {s.atom_set.tag})")
    c1, m = s.atom("C1'")
    mid = 0.5 * (lo + hi)
    cands = []
    for i in range(len(s)):
        for j in range(i + min_loop + 1, len(s)):
            if not (m[i] and m[j]) or (s.sequence[i], s.sequence[j]) not in COMPLEMENTARY:
                continue
            d = float(np.linalg.norm(c1[i] - c1[j]))
            if lo <= d <= hi:
                cands.append((abs(d - mid), i, j))
    chosen: list[tuple[int, int]] = []
    used: set[int] = set()
    for _, i, j in sorted(cands):
        if i in used or j in used or any(a < i < b < j or i < a < j < b for a, b in chosen):
            continue
        chosen.append((i, j))
        used.update((i, j))
    return sorted(chosen)


def motif_token_sets(annotations: Sequence[MotifAnnotation], tokens: Mapping[str, TokenSequence]) -> dict[str, list[int]]:
    """Token indices per motif class; background is every residue outside all motifs."""
    out: dict[str, list[int]] = {c: [] for c in MOTIF_CLASSES}
    covered: dict[str, set[int]] = defaultdict(set)
    for a in annotations:
        idx = tokens[a.structure_id].indices
        out[a.motif].extend(int(idx[r]) for r in a.span)
        covered[a.structure_id].update(a.span)
    for sid, t in tokens.items():
        out["background"].extend(int(x) for r, x in enumerate(t.indices) if r not in covered[sid])
    return out


def motif_divergence_table(sets: Mapping[str, Sequence[int]], codebook_size: int, alpha: float = 1.0) -> dict:
    """KL of each motif against background, and pairwise JS between classes."""
    present = [c for c in MOTIF_CLASSES if sets.get(c)]
    dists = {c: token_distribution(sets[c], codebook_size, alpha) for c in present}
    kl = {}
    if "background" in dists:
        for c in present:
            if c != "background":
                kl[c] = motif_kl(sets[c], sets["background"], codebook_size, alpha)
    js = {}
    for a, b in itertools.combinations(present, 2):
        js[(a, b)] = motif_js(dists[a], dists[b])
    return {"classes": present, "kl": kl, "js": js, "counts": {c: len(sets[c]) for c in present}}


def format_divergence_table(table: dict) -> str:
    lines = ["kind\tclass_a\tclass_b\tvalue\tdistance"]
    for c, v in table["kl"].items():
        lines.append(f"kl\t{c}\tbackground\t{v:.6f}\t")
    for (a, b), (d, dist) in table["js"].items():
        lines.append(f"js\t{a}\t{b}\t{d:.6f}\t{dist:.6f}")
    return "\n".join(lines) + "\n"


def format_ngram_table(hits: Sequence[NgramHit], consistency: Mapping[tuple[int, ...], float] | None = None) -> str:
    lines = ["rank\tngram\tcount\tn_structures\tmean_rmsd"]
    for r, h in enumerate(hits, 1):
        mr = "" if consistency is None or h.ngram not in consistency else f"{consistency[h.ngram]:.4f}"
        n_struct = len({i.structure_id for i in h.instances})
        lines.append(f"{r}\t{' '.join(map(str, h.ngram))}\t{h.count}\t{n_struct}\t{mr}")
    return "\n".join(lines) + "\n"
