"""Independent reference implementations used to cross-check the package.

Everything here is written from definitions with explicit loops or a
different algorithm (quaternion superposition instead of SVD, pair counting
instead of ranks) so agreement is evidence, not tautology.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from rnavq import tensor as T


# ---------------------------------------------------------------- superposition

def horn_superpose(mobile: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal rotation and translation via the quaternion eigenproblem."""
    cm, cr = mobile.mean(0), ref.mean(0)
    P, Q = mobile - cm, ref - cr
    S = P.T @ Q
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    w, V = np.linalg.eigh(N)
    q0, q1, q2, q3 = V[:, np.argmax(w)]
    R = np.array([
        [q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3, 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3, 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3],
    ])
    return R, cr - R @ cm


def rmsd_oracle(a: np.ndarray, b: np.ndarray) -> float:
    R, t = horn_superpose(a, b)
    total = 0.0
    for x, y in zip(a, b):
        d = R @ x + t - y
        total += d[0] ** 2 + d[1] ** 2 + d[2] ** 2
    return math.sqrt(total / len(a))


def tm_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Same candidate superpositions (contiguous fragments of L, L//2, L//4,
    at least 3 long), each fitted by quaternions and scored by a loop."""
    L = len(a)
    d0 = max(0.5, 1.24 * math.copysign(abs(L - 15.0) ** (1.0 / 3.0), L - 15.0) - 1.8)
    best = 0.0
    for frag in {L, L // 2, L // 4}:
        if frag < 3:
            continue
        for start in range(L - frag + 1):
            R, t = horn_superpose(a[start:start + frag], b[start:start + frag])
            s = 0.0
            for x, y in zip(a, b):
                d = R @ x + t - y
                s += 1.0 / (1.0 + (d @ d) / (d0 * d0))
            best = max(best, s / L)
    return best


# ---------------------------------------------------------------- lDDT

def lddt_oracle(pred: np.ndarray, ref: np.ndarray, cutoff: float = 15.0,
                thresholds=(0.5, 1.0, 2.0, 4.0)) -> float:
    """Ordered-pair loop over atoms of different residues; pred/ref (L, A, 3)."""
    L, A = ref.shape[:2]
    kept = [0] * len(thresholds)
    n = 0
    for i, a, j, b in itertools.product(range(L), range(A), range(L), range(A)):
        if i == j:
            continue
        dr = math.dist(ref[i, a], ref[j, b])
        if not dr < cutoff:
            continue
        dp = math.dist(pred[i, a], pred[j, b])
        n += 1
        for k, t in enumerate(thresholds):
            kept[k] += abs(dp - dr) < t
    return sum(k / n for k in kept) / len(thresholds)


# ---------------------------------------------------------------- sequences

def diversity_oracle(seqs: list[str]) -> float:
    """1 - mean pairwise Pearson correlation of normalised 3-mer counts."""
    kmers = ["".join(p) for p in itertools.product("AUCG", repeat=3)]

    def profile(s):
        counts = {k: 0 for k in kmers}
        for i in range(len(s) - 2):
            counts[s[i:i + 3]] += 1
        return [counts[k] / (len(s) - 2) for k in kmers]

    def pearson(x, y):
        mx, my = sum(x) / len(x), sum(y) / len(y)
        sxy = sum((u - mx) * (v - my) for u, v in zip(x, y))
        sxx = sum((u - mx) ** 2 for u in x)
        syy = sum((v - my) ** 2 for v in y)
        return sxy / math.sqrt(sxx * syy)

    profs = [profile(s) for s in seqs]
    rs = [pearson(profs[i], profs[j]) for i in range(len(seqs)) for j in range(i + 1, len(seqs))]
    return 1.0 - sum(rs) / len(rs)


def auroc_oracle(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted as one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def kl_oracle(p, q) -> float:
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def ngram_count_oracle(seqs: list[list[int]], n: int) -> dict:
    out: dict = {}
    for s in seqs:
        for i in range(len(s) - n + 1):
            g = tuple(s[i:i + n])
            out[g] = out.get(g, 0) + 1
    return out


# ---------------------------------------------------------------- gradients

def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, floor). The floor only matters for
    gradients that vanish identically, where both sides are roundoff."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(build, params: dict[str, T.Tensor], h: float = 1e-3, seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central
    differences of sum(w * build()) for a fixed random weighting w."""
    w = np.random.default_rng(seed).standard_normal(build().shape)

    def f():
        return float((build().data * w).sum())

    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        out = build()
        loss = T.sum(out * w)
    tape.backward(loss)
    errs = {}
    for name, p in params.items():
        analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        errs[name] = relative_error(analytic, numeric_grad(f, p.data, h))
    return errs
