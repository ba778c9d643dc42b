"""Codebook-size by atom-set grid: train one autoencoder per cell, then
report codebook utilization and reconstruction quality on held-out data."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, toy_config
from .flow import SamplerConfig
from .fsq import PRESETS, format_utilization, utilization
from .metrics import evaluate_pair
from .model import RnaAutoencoder, corpus_scale
from .structure import RnaStructure
from .train import train

GRID_HEADER = "atom_set\tcodebook\tlevels\tutil_pct\trmsd\trmsd_c4\ttm_score\tlddt\ttrain_s"


@dataclass
class GridConfig:
    atom_sets: tuple[str, ...] = ("A1", "A10", "A11")
    codebook_sizes: tuple[int, ...] = (240, 1000, 4375)
    steps: int = 500
    sampler_steps: int = 50
    seed: int = 0

    def validate(self) -> None:
        unknown = [c for c in self.codebook_sizes if c not in PRESETS]
        if unknown:
            raise ValueError(f"no level preset for codebook sizes {unknown}; known {sorted(PRESETS)}")


def run_cell(base: RunConfig, atom_set: str, codebook: int, train_set: Sequence[RnaStructure],
             eval_set: Sequence[RnaStructure], grid: GridConfig) -> dict:
    cfg = copy.deepcopy(base)
    cfg.model.atom_set = atom_set
    cfg.model.levels = PRESETS[codebook]
    cfg.train.steps = grid.steps
    cfg.train.seed = grid.seed
    tr = [s.select(atom_set) for s in train_set]
    ev = [s.select(atom_set) for s in eval_set]
    model = RnaAutoencoder(cfg.model, T.make_rng(grid.seed, 0), corpus_scale(tr))
    t0 = time.perf_counter()
    train(model, tr, cfg.train)
    elapsed = time.perf_counter() - t0
    sampler = SamplerConfig(steps=grid.sampler_steps)
    tokens = [model.tokenize(s)[1] for s in ev]
    rows = [evaluate_pair(model.decode_tokens(t, s.sequence, sampler, T.make_rng(grid.seed, 1, k)), s)
            for k, (t, s) in enumerate(zip(tokens, ev))]
    return {"atom_set": atom_set, "codebook": codebook, "levels": PRESETS[codebook],
            "util_pct": 100.0 * utilization(tokens, model.fsq_cfg),
            **{m: float(np.mean([r[m] for r in rows])) for m in ("rmsd", "rmsd_c4", "tm_score", "lddt")},
            "train_s": elapsed}


def run_grid(train_set: Sequence[RnaStructure], eval_set: Sequence[RnaStructure], grid: GridConfig,
             base: RunConfig | None = None, on_row: Callable[[dict], None] | None = None) -> list[dict]:
    """Cells run in (atom set, codebook) order. Structures must carry the
    largest requested atom set; each cell selects its own subset."""
    grid.validate()
    if not train_set or not eval_set:
        raise ValueError("grid needs non-empty training and evaluation sets")
    base = base or toy_config()
    rows = []
    for atom_set in grid.atom_sets:
        for codebook in grid.codebook_sizes:
            row = run_cell(base, atom_set, codebook, train_set, eval_set, grid)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def format_grid_row(r: dict) -> str:
    return (f"{r['atom_set']}\t{r['codebook']}\t{','.join(map(str, r['levels']))}\t"
            f"{format_utilization(r['util_pct'] / 100.0)}\t{r['rmsd']:.3f}\t{r['rmsd_c4']:.3f}\t"
            f"{r['tm_score']:.3f}\t{r['lddt']:.3f}\t{r['train_s']:.0f}")


def format_grid(rows: Sequence[dict]) -> str:
    return "\n".join([GRID_HEADER, *map(format_grid_row, rows)]) + "\n"
