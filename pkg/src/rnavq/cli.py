"""Command-line entry point: ``rnavq <command> [options]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Each command writes ``manifest.<command>.json`` into the output directory
with the config hash, package version, seed and input/output digests.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .codebook import (annotate_motifs, attach_coords, format_divergence_table, format_ngram_table, heuristic_pairs,
                       mine_ngrams, motif_divergence_table, motif_token_sets, ngram_consistency, parse_dot_bracket,
                       read_dot_brackets)
from .config import ConfigError, RunConfig, dump_config, load_config
from .fsq import format_utilization, read_tokens, utilization, write_tokens
from .invfold import (InverseFolder, featurize_with, format_sweep, load_inverse_folder, save_inverse_folder,
                      teacher_forced_recovery, tradeoff_sweep, train_inverse_folder, write_fasta, Design)
from .metrics import MetricsReport, evaluate_pair, lddt_per_residue
from .model import RnaAutoencoder, corpus_scale
from .structure import (PdbParseError, RnaStructure, load_corpus, read_pdb, save_corpus, split_dataset,
                        synthetic_corpus, to_pdb)
from .train import LOG_HEADER, format_log_row, train

log = logging.getLogger("rnavq")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2
        raise UsageError(message)


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: Sequence[Path], outputs: Sequence[Path],
                   extra: dict | None = None) -> Path:
    """Everything needed to rerun the command; deliberately no timestamps."""
    man = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        **(extra or {}),
    }
    path = out / f"manifest.{command}.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return path


def _pdb_files(paths: Sequence[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in (".pdb", ".ent"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such input: {p}")
    return files


def load_structures(paths: Sequence[str], tag: str) -> list[RnaStructure]:
    """Corpus containers (.bin) or PDB files/directories, restricted to ``tag``."""
    out = []
    for p in paths:
        if Path(p).suffix == ".bin":
            out += load_corpus(p)
        else:
            for f in _pdb_files([p]):
                out += read_pdb(f, tag)
    return [s if s.atom_set.tag == tag else s.select(tag) for s in out]


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _default(args, name: str, fallback: Path) -> Path:
    v = getattr(args, name, None)
    return Path(v) if v else fallback


# ---------------------------------------------------------------- commands

def cmd_ingest(args, cfg: RunConfig, out: Path) -> list[Path]:
    tag = cfg.model.atom_set
    sources = args.inputs or cfg.data.pdb
    if sources:
        structures = load_structures(sources, tag)
        inputs = _pdb_files([s for s in sources if Path(s).suffix != ".bin"])
    else:
        n = args.synthetic if args.synthetic is not None else cfg.data.synthetic
        structures = synthetic_corpus(n, cfg.data.min_len, cfg.data.max_len, cfg.seed, tag)
        inputs = []
    if not structures:
        raise ConfigError("ingest: no structures found")
    corpus_path = out / "corpus.bin"
    save_corpus(corpus_path, structures)
    parts = split_dataset(structures, cfg.data.split, cfg.seed)
    split_path = out / "split.json"
    split_path.write_text(json.dumps({k: [s.id for s in v] for k, v in parts.items()}, indent=1) + "\n")
    print(f"ingested {len(structures)} structures ({tag}): "
          + ", ".join(f"{k}={len(v)}" for k, v in parts.items()))
    args._inputs = inputs
    return [corpus_path, split_path]


def _split(structures: list[RnaStructure], out: Path, name: str, split_file: str | None) -> list[RnaStructure]:
    path = Path(split_file) if split_file else out / "split.json"
    if not path.is_file():
        return structures
    ids = set(json.loads(path.read_text())[name])
    return [s for s in structures if s.id in ids]


def cmd_train(args, cfg: RunConfig, out: Path) -> list[Path]:
    corpus = _default(args, "corpus", out / "corpus.bin")
    structures = _split(load_structures([str(corpus)], cfg.model.atom_set), out, "train", args.split)
    if not structures:
        raise ConfigError("train: training corpus is empty")
    if args.steps is not None:
        cfg.train.steps = args.steps
    model = RnaAutoencoder(cfg.model, T.make_rng(cfg.seed, 0), corpus_scale(structures))
    log_path = out / "train_log.tsv"
    rows = train(model, structures, cfg.train, out, resume=args.resume,
                 on_log=lambda r: log.info(format_log_row(r)))
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode) as fh:
        if mode == "w":
            fh.write(LOG_HEADER + "\n")
        for r in rows:
            fh.write(format_log_row(r) + "\n")
    if rows:
        print(f"trained to step {rows[-1]['step']}: flow_loss {rows[-1]['flow_loss']:.4f}")
    args._inputs = [corpus]
    ckpts = sorted(out.glob("ckpt_step*.bin"))
    return [out / "model.ckpt", log_path, *ckpts]


def _load_model(args, out: Path) -> RnaAutoencoder:
    path = _default(args, "checkpoint", out / "model.ckpt")
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    args._inputs = getattr(args, "_inputs", []) + [path]
    return RnaAutoencoder.load(path)[0]


def cmd_tokenize(args, cfg: RunConfig, out: Path) -> list[Path]:
    model = _load_model(args, out)
    sources = args.inputs or [str(out / "corpus.bin")]
    structures = load_structures(sources, model.atoms.tag)
    tokens = _pmap(lambda s: model.tokenize(s)[1], structures, args.threads)
    path = out / "tokens.tsv"
    write_tokens(path, tokens)
    if tokens:
        print(f"tokenized {len(tokens)} structures; codebook utilization "
              f"{format_utilization(utilization(tokens, model.fsq_cfg))}% of {model.fsq_cfg.codebook_size}")
    else:
        print("tokenized 0 structures")
    args._inputs += [Path(s) for s in sources]
    return [path]


def cmd_reconstruct(args, cfg: RunConfig, out: Path) -> list[Path]:
    model = _load_model(args, out)
    tok_path = _default(args, "tokens", out / "tokens.tsv")
    refs = {s.id: s for s in load_structures([str(_default(args, "corpus", out / "corpus.bin"))], model.atoms.tag)}
    tokens = read_tokens(tok_path)
    missing = [t.id for t in tokens if t.id not in refs]
    if missing:
        raise ConfigError(f"reconstruct: no sequence for token records {missing[:5]}")

    def one(k_t):
        k, t = k_t
        ref = refs[t.id]
        s = model.decode_tokens(t, ref.sequence, cfg.sampler, T.make_rng(cfg.seed, 1, k))
        return RnaStructure(t.id, ref.sequence, ref.atom_set, s.coords, ref.mask.copy(), ref.chain_id)

    recon = _pmap(one, list(enumerate(tokens)), args.threads)
    bin_path, pdb_path = out / "recon.bin", out / "recon.pdb"
    save_corpus(bin_path, recon)
    pdb_path.write_text(to_pdb(recon, models=True))
    print(f"reconstructed {len(recon)} structures with {cfg.sampler.steps} sampler steps")
    args._inputs += [tok_path]
    return [bin_path, pdb_path]


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> list[Path]:
    pred_path = _default(args, "pred", out / "recon.bin")
    ref_path = _default(args, "ref", out / "corpus.bin")
    preds = load_structures([str(pred_path)], args.atom_set or cfg.model.atom_set)
    refs = {s.id: s for s in load_structures([str(ref_path)], args.atom_set or cfg.model.atom_set)}
    pairs = [(p, refs[p.id]) for p in preds if p.id in refs]
    if not pairs:
        raise ConfigError("evaluate: no predicted structure has a matching reference id")
    rows = _pmap(lambda pr: evaluate_pair(*pr), pairs, args.threads)
    report = MetricsReport(rows)
    tsv, js = out / "metrics.tsv", out / "metrics.json"
    tsv.write_text(report.to_tsv())
    js.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    bfac = [np.nan_to_num(lddt_per_residue(p.coords, r.coords, mask=p.mask & r.mask)) for p, r in pairs]
    pdb = out / "evaluated.pdb"
    pdb.write_text(to_pdb([p for p, _ in pairs], bfactors=bfac, models=True))
    agg = report.aggregate()
    print(f"evaluated {len(rows)} pairs: rmsd {agg['rmsd']:.3f}  rmsd_c4 {agg['rmsd_c4']:.3f}  "
          f"tm {agg['tm_score']:.3f}  lddt {agg['lddt']:.3f}")
    args._inputs = [pred_path, ref_path]
    return [tsv, js, pdb]


def cmd_analyze(args, cfg: RunConfig, out: Path) -> list[Path]:
    tok_path = _default(args, "tokens", out / "tokens.tsv")
    corpus_path = _default(args, "corpus", out / "corpus.bin")
    tokens = read_tokens(tok_path)
    if not tokens:
        raise ConfigError("analyze: token file is empty")
    structures = {s.id: s for s in load_corpus(corpus_path)}
    outputs = []
    for n in cfg.analysis.ngram_sizes:
        if all(len(t) < n for t in tokens):
            log.warning("skipping n=%d: longer than every token sequence", n)
            continue
        hits = mine_ngrams(tokens, n, cfg.analysis.top_k)
        cons = {}
        for h in hits:
            if h.count >= 2 and n >= 3:
                attach_coords(h, structures)
                slot = structures[h.instances[0].structure_id].atom_set.index("C4'")
                cons[h.ngram] = ngram_consistency(h.instances, slot)["mean_rmsd"]
        path = out / f"ngrams_n{n}.tsv"
        path.write_text(format_ngram_table(hits, cons))
        outputs.append(path)
        if hits and hits[0].count >= 1:
            top = attach_coords(hits[0], structures)
            models = [RnaStructure(f"{i.structure_id}_{i.start}", structures[i.structure_id].sequence[i.start:i.start + n],
                                   structures[i.structure_id].atom_set, i.coords,
                                   structures[i.structure_id].mask[i.start:i.start + n]) for i in top.instances]
            pdb = out / f"ngram_instances_n{n}.pdb"
            pdb.write_text(to_pdb(models, models=True))
            outputs.append(pdb)
    db_path = args.dotbracket or cfg.analysis.dotbracket
    dbs = read_dot_brackets(db_path) if db_path else {}
    annotations = []
    for sid in (t.id for t in tokens):
        s = structures[sid]
        if sid in dbs:
            annotations += annotate_motifs(len(s), parse_dot_bracket(dbs[sid]), sid, "dot-bracket")
        elif "C1'" in s.atom_set.names:
            annotations += annotate_motifs(len(s), heuristic_pairs(s), sid, "heuristic")
    size = read_codebook_size(tokens)
    sets = motif_token_sets(annotations, {t.id: t for t in tokens})
    table = motif_divergence_table(sets, size, cfg.analysis.smoothing)
    sources = sorted({a.source for a in annotations}) or ["none"]
    div = out / "motif_divergence.tsv"
    div.write_text(f"# annotation source: {','.join(sources)}\n" + format_divergence_table(table))
    outputs.append(div)
    print(f"analyzed {len(tokens)} token sequences; motif counts {table['counts']}")
    args._inputs = [tok_path, corpus_path] + ([Path(db_path)] if db_path else [])
    return outputs


def read_codebook_size(tokens) -> int:
    return int(np.prod(tokens[0].config.levels))


def _invfold_inputs(args, cfg: RunConfig, out: Path):
    ae = _load_model(args, out)
    corpus_path = _default(args, "corpus", out / "corpus.bin")
    structures = load_structures([str(corpus_path)], ae.atoms.tag)
    structures = _split(structures, out, args.subset, args.split) if args.subset else structures
    if not structures:
        raise ConfigError("no structures for inverse folding")
    args._inputs += [corpus_path]
    return ae, featurize_with(ae, structures)


def cmd_invfold_train(args, cfg: RunConfig, out: Path) -> list[Path]:
    ae, examples = _invfold_inputs(args, cfg, out)
    frozen = {k: v.copy() for k, v in ae.state_dict().items()}
    if args.steps is not None:
        cfg.invfold_train.steps = args.steps
    model = InverseFolder(cfg.invfold, examples[0].cond.shape[1], T.make_rng(cfg.seed, 2))
    rows = train_inverse_folder(model, examples, cfg.invfold_train,
                                on_log=lambda r: log.info("%d\t%.6f", r["step"], r["loss"]))
    after = ae.state_dict()
    if any(not np.array_equal(frozen[k], after[k]) for k in frozen):
        raise RuntimeError("frozen autoencoder weights changed during inverse-folding training")
    path, log_path = out / "invfold.ckpt", out / "invfold_log.tsv"
    save_inverse_folder(path, model, {"atom_set": ae.atoms.tag})
    log_path.write_text("step\tloss\tgrad_norm\n" + "".join(
        f"{r['step']}\t{r['loss']:.17g}\t{r['grad_norm']:.17g}\n" for r in rows))
    print(f"inverse folder trained {len(rows)} steps; teacher-forced recovery "
          f"{teacher_forced_recovery(model, examples):.3f}")
    return [path, log_path]


def _load_folder(args, out: Path) -> InverseFolder:
    path = _default(args, "invfold", out / "invfold.ckpt")
    if not path.is_file():
        raise FileNotFoundError(f"inverse-folding checkpoint not found: {path}")
    args._inputs = getattr(args, "_inputs", []) + [path]
    return load_inverse_folder(path)[0]


def cmd_invfold_sample(args, cfg: RunConfig, out: Path) -> list[Path]:
    folder = _load_folder(args, out)
    _, examples = _invfold_inputs(args, cfg, out)
    designs = []
    for k, ex in enumerate(examples):
        seqs = folder.sample(ex.cond, ex.v_local, args.temperature, T.make_rng(cfg.seed, 3, k), args.samples)
        designs += [Design(ex.id, args.temperature, j, s) for j, s in enumerate(seqs)]
    path = out / "designs.fasta"
    write_fasta(path, designs)
    print(f"wrote {len(designs)} designs at T={args.temperature}")
    return [path]


def cmd_sweep(args, cfg: RunConfig, out: Path) -> list[Path]:
    folder = _load_folder(args, out)
    _, examples = _invfold_inputs(args, cfg, out)
    rows, designs = tradeoff_sweep(folder, examples, cfg.sweep_temperatures, cfg.sweep_samples, cfg.seed)
    path, fasta = out / "sweep.tsv", out / "sweep_designs.fasta"
    path.write_text(format_sweep(rows))
    write_fasta(fasta, designs)
    print(format_sweep(rows), end="")
    return [path, fasta]


COMMANDS = {
    "ingest": cmd_ingest, "train": cmd_train, "tokenize": cmd_tokenize, "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate, "analyze": cmd_analyze, "invfold-train": cmd_invfold_train,
    "invfold-sample": cmd_invfold_sample, "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: config 'out')")
    common.add_argument("--threads", type=int, default=1, help="worker threads for per-structure work")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="rnavq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("ingest", parents=[common], help="parse PDB files or synthesize helices into a corpus")
    c.add_argument("inputs", nargs="*", help="PDB files or directories")
    c.add_argument("--synthetic", type=int, help="number of synthetic helices when no inputs are given")

    c = sub.add_parser("train", parents=[common], help="train the autoencoder")
    c.add_argument("--corpus")
    c.add_argument("--split", help="split.json (default: <out>/split.json if present)")
    c.add_argument("--steps", type=int)
    c.add_argument("--resume", help="training checkpoint to resume from")

    c = sub.add_parser("tokenize", parents=[common], help="write FSQ token sequences")
    c.add_argument("inputs", nargs="*", help="corpus .bin or PDB inputs (default: <out>/corpus.bin)")
    c.add_argument("--checkpoint")

    c = sub.add_parser("reconstruct", parents=[common], help="decode tokens back to coordinates")
    c.add_argument("--checkpoint")
    c.add_argument("--tokens")
    c.add_argument("--corpus", help="source of sequences and atom masks")

    c = sub.add_parser("evaluate", parents=[common], help="RMSD / TM-score / lDDT of predictions vs references")
    c.add_argument("--pred")
    c.add_argument("--ref")
    c.add_argument("--atom-set", dest="atom_set")

    c = sub.add_parser("analyze", parents=[common], help="n-gram mining and motif token divergences")
    c.add_argument("--tokens")
    c.add_argument("--corpus")
    c.add_argument("--dotbracket", help="file of 'id dot-bracket' lines")

    for name, help_ in (("invfold-train", "train the inverse-folding adapter and decoder"),
                        ("invfold-sample", "sample sequences for structures"),
                        ("sweep", "temperature sweep of recovery and diversity")):
        c = sub.add_parser(name, parents=[common], help=help_)
        c.add_argument("--checkpoint", help="frozen autoencoder (B6 atom set)")
        c.add_argument("--corpus")
        c.add_argument("--split")
        c.add_argument("--subset", choices=("train", "val", "test"), help="restrict to one split")
        if name == "invfold-train":
            c.add_argument("--steps", type=int)
        else:
            c.add_argument("--invfold", help="inverse-folding checkpoint")
        if name == "invfold-sample":
            c.add_argument("--temperature", type=float, default=0.1)
            c.add_argument("--samples", type=int, default=16)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"rnavq: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        if args.out:
            cfg.out = args.out
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.validate()
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        args._inputs = []
        outputs = COMMANDS[args.command](args, cfg, out)
        dump_config(cfg, out / f"config.{args.command}.yaml")
        write_manifest(out, args.command, cfg, [Path(p) for p in args._inputs], outputs)
    except (ConfigError, PdbParseError) as e:
        print(f"rnavq {args.command}: invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"rnavq {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
