"""Overfit the toy autoencoder on synthetic helices and report how well
the training set is reconstructed from its own tokens.

    python scripts/toy_reconstruction.py --steps 2000 --out runs/toy
"""
import argparse
import time
from pathlib import Path

import numpy as np

from rnavq import tensor as T
from rnavq.config import dump_config, toy_config
from rnavq.flow import SamplerConfig
from rnavq.fsq import format_utilization, utilization
from rnavq.metrics import MetricsReport, evaluate_pair
from rnavq.model import RnaAutoencoder, corpus_scale
from rnavq.structure import synthetic_corpus
from rnavq.train import LOG_HEADER, format_log_row, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--helices", type=int, default=32)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--sampler-steps", type=int, default=100)
    ap.add_argument("--rotate", action="store_true", help="train with random rotation augmentation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = toy_config().with_seed(args.seed)
    cfg.train.steps = args.steps
    cfg.train.augment_rotation = args.rotate
    dump_config(cfg, out / "config.yaml")

    data = synthetic_corpus(args.helices, 20, 40, args.seed, tag=cfg.model.atom_set)
    model = RnaAutoencoder(cfg.model, T.make_rng(args.seed, 0), corpus_scale(data))
    t0 = time.perf_counter()
    with open(out / "train_log.tsv", "w") as log:
        log.write(LOG_HEADER + "\n")

        def on_log(row):
            log.write(format_log_row(row) + "\n")
            if row["step"] % 100 == 0:
                print(f"step {row['step']:5d}  loss {row['flow_loss']:.4f}  {time.perf_counter() - t0:.0f} s",
                      flush=True)

        train(model, data, cfg.train, out_dir=out, on_log=on_log)

    sampler = SamplerConfig(steps=args.sampler_steps)
    report = MetricsReport([evaluate_pair(model.reconstruct(s, sampler, T.make_rng(args.seed, 1, k)), s)
                            for k, s in enumerate(data)])
    (out / "metrics.tsv").write_text(report.to_tsv())
    tokens = [model.tokenize(s)[1] for s in data]
    rm = np.median([r["rmsd"] for r in report.rows])
    tm = np.median([r["tm_score"] for r in report.rows])
    print(f"median RMSD {rm:.3f} A, median TM {tm:.3f}, utilization "
          f"{format_utilization(utilization(tokens, model.fsq_cfg))}%, total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
