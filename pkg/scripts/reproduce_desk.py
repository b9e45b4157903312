#!/usr/bin/env python3
"""Run the desk-scale study end to end: generate data, train, evaluate,
and print a results table for the 1D elliptic and transfer presets.

Usage:
    python scripts/reproduce_desk.py [--out runs/] [--presets a,b,...]

Each preset writes data/, ckpt/ and metrics under <out>/<preset>/.
"""

import argparse
import json
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO / "src"))

from nswave import pipeline as pl  # noqa: E402
from nswave.model import MetaModel  # noqa: E402

DEFAULT = ["schrodinger1d_desk", "divergence1d_desk", "rte1d_desk"]


def run_preset(name: str, out_root: Path) -> dict:
    cfg = pl.load_config(REPO / "configs" / f"{name}.json")
    out = out_root / name
    data_dir = out / "data"
    t0 = time.time()
    if not (data_dir / "dataset.json").exists():
        pl.generate_dataset(cfg, data_dir)
    t_gen = time.time() - t0
    train_set = pl.load_sampleset(data_dir, "train")
    test_set = pl.load_sampleset(data_dir, "test")
    mdl = MetaModel(cfg.model)
    metrics = pl.train(mdl, train_set, test_set, cfg.training)
    if cfg.training.operator_samples > 0:
        k = min(cfg.training.operator_samples, test_set.n_eta)
        metrics.operator_error = pl.operator_error(mdl, cfg.problem,
                                                   test_set.eta[:k])
    pl.save_checkpoint(mdl, out / "ckpt")
    metrics.save(out / "ckpt")
    pl.write_run_json(out / "ckpt", cfg.to_dict(),
                      {"command": "reproduce_desk", "gen_time": t_gen})
    return {"preset": name, "epochs": metrics.epochs,
            "train": metrics.train_error, "test": metrics.test_error,
            "op": metrics.operator_error, "wall": metrics.wall_time}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs")
    ap.add_argument("--presets", default=",".join(DEFAULT))
    args = ap.parse_args()
    rows = []
    for name in args.presets.split(","):
        print(f"== {name}")
        rows.append(run_preset(name.strip(), Path(args.out)))
        print(json.dumps(rows[-1], indent=2))
    print(f"\n{'preset':<22} {'epochs':>6} {'train':>10} {'test':>10} "
          f"{'operator':>10} {'minutes':>8}")
    for r in rows:
        op = f"{r['op']:.3e}" if r["op"] is not None else "-"
        print(f"{r['preset']:<22} {r['epochs']:>6} {r['train']:>10.3e} "
              f"{r['test']:>10.3e} {op:>10} {r['wall'] / 60:>8.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
