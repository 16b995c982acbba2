#!/usr/bin/env python3
"""
Run the full comparison grid: generate data, train every mode, evaluate, analyze gradients.

The defaults are the full grid (2000 source, 2000 target and 200 test images at
128x128, 40 epochs, seeds 1 2 3); the quick and smoke lines below shrink it.

For each seed this renders a labeled source split, an unlabeled target split and a
labeled target test split, trains baseline/em/msl on them and evaluates all three
checkpoints on the target test split. The per-seed and mean tables are printed at the end.

Usage:
  python scripts/run_pipeline.py --out runs/pipeline
  python scripts/run_pipeline.py --out runs/quick --seeds 1 --epochs 10 --count 200 --test-count 50
  python scripts/run_pipeline.py --out runs/smoke --epochs 2 --count 16 --test-count 8 --config configs/default.ini
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from centeruda.cli import LOG_FORMAT, run
from centeruda.train import LAST_CHECKPOINT
from centeruda.utils.config import MODES

logger = logging.getLogger(__name__)

# distinct scene streams for the three splits of one seed
TARGET_SEED_OFFSET = 1000
TEST_SEED_OFFSET = 2000


class Pipeline:
    """Drives the CLI commands for one output root."""

    def __init__(self, out_dir, seeds, epochs, count, test_count, config=None, modes=MODES):
        self.out_dir = Path(out_dir)
        self.seeds = seeds
        self.epochs = epochs
        self.count = count
        self.test_count = test_count
        self.config = config
        self.modes = modes

    def _run(self, *argv):
        argv = [str(a) for a in argv]
        if self.config:
            argv += ["--config", self.config]
        logger.info(f"centeruda {' '.join(argv)}")
        code = run(argv + ["--deterministic"])
        if code != 0:
            raise RuntimeError(f"command failed with exit code {code}: {' '.join(argv)}")

    def _generate(self, out, seed, domain, labeled, count):
        self._run("generate-data", "--domain", domain, "--labeled", str(labeled).lower(), "--count", count,
                  "--seed", seed, "--output-dir", out)
        return out / "annotations.json"

    def run_seed(self, seed):
        root = self.out_dir / f"seed{seed}"
        source = self._generate(root / "data" / "source", seed, "source", True, self.count)
        target = self._generate(root / "data" / "target", seed + TARGET_SEED_OFFSET, "target", False, self.count)
        test = self._generate(root / "data" / "test", seed + TEST_SEED_OFFSET, "target", True, self.test_count)

        checkpoints = []
        for mode in self.modes:
            run_dir = root / mode
            self._run("train", "--mode", mode, "--seed", seed, "--epochs", self.epochs,
                      "--source-manifest", source, "--target-manifest", target, "--output-dir", run_dir)
            checkpoints += ["--checkpoint", run_dir / LAST_CHECKPOINT]

        self._run("evaluate", *checkpoints, "--test-manifest", test, "--source-manifest", source,
                  "--output-dir", root)
        table = pd.read_csv(root / "evaluation" / "comparison.csv", index_col=0)
        table.insert(0, "seed", seed)
        return table

    def run(self):
        tables = [self.run_seed(seed) for seed in self.seeds]
        self._run("analyze-gradients", "--output-dir", self.out_dir)

        per_seed = pd.concat(tables)
        per_seed.index.name = "mode"
        mean = per_seed.drop(columns="seed").groupby(level=0, sort=False).mean()
        per_seed.to_csv(self.out_dir / "per_seed.csv")
        mean.to_csv(self.out_dir / "summary.csv")
        return per_seed, mean


def build_parser():
    parser = argparse.ArgumentParser(description="Baseline vs em vs msl comparison grid")
    parser.add_argument("--out", default="runs/pipeline", help="output root")
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3], help="seeds to run")
    parser.add_argument("--epochs", type=int, default=40, help="training epochs per mode")
    parser.add_argument("--count", type=int, default=2000, help="images per training split")
    parser.add_argument("--test-count", type=int, default=200, help="images in the target test split")
    parser.add_argument("--config", help="INI config passed to every command")
    parser.add_argument("--modes", nargs="+", default=list(MODES), choices=MODES, help="training modes")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    args = build_parser().parse_args(argv)

    pipeline = Pipeline(args.out, args.seeds, args.epochs, args.count, args.test_count, args.config, args.modes)
    try:
        per_seed, mean = pipeline.run()
    except RuntimeError as e:
        logger.error(str(e))
        sys.exit(2)

    fmt = lambda v: f"{v:.4f}"  # noqa: E731
    print("\nPer seed:")
    print(per_seed.to_string(float_format=fmt, na_rep="-"))
    print("\nMean over seeds:")
    print(mean.to_string(float_format=fmt, na_rep="-"))


if __name__ == "__main__":
    main()
