"""Small context ablation on synthetic scenes (a few minutes on one core).

Pass --full for the acceptance-scale run: 3 seeds, 1600 training scenes (about 10 min).
"""

import argparse
import logging

from handctx.ablation import ablate, context_matrix
from handctx.detector import ToyDetectorConfig

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

if args.full:
    seeds, n_train, cfg = (0, 1, 2), 1600, ToyDetectorConfig()
else:
    seeds, n_train, cfg = (0, 1, 2), 100, ToyDetectorConfig(epochs=10)
table = ablate(context_matrix(cfg), seeds, n_train=n_train, n_val=200 if args.full else 100)
print(table.to_text())
