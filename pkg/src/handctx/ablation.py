"""Ablation runs: every config trained under several seeds, reported as mean and sd of val AP.

Train and val scenes for a seed come from separate named sub-streams of that
seed, so no val scene is ever seen in training.  Training sets of different
sizes are prefixes of one another, which makes the data-volume sweep nested.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .detector import ToyDetectorConfig, TrainingDiverged, evaluate_ap, train
from .errors import ConfigError, NumericError
from .scenes import GeneratorParams, SyntheticScene, generate_scenes

log = logging.getLogger(__name__)

TRAIN_STREAM, VAL_STREAM = "scene-gen/train", "scene-gen/val"
DATA_SIZES = (100, 400, 1600)


def task_scenes(seed: int, n_train: int, n_val: int, gen: GeneratorParams = GeneratorParams()
                ) -> tuple[list[SyntheticScene], list[SyntheticScene]]:
    return (generate_scenes(n_train, seed, gen, "train", TRAIN_STREAM),
            generate_scenes(n_val, seed, gen, "val", VAL_STREAM))


def context_matrix(base: ToyDetectorConfig = ToyDetectorConfig()) -> list[ToyDetectorConfig]:
    """full, no-semantic, no-similarity and no-context variants of ``base``."""
    return [replace(base, similarity=sim, semantic=sem)
            for sim, sem in ((True, True), (True, False), (False, True), (False, False))]


@dataclass
class AblationRow:
    label: str
    aps: list = field(default_factory=list)  # (seed, ap) per finished run
    failed: list = field(default_factory=list)  # (seed, message) per aborted run

    @property
    def ok(self) -> bool:
        return not self.failed and bool(self.aps)

    @property
    def mean(self) -> float:
        return float(np.mean([a for _, a in self.aps])) if self.ok else math.nan

    @property
    def sd(self) -> float:
        if not self.ok:
            return math.nan
        return float(np.std([a for _, a in self.aps], ddof=1)) if len(self.aps) > 1 else 0.0


@dataclass
class AblationTable:
    rows: list

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_text(self) -> str:
        width = max([len(r.label) for r in self.rows] + [6])
        lines = [f"{'config':<{width}}  mean AP    sd       runs  status"]
        for r in self.rows:
            status = "ok" if r.ok else "failed: " + "; ".join(f"seed {s}: {m}" for s, m in r.failed)
            lines.append(f"{r.label:<{width}}  {r.mean:7.4f}  {r.sd:7.4f}  {len(r.aps):4d}  {status}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("config,seed,ap,status\n")
        for r in self.rows:
            for s, a in r.aps:
                out.write(f"{r.label},{s},{a!r},ok\n")
            for s, m in r.failed:
                out.write(f"{r.label},{s},,failed: {m.replace(',', ';')}\n")
        return out.getvalue()


def _run(cfg: ToyDetectorConfig, train_set, val_set) -> float:
    res = train(cfg, train_set, ())
    return evaluate_ap(res.params, cfg, val_set)


def ablate(configs: Sequence[ToyDetectorConfig], seeds: Sequence[int], n_train: int = 400, n_val: int = 200,
           gen: GeneratorParams = GeneratorParams(), labels: Sequence[str] | None = None,
           sizes: Sequence[int] | None = None,
           on_run: Callable[[str, int, float | None], None] | None = None) -> AblationTable:
    """Train every (config, seed) pair and collect val AP.

    With ``sizes`` each config is also swept over those training-set sizes and
    rows are labelled ``<label> n=<size>``.  A run that diverges marks its row
    failed; the other runs proceed.
    """
    if len(configs) < 2 and not (sizes and len(sizes) >= 2):
        raise ConfigError(f"an ablation needs at least 2 configs, got {len(configs)}")
    if len(seeds) < 3:
        raise ConfigError(f"an ablation needs at least 3 seeds, got {len(seeds)}")
    labels = list(labels) if labels is not None else [c.label for c in configs]
    if len(labels) != len(configs):
        raise ConfigError("one label per config")
    sizes = list(sizes) if sizes else [n_train]
    rows = {}
    for lab in labels:
        for size in sizes:
            name = lab if len(sizes) == 1 else f"{lab} n={size}"
            rows[(lab, size)] = AblationRow(name)
    for seed in seeds:
        train_all, val_set = task_scenes(seed, max(sizes), n_val, gen)
        for cfg, lab in zip(configs, labels):
            for size in sizes:
                row = rows[(lab, size)]
                try:
                    ap = _run(replace(cfg, seed=seed), train_all[:size], val_set)
                except (TrainingDiverged, NumericError) as exc:
                    log.warning("%s seed %d failed: %s", row.label, seed, exc)
                    row.failed.append((seed, str(exc)))
                    ap = None
                else:
                    row.aps.append((seed, ap))
                log.info("%s seed %d: AP %s", row.label, seed, ap)
                if on_run is not None:
                    on_run(row.label, seed, ap)
    return AblationTable(list(rows.values()))


def data_volume(base: ToyDetectorConfig, seeds: Sequence[int], sizes: Sequence[int] = DATA_SIZES,
                n_val: int = 200, gen: GeneratorParams = GeneratorParams(), **kw) -> AblationTable:
    """One config over nested training sets of increasing size."""
    return ablate([base], seeds, n_val=n_val, gen=gen, sizes=sizes, **kw)
