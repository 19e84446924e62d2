"""Command-line entry point: ``handctx <command> [options]``.

Every option can also come from a ``--config`` file of ``key = value`` lines;
precedence is built-in defaults < config file < flags.  The resolved config is
written to ``config.txt`` in the output directory.  Angles are in degrees at
this boundary.  Exit codes: 0 success, 1 check failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import fields

import numpy as np

from . import ablation
from .annotation import MIN_WIDTH, REJECT_RATIO, derive_dataset
from .attention import AttentionParams, attention_forward
from .detector import (ToyDetectorConfig, TrainingDiverged, infer, load_checkpoint,
                       save_checkpoint, train, write_metric_log)
from .errors import ConfigError, UsageError
from .evaluation import (DEFAULT_ANGLE_THRESHOLDS, DEFAULT_IOU, GroundTruthBox, detection_to_record, emit_pr_curve,
                         evaluate, pr_curve_svg, read_detections, read_pr_csv)
from .gradcheck import check_gradients
from .orientation import orientation_loss_tensor
from .records import read_annotations, write_jsonl
from .scenes import generate_scenes, write_scenes
from .tensor import Tensor, perturb_backward

log = logging.getLogger("handctx")

GRADCHECK_TOL = 1e-5
GRADCHECK_MAX = 4096  # hw * m above this is too slow for finite differences


class CheckFailed(Exception):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _floats(v) -> tuple:
    return tuple(float(x) for x in str(v).split(",") if x.strip())


def _ints(v) -> tuple:
    return tuple(int(x) for x in str(v).split(",") if x.strip())


def _convert(kind, v):
    try:
        return kind(v)
    except ValueError as e:
        raise ConfigError(f"bad value {v!r}: {e}") from None


_DET_SKIP = ("backbone", "seed")
_DET_DEFAULTS = ToyDetectorConfig()
DETECTOR_OPTIONS = {
    f.name: (getattr(_DET_DEFAULTS, f.name), _bool if isinstance(getattr(_DET_DEFAULTS, f.name), bool)
             else type(getattr(_DET_DEFAULTS, f.name)), "detector config field")
    for f in fields(ToyDetectorConfig) if f.name not in _DET_SKIP
}

SEED = {"seed": (0, int, "run seed; scene-gen, init and shuffle streams derive from it")}
OUT = {"out": (None, str, "output directory")}

COMMANDS = {
    "gradcheck": ("finite-difference check of attention and orientation gradients", {
        **SEED, "h": (3, int, "grid rows"), "w": (3, int, "grid columns"), "m": (4, int, "channels"),
        "K": (3, int, "distance components"), "out": (None, str, "optional output directory"),
    }),
    "derive": ("derive oriented hand annotations from keypoint detections", {
        "detections": (None, str, "keypoint detections JSONL"), "keypoints": (None, str, "person keypoints JSONL"),
        "images": (None, str, "directory of <image_id>.ppm"), **OUT,
        "threshold": (REJECT_RATIO, float, "reject when E/L exceeds this"),
        "padding": (0.0, float, "rectangle padding, pixels"), "min_width": (MIN_WIDTH, float, "minimum rectangle width"),
    }),
    "gen": ("generate synthetic scenes", {**SEED, "n": (100, int, "number of scenes"), **OUT}),
    "train": ("train the toy detector on synthetic scenes", {
        **SEED, "n_train": (400, int, "training scenes"), "n_val": (200, int, "validation scenes"), **OUT,
        **DETECTOR_OPTIONS,
    }),
    "eval": ("AP and orientation accuracy of detections", {
        "detections": (None, str, "detections JSONL (or use --checkpoint)"),
        "annotations": (None, str, "ground-truth annotations JSONL"),
        "checkpoint": (None, str, "evaluate this detector on fresh validation scenes"),
        **SEED, "n_val": (200, int, "validation scenes when evaluating a checkpoint"),
        "iou": (DEFAULT_IOU, float, "match threshold"),
        "angle_thresholds": (",".join(f"{t:g}" for t in DEFAULT_ANGLE_THRESHOLDS), str,
                             "orientation accuracy thresholds, degrees, comma separated"),
        **OUT,
    }),
    "ablate": ("train a context ablation matrix or a data-volume sweep over several seeds", {
        "seeds": ("0,1,2", str, "comma-separated seeds"), "n_train": (1600, int, "training scenes"),
        "n_val": (200, int, "validation scenes"),
        "data_volume": (False, _bool, "sweep training-set sizes on the configured detector instead"),
        "sizes": (",".join(map(str, ablation.DATA_SIZES)), str, "training-set sizes for the sweep"),
        **OUT, **DETECTOR_OPTIONS,
    }),
    "plot": ("draw PR curves from CSV files as SVG", {
        "pr": (None, str, "comma-separated PR CSV files (recall,precision)"), **OUT,
    }),
}


def read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    options = COMMANDS[command][1]
    cfg = {k: d for k, (d, _, _) in options.items()}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k not in options:
                raise ConfigError(f"{args.config}: unknown key {k!r} for {command}")
            cfg[k] = _convert(options[k][1], v)
    for k in options:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    return cfg


def write_resolved(command: str, cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(f"command = {command}\n")
        for k in sorted(cfg):
            fh.write(f"{k} = {cfg[k]}\n")


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _existing(path, what="file"):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _detector_config(cfg: dict, seed: int) -> ToyDetectorConfig:
    return ToyDetectorConfig(seed=seed, **{k: cfg[k] for k in DETECTOR_OPTIONS})


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(cfg: dict) -> str:
    h, w, m, K = cfg["h"], cfg["w"], cfg["m"], cfg["K"]
    if min(h, w, m, K) < 1:
        raise UsageError("h, w, m and K must be >= 1")
    if h * w * m > GRADCHECK_MAX:
        raise UsageError(f"h*w*m = {h * w * m} exceeds {GRADCHECK_MAX}; finite differences would take too long. "
                         "Use a smaller grid or fewer channels; gradients do not depend on scale.")
    rng = np.random.default_rng(cfg["seed"])
    P = AttentionParams.init(m, K, h, w, rng)
    diag = math.hypot(h - 1, w - 1)
    P.alpha.data[:] = rng.uniform(0.1, 0.9, K) / K
    P.mu.data[:] = rng.uniform(0, max(diag, 1.0), K)
    P.sigma.data[:] = rng.uniform(0.5, 2.0, K)
    X = Tensor(rng.uniform(-1, 1, (h, w, m)), requires_grad=True)
    probe = rng.normal(size=(h, w, m))
    theta = Tensor(rng.uniform(-math.pi, math.pi, 8), requires_grad=True)
    target = rng.uniform(-math.pi, math.pi, 8)
    errs = check_gradients(lambda: (attention_forward(X, P) * probe).sum(), dict(P.tensors(), X=X))
    errs["orientation_loss"] = check_gradients(lambda: orientation_loss_tensor(theta, target).sum(),
                                               {"theta": theta})["theta"]
    worst = max(errs.values())
    lines = [f"{k:<17} {v:.3e}" for k, v in errs.items()]
    lines.append(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOL:g}): "
                 + ("PASS" if worst <= GRADCHECK_TOL else "FAIL"))
    report = "\n".join(lines) + "\n"
    if cfg["out"]:
        write_resolved("gradcheck", cfg, cfg["out"])
        with open(os.path.join(cfg["out"], "gradcheck.txt"), "w") as fh:
            fh.write(report)
    if not worst <= GRADCHECK_TOL:
        raise CheckFailed(report)
    return report


def cmd_derive(cfg: dict) -> str:
    _require(cfg, "detections", "keypoints", "images", "out")
    _existing(cfg["detections"])
    _existing(cfg["keypoints"])
    _existing(cfg["images"], "image directory")
    report = derive_dataset(cfg["detections"], cfg["keypoints"], cfg["images"], cfg["out"],
                            cfg["threshold"], cfg["padding"], cfg["min_width"])
    write_resolved("derive", cfg, cfg["out"])
    return report.text()


def cmd_gen(cfg: dict) -> str:
    _require(cfg, "out")
    scenes = generate_scenes(cfg["n"], cfg["seed"])
    write_scenes(scenes, cfg["out"])
    write_resolved("gen", cfg, cfg["out"])
    return f"wrote {len(scenes)} scenes with {sum(len(s.hands) for s in scenes)} hands to {cfg['out']}\n"


def cmd_train(cfg: dict) -> str:
    _require(cfg, "out")
    dcfg = _detector_config(cfg, cfg["seed"])
    write_resolved("train", cfg, cfg["out"])
    train_set, val_set = ablation.task_scenes(cfg["seed"], cfg["n_train"], cfg["n_val"])
    try:
        res = train(dcfg, train_set, val_set)
    except TrainingDiverged as exc:
        save_checkpoint(os.path.join(cfg["out"], "last_good.ckpt"), exc.last_good, dcfg)
        write_metric_log(exc.history, os.path.join(cfg["out"], "metrics.csv"))
        raise CheckFailed(f"training diverged: {exc}; last good parameters in last_good.ckpt") from None
    save_checkpoint(os.path.join(cfg["out"], "model.ckpt"), res.params, dcfg)
    write_metric_log(res.history, os.path.join(cfg["out"], "metrics.csv"))
    return f"{dcfg.label}: final val AP {res.final_val_ap:.4f}\n"


def cmd_eval(cfg: dict) -> str:
    _require(cfg, "out")
    thresholds = _floats(cfg["angle_thresholds"])
    if cfg["checkpoint"]:
        params, dcfg = load_checkpoint(_existing(cfg["checkpoint"]))
        _, val_set = ablation.task_scenes(cfg["seed"], 1, cfg["n_val"])
        dets = infer(params, dcfg, val_set)
        gts = [GroundTruthBox.from_annotation(a) for s in val_set for a in s.annotations()]
        os.makedirs(cfg["out"], exist_ok=True)
        write_jsonl(os.path.join(cfg["out"], "detections.jsonl"), (detection_to_record(d) for d in dets))
    else:
        _require(cfg, "detections", "annotations")
        dets = read_detections(_existing(cfg["detections"]))
        gts = [GroundTruthBox.from_annotation(a) for a in read_annotations(_existing(cfg["annotations"]))]
    report = evaluate(dets, gts, cfg["iou"], thresholds)
    write_resolved("eval", cfg, cfg["out"])
    with open(os.path.join(cfg["out"], "report.txt"), "w") as fh:
        fh.write(report.summary())
    emit_pr_curve(report.curve, os.path.join(cfg["out"], "pr"))
    return report.summary()


def cmd_ablate(cfg: dict) -> str:
    _require(cfg, "out")
    seeds = _ints(cfg["seeds"])
    base = _detector_config(cfg, 0)
    write_resolved("ablate", cfg, cfg["out"])
    if cfg["data_volume"]:
        table = ablation.data_volume(base, seeds, _ints(cfg["sizes"]), n_val=cfg["n_val"])
    else:
        table = ablation.ablate(ablation.context_matrix(base), seeds, cfg["n_train"], cfg["n_val"])
    text = table.to_text()
    with open(os.path.join(cfg["out"], "ablation.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(cfg["out"], "ablation.csv"), "w") as fh:
        fh.write(table.to_csv())
    if any(not r.ok for r in table.rows):
        raise CheckFailed(text)
    return text


def cmd_plot(cfg: dict) -> str:
    _require(cfg, "pr", "out")
    paths = [p.strip() for p in cfg["pr"].split(",") if p.strip()]
    curves = {os.path.splitext(os.path.basename(p))[0]: read_pr_csv(_existing(p)) for p in paths}
    write_resolved("plot", cfg, cfg["out"])
    target = os.path.join(cfg["out"], "pr.svg")
    with open(target, "w") as fh:
        fh.write(pr_curve_svg(curves))
    return f"wrote {target}\n"


HANDLERS = {"gradcheck": cmd_gradcheck, "derive": cmd_derive, "gen": cmd_gen, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="handctx", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, options) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; flags override it")
        for key, (default, kind, text) in options.items():
            show = "" if default is None else f" (default {default})"
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, help=text + show)
        if name == "gradcheck":
            # negative control for tests: scale one op's backward rule
            p.add_argument("--corrupt-op", dest="corrupt_op", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        handler = HANDLERS[args.command]
        if getattr(args, "corrupt_op", None):
            with perturb_backward(args.corrupt_op):
                out = handler(cfg)
        else:
            out = handler(cfg)
    except CheckFailed as exc:
        sys.stdout.write(str(exc))
        return 1
    except FileNotFoundError as exc:
        print(f"handctx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:  # usage, config, record and dimension errors
        print(f"handctx {args.command}: error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
