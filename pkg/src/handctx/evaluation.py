"""Detection AP with axis-aligned IoU matching, orientation accuracy, PR-curve output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError, UsageError
from .orientation import HandAnnotation, orientation_loss
from .records import RecordError, iter_jsonl

DEFAULT_IOU = 0.5
DEFAULT_ANGLE_THRESHOLDS = (10.0, 20.0, 30.0)

Box = tuple  # (x_min, y_min, x_max, y_max), pixels


@dataclass
class DetectionResult:
    image_id: str
    box: Box
    score: float
    orientation: float | None = None
    det_id: str | None = None

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise UsageError(f"invalid box {self.box}: need x_min < x_max and y_min < y_max")
        if not math.isfinite(self.score):
            raise UsageError(f"score must be finite, got {self.score}")


@dataclass
class GroundTruthBox:
    image_id: str
    box: Box
    orientation: float | None = None

    @classmethod
    def from_annotation(cls, ann: HandAnnotation) -> "GroundTruthBox":
        return cls(ann.image_id, ann.axis_aligned_box(), ann.orientation)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float = float("nan")

    def __len__(self):
        return len(self.recall)


@dataclass
class MatchResult:
    tp: np.ndarray  # bool per detection, input order
    gt_matched: np.ndarray  # bool per ground truth
    pairs: list = field(default_factory=list)  # (detection index, gt index) for true positives


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets: Sequence[DetectionResult], gts: Sequence[GroundTruthBox],
                     iou_thresh: float = DEFAULT_IOU) -> MatchResult:
    """Greedy matching in descending score order.

    Each detection takes the unmatched ground truth of its image with the
    highest IoU; it is a true positive if that IoU is >= ``iou_thresh``.
    """
    ids = [d.det_id for d in dets if d.det_id is not None]
    if len(ids) != len(set(ids)):
        raise UsageError("duplicate detection ids")
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    pairs = []
    for i in score_order([d.score for d in dets]):
        d = dets[i]
        best, best_j = -1.0, -1
        for j in by_image.get(d.image_id, ()):
            if matched[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            tp[i] = True
            matched[best_j] = True
            pairs.append((int(i), best_j))
    return MatchResult(tp, matched, pairs)


def average_precision(tp: Sequence[bool], scores: Sequence[float], total_gt: int,
                      mode: str = "all") -> PRCurve:
    """PR curve and AP from per-detection labels.

    ``mode="all"`` integrates the precision envelope over every recall
    change; ``mode="11pt"`` averages the envelope at recall 0, 0.1, ..., 1.
    """
    if total_gt < 1:
        raise UndefinedMetricError("average precision is undefined without ground truths")
    if mode not in ("all", "11pt"):
        raise UsageError(f"unknown AP mode {mode!r}")
    tp = np.asarray(tp, dtype=bool)
    if len(tp) != len(scores):
        raise UsageError("labels and scores differ in length")
    order = score_order(scores)
    tps = np.cumsum(tp[order])
    fps = np.cumsum(~tp[order])
    recall = tps / total_gt
    precision = tps / np.maximum(tps + fps, 1)
    if mode == "11pt":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            above = precision[recall >= t - 1e-12]
            ap += (above.max() if above.size else 0.0) / 11
    else:
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
        ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64), float(ap))


def orientation_accuracy(pairs: Sequence[tuple[float, float]],
                         thresholds_deg: Sequence[float] = DEFAULT_ANGLE_THRESHOLDS) -> list[float]:
    """Fraction of (predicted, ground truth) angle pairs with wrapped error <= each threshold."""
    if len(pairs) == 0:
        raise UndefinedMetricError("orientation accuracy is undefined without matched pairs")
    pred, gt = np.asarray(pairs, dtype=np.float64).T
    err = orientation_loss(pred, gt)
    # slack absorbs degree/radian round-off for errors constructed exactly at a threshold
    return [float(np.mean(err <= math.radians(t) + 1e-12)) for t in thresholds_deg]


@dataclass
class EvalReport:
    ap: float
    curve: PRCurve
    n_detections: int
    n_ground_truth: int
    n_true_positive: int
    orientation_thresholds: tuple = DEFAULT_ANGLE_THRESHOLDS
    orientation_acc: list | None = None
    iou_thresh: float = DEFAULT_IOU

    def summary(self) -> str:
        lines = [
            f"ap: {self.ap:.6f}",
            f"iou_threshold: {self.iou_thresh:g}",
            f"detections: {self.n_detections}",
            f"ground_truth: {self.n_ground_truth}",
            f"true_positives: {self.n_true_positive}",
        ]
        if self.orientation_acc is None:
            lines.append("orientation_accuracy: n/a")
        else:
            for t, a in zip(self.orientation_thresholds, self.orientation_acc):
                lines.append(f"orientation_accuracy@{t:g}deg: {a:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(dets: Sequence[DetectionResult], gts: Sequence[GroundTruthBox],
             iou_thresh: float = DEFAULT_IOU, thresholds_deg: Sequence[float] = DEFAULT_ANGLE_THRESHOLDS,
             mode: str = "all") -> EvalReport:
    m = match_detections(dets, gts, iou_thresh)
    curve = average_precision(m.tp, [d.score for d in dets], len(gts), mode)
    ang = [(dets[i].orientation, gts[j].orientation) for i, j in m.pairs
           if dets[i].orientation is not None and gts[j].orientation is not None]
    acc = orientation_accuracy(ang, thresholds_deg) if ang else None
    return EvalReport(curve.ap, curve, len(dets), len(gts), int(m.tp.sum()), tuple(thresholds_deg), acc, iou_thresh)


# ---------------------------------------------------------------------------
# files


def detection_to_record(d: DetectionResult) -> dict:
    rec = {"image_id": d.image_id, "box": list(d.box), "score": d.score}
    if d.orientation is not None:
        rec["orientation"] = d.orientation
    if d.det_id is not None:
        rec["id"] = d.det_id
    return rec


def read_detections(path) -> list[DetectionResult]:
    out = []
    for lineno, rec, err in iter_jsonl(path):
        if err is None:
            try:
                ori = rec.get("orientation")
                out.append(DetectionResult(str(rec["image_id"]), rec["box"], float(rec["score"]),
                                           None if ori is None else float(ori),
                                           None if rec.get("id") is None else str(rec["id"])))
                continue
            except (KeyError, TypeError, ValueError) as e:
                err = str(e)
        raise RecordError(f"{path}:{lineno}: bad detection record: {err}")
    return out


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision"])
        for r, p in zip(curve.recall, curve.precision):
            w.writerow([repr(float(r)), repr(float(p))])


def read_pr_csv(path) -> PRCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    r = np.array([float(a) for a, _ in rows], dtype=np.float64)
    p = np.array([float(b) for _, b in rows], dtype=np.float64)
    return PRCurve(r, p)


def pr_curve_svg(curves: dict[str, PRCurve], width: int = 360, height: int = 320) -> str:
    """Standalone SVG line plot of one or more PR curves (recall on x)."""
    left, right, top, bottom = 48, 16, 16, 40
    pw, ph = width - left - right, height - top - bottom

    def px(r, p):
        return left + r * pw, top + (1 - p) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
    ]
    for t in np.linspace(0, 1, 6):
        x, _ = px(t, 0)
        _, y = px(0, t)
        out.append(f'<text x="{x:.1f}" y="{top + ph + 14}" font-size="10" text-anchor="middle">{t:.1f}</text>')
        out.append(f'<text x="{left - 6}" y="{y + 3:.1f}" font-size="10" text-anchor="end">{t:.1f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" font-size="12" text-anchor="middle">recall</text>')
    out.append(f'<text x="12" y="{top + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 12 {top + ph / 2})">precision</text>')
    for n, (label, c) in enumerate(curves.items()):
        color = colors[n % len(colors)]
        pts = [px(r, p) for r, p in zip(c.recall, c.precision)]
        if pts:
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                       f'<title>{label}</title></polyline>')
        for (x, y), r, p in zip(pts, c.recall, c.precision):
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="{color}" '
                       f'data-recall="{r:g}" data-precision="{p:g}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_pr_curve(curve: PRCurve, path, label: str = "detector") -> tuple[str, str]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both filenames."""
    base = str(path)
    for ext in (".csv", ".svg"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    csv_path, svg_path = base + ".csv", base + ".svg"
    write_pr_csv(curve, csv_path)
    with open(svg_path, "w") as fh:
        fh.write(pr_curve_svg({label: curve}))
    return csv_path, svg_path
