"""Derive oriented hand rectangles from keypoint detections.

For each detected hand: the direction runs from the predicted wrist to the
mean of the predicted hand keypoints, the rectangle is the smallest one
aligned with that direction containing the wrist and all keypoints, and the
detection is kept only if the distance from the predicted wrist to the
closest annotated wrist is at most 0.2 of the rectangle's length along the
direction.  Annotated hands that no kept detection claims are blacked out
with a disc centered at the wrist whose radius is the wrist-elbow
distance; an image is dropped if any disc touches a kept rectangle.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateError
from .orientation import HandAnnotation
from .records import (
    KeypointDetection,
    PersonKeypoints,
    RecordError,
    annotation_to_record,
    image_path,
    iter_jsonl,
    keypoint_detection_from_record,
    person_from_record,
    read_ppm,
    write_jsonl,
    write_ppm,
)

log = logging.getLogger(__name__)

REJECT_RATIO = 0.2
MIN_WIDTH = 2.0


@dataclass
class OrientedRect:
    center: np.ndarray
    direction: np.ndarray  # unit vector, pixel coordinates
    length: float  # extent along direction
    width: float  # extent along the perpendicular

    @property
    def normal(self) -> np.ndarray:
        return np.array([-self.direction[1], self.direction[0]])

    def corners(self) -> np.ndarray:
        """Corners 0..3; side 0 (corners 0-1) is the wrist end, opposite the direction."""
        u, v = self.direction * self.length / 2, self.normal * self.width / 2
        c = self.center
        return np.array([c - u - v, c - u + v, c + u + v, c + u - v])

    def to_annotation(self, image_id: str) -> HandAnnotation:
        return HandAnnotation(image_id, self.corners(), 0)

    def local(self, pts) -> np.ndarray:
        d = np.atleast_2d(np.asarray(pts, dtype=np.float64)) - self.center
        return np.stack([d @ self.direction, d @ self.normal], axis=1)

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        loc = self.local(pts)
        return (np.abs(loc[:, 0]) <= self.length / 2 + tol) & (np.abs(loc[:, 1]) <= self.width / 2 + tol)

    def distance_to(self, p) -> float:
        """Euclidean distance from a point to the solid rectangle (0 inside)."""
        a, b = self.local(p)[0]
        da = max(abs(a) - self.length / 2, 0.0)
        db = max(abs(b) - self.width / 2, 0.0)
        return math.hypot(da, db)


@dataclass
class MaskDisc:
    center: np.ndarray
    radius: float

    def overlaps(self, rect: OrientedRect) -> bool:
        # touching counts as overlap
        return rect.distance_to(self.center) <= self.radius


@dataclass
class Reliability:
    keep: bool
    error: float  # E, pixels
    length: float  # L, pixels
    matched: tuple[int, int]  # (person index, wrist index) of the closest annotated wrist

    @property
    def ratio(self) -> float:
        return self.error / self.length


class NoReferenceWrists(ValueError):
    """The image has no visible annotated wrist to verify a detection against."""

    reason = "no_annotated_wrists"


def hand_rect(det: KeypointDetection, padding: float = 0.0, min_width: float = MIN_WIDTH) -> OrientedRect:
    """Minimal rectangle aligned with the wrist -> keypoint-mean direction."""
    h_avg = det.hand_points.mean(axis=0)
    d = h_avg - det.w_pred
    norm = math.hypot(*d)
    if norm < 1e-12:
        raise DegenerateError("mean of hand keypoints coincides with the predicted wrist")
    u = d / norm
    v = np.array([-u[1], u[0]])
    pts = np.vstack([det.w_pred, det.hand_points])
    pu, pv = pts @ u, pts @ v
    a0, a1, b0, b1 = pu.min(), pu.max(), pv.min(), pv.max()
    length = a1 - a0 + 2 * padding
    width = b1 - b0 + 2 * padding
    if width < min_width:
        log.info("image %s: rectangle width %.3g px floored to %.3g px", det.image_id, width, min_width)
        width = min_width
    center = u * (a0 + a1) / 2 + v * (b0 + b1) / 2
    return OrientedRect(center, u, float(length), float(width))


def _reference_wrists(persons: Sequence[PersonKeypoints]):
    out = []
    for pi, p in enumerate(persons):
        for wi, (w, vis) in enumerate(zip(p.wrists, p.wrist_visibility)):
            if vis > 0:
                out.append(((pi, wi), w))
    return out


def reliability_check(det: KeypointDetection, persons: Sequence[PersonKeypoints],
                      rect: OrientedRect | None = None, threshold: float = REJECT_RATIO) -> Reliability:
    """Keep iff E / L <= threshold, E being the distance to the closest visible annotated wrist."""
    refs = _reference_wrists(persons)
    if not refs:
        raise NoReferenceWrists(f"image {det.image_id}: no visible annotated wrists")
    rect = rect or hand_rect(det)
    dists = [math.hypot(*(det.w_pred - w)) for _, w in refs]
    k = int(np.argmin(dists))  # first minimum: lowest wrist index wins ties
    E = dists[k]
    return Reliability(E / rect.length <= threshold, E, rect.length, refs[k][0])


def disc_pixel_mask(shape: tuple, disc: MaskDisc) -> np.ndarray:
    """Pixels whose centers lie inside or on the circle."""
    h, w = shape[:2]
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    cx, cy = disc.center
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= disc.radius ** 2


def make_discs(missed: Sequence[tuple]) -> list[MaskDisc]:
    """One disc per (wrist, elbow) pair; zero-radius pairs are skipped."""
    discs = []
    for wrist, elbow in missed:
        wrist = np.asarray(wrist, dtype=np.float64)
        r = math.hypot(*(wrist - np.asarray(elbow, dtype=np.float64)))
        if r <= 0:
            log.warning("wrist %s coincides with its elbow; mask skipped", wrist.tolist())
            continue
        discs.append(MaskDisc(wrist, r))
    return discs


@dataclass
class MaskOutcome:
    image: np.ndarray | None  # None when discarded
    discarded: bool
    reason: str | None
    discs: list


def mask_missed(image: np.ndarray, missed: Sequence[tuple], kept_rects: Sequence[OrientedRect]) -> MaskOutcome:
    """Zero all channels inside each missed-hand disc, or discard on any disc/rectangle overlap."""
    discs = make_discs(missed)
    for disc in discs:
        if any(disc.overlaps(r) for r in kept_rects):
            return MaskOutcome(None, True, "mask_overlaps_kept_hand", discs)
    out = np.array(image, copy=True)
    for disc in discs:
        out[disc_pixel_mask(out.shape, disc)] = 0
    return MaskOutcome(out, False, None, discs)


# ---------------------------------------------------------------------------
# whole-dataset derivation


@dataclass
class DeriveReport:
    detections: int = 0
    kept: int = 0
    rejected: int = 0
    rejected_no_reference: int = 0
    degenerate: int = 0
    detection_parse_errors: int = 0
    person_parse_errors: int = 0
    images: int = 0
    images_written: int = 0
    images_discarded_overlap: int = 0
    images_without_kept: int = 0
    images_missing: int = 0
    annotations_written: int = 0
    masks_applied: int = 0
    masks_skipped: int = 0
    errors: list = field(default_factory=list)

    def counts(self) -> dict:
        d = asdict(self)
        d.pop("errors")
        return d

    def text(self) -> str:
        return "".join(f"{k}: {v}\n" for k, v in self.counts().items())


def _load(path, parse, report: DeriveReport, counter: str):
    by_image: dict[str, list] = {}
    for lineno, rec, err in iter_jsonl(path):
        if err is None:
            try:
                item = parse(rec)
                by_image.setdefault(item.image_id, []).append(item)
                continue
            except RecordError as e:
                err = str(e)
        setattr(report, counter, getattr(report, counter) + 1)
        report.errors.append(f"{os.path.basename(str(path))}:{lineno}: {err}")
    return by_image


def process_image(image_id: str, dets: Sequence[KeypointDetection], persons: Sequence[PersonKeypoints],
                  image: np.ndarray | None, report: DeriveReport, threshold: float = REJECT_RATIO,
                  padding: float = 0.0, min_width: float = MIN_WIDTH):
    """Apply the heuristics to one image. Returns (annotations, masked image) or None if dropped."""
    report.images += 1
    kept: list[tuple[OrientedRect, tuple]] = []
    for det in dets:
        report.detections += 1
        try:
            rect = hand_rect(det, padding, min_width)
        except DegenerateError as e:
            report.degenerate += 1
            report.errors.append(f"{image_id}: degenerate detection skipped: {e}")
            continue
        try:
            rel = reliability_check(det, persons, rect, threshold)
        except NoReferenceWrists:
            report.rejected += 1
            report.rejected_no_reference += 1
            continue
        if rel.keep:
            report.kept += 1
            kept.append((rect, rel.matched))
        else:
            report.rejected += 1
    if not kept:
        report.images_without_kept += 1
        return None
    if image is None:
        report.images_missing += 1
        report.errors.append(f"{image_id}: image file missing; skipped")
        return None
    claimed = {m for _, m in kept}
    missed = []
    for pi, p in enumerate(persons):
        for wi in range(len(p.wrists)):
            if (pi, wi) in claimed or p.wrist_visibility[wi] <= 0:
                continue
            if p.elbow_visibility[wi] <= 0:
                report.masks_skipped += 1
                report.errors.append(f"{image_id}: missed wrist {(pi, wi)} has no visible elbow; not masked")
                continue
            missed.append((p.wrists[wi], p.elbows[wi]))
    outcome = mask_missed(image, missed, [r for r, _ in kept])
    report.masks_skipped += len(missed) - len(outcome.discs)
    if outcome.discarded:
        report.images_discarded_overlap += 1
        return None
    report.masks_applied += len(outcome.discs)
    anns = [r.to_annotation(image_id) for r, _ in kept]
    report.images_written += 1
    report.annotations_written += len(anns)
    return anns, outcome.image


def derive_dataset(detections_path, keypoints_path, images_dir, out_dir, threshold: float = REJECT_RATIO,
                   padding: float = 0.0, min_width: float = MIN_WIDTH) -> DeriveReport:
    """Run the heuristics over a whole corpus.

    Writes ``annotations.jsonl``, masked ``images/<id>.ppm``, ``report.txt``,
    ``report.json`` and ``errors.log`` under ``out_dir``.  Images are
    processed in sorted id order so outputs are reproducible.
    """
    report = DeriveReport()
    dets = _load(detections_path, keypoint_detection_from_record, report, "detection_parse_errors")
    persons = _load(keypoints_path, person_from_record, report, "person_parse_errors")
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    annotations = []
    for image_id in sorted(dets):
        src = image_path(images_dir, image_id)
        image = read_ppm(src) if os.path.exists(src) else None
        result = process_image(image_id, dets[image_id], persons.get(image_id, []), image, report,
                               threshold, padding, min_width)
        if result is None:
            continue
        anns, masked = result
        annotations.extend(anns)
        write_ppm(image_path(os.path.join(out_dir, "images"), image_id), masked)
    write_jsonl(os.path.join(out_dir, "annotations.jsonl"), (annotation_to_record(a) for a in annotations))
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(report.text())
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.counts(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "errors.log"), "w") as fh:
        fh.writelines(e + "\n" for e in report.errors)
    return report
