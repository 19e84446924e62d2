"""Line-record file formats and binary PPM images.

Every text format is JSON Lines: one JSON object per line, blank lines
ignored.  Schemas (keys per record):

* hand annotation:   image_id, quad [[x, y] x 4], wrist_side (0-3), orientation (radians)
* box detection:     image_id, box [x_min, y_min, x_max, y_max], score, orientation (optional), id (optional)
* keypoint detection: image_id, confidence, wrist [x, y], keypoints [[x, y], ...]
* person keypoints:  image_id, wrists [[x, y], ...], elbows [[x, y], ...],
                     wrist_visibility [v, ...], elbow_visibility [v, ...]

Pixel coordinates: x to the right, y down, origin at the top-left corner
of the top-left pixel (pixel (c, r) has its center at (c + 0.5, r + 0.5)).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .orientation import HandAnnotation

log = logging.getLogger(__name__)


class RecordError(ValueError):
    """A line record could not be parsed."""


def iter_jsonl(path) -> Iterator[tuple[int, dict | None, str | None]]:
    """Yield (line_number, record, error) for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                yield lineno, None, f"invalid JSON: {e.msg}"
                continue
            if not isinstance(rec, dict):
                yield lineno, None, "record is not an object"
                continue
            yield lineno, rec, None


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _point(v, what) -> np.ndarray:
    p = np.asarray(v, dtype=np.float64)
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise RecordError(f"{what} must be a finite [x, y] pair, got {v!r}")
    return p


def _points(v, what) -> np.ndarray:
    pts = np.asarray(v, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
        raise RecordError(f"{what} must be a list of finite [x, y] pairs")
    return pts


# ---------------------------------------------------------------------------
# hand annotations (shared between the derivation pipeline, the scene generator and evaluation)


def annotation_to_record(ann: HandAnnotation) -> dict:
    return {
        "image_id": ann.image_id,
        "quad": ann.quad.tolist(),
        "wrist_side": ann.wrist_side,
        "orientation": ann.orientation,
    }


def annotation_from_record(rec: dict) -> HandAnnotation:
    try:
        quad = _points(rec["quad"], "quad")
        if quad.shape != (4, 2):
            raise RecordError("quad must have exactly 4 corners")
        return HandAnnotation(str(rec["image_id"]), quad, int(rec["wrist_side"]))
    except (KeyError, TypeError, ValueError) as e:
        raise RecordError(f"bad annotation record: {e}") from None


def read_annotations(path) -> list[HandAnnotation]:
    out = []
    for lineno, rec, err in iter_jsonl(path):
        if err is None:
            try:
                out.append(annotation_from_record(rec))
                continue
            except RecordError as e:
                err = str(e)
        raise RecordError(f"{path}:{lineno}: {err}")
    return out


def write_annotations(path, anns: Iterable[HandAnnotation]) -> None:
    write_jsonl(path, (annotation_to_record(a) for a in anns))


# ---------------------------------------------------------------------------
# keypoint detections and person keypoints


@dataclass
class KeypointDetection:
    image_id: str
    w_pred: np.ndarray
    hand_points: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        self.w_pred = _point(self.w_pred, "wrist")
        self.hand_points = _points(self.hand_points, "keypoints")
        if len(self.hand_points) < 1:
            raise RecordError("a detection needs at least one hand keypoint")


@dataclass
class PersonKeypoints:
    image_id: str
    wrists: np.ndarray
    elbows: np.ndarray
    wrist_visibility: list = field(default_factory=list)
    elbow_visibility: list = field(default_factory=list)

    def __post_init__(self):
        self.wrists = _points(self.wrists, "wrists") if len(self.wrists) else np.zeros((0, 2))
        self.elbows = _points(self.elbows, "elbows") if len(self.elbows) else np.zeros((0, 2))
        if len(self.wrists) != len(self.elbows):
            raise RecordError("wrists and elbows must be index-paired lists of equal length")
        n = len(self.wrists)
        self.wrist_visibility = list(self.wrist_visibility) or [2] * n
        self.elbow_visibility = list(self.elbow_visibility) or [2] * n
        if len(self.wrist_visibility) != n or len(self.elbow_visibility) != n:
            raise RecordError("visibility lists must match the number of wrists")


def keypoint_detection_from_record(rec: dict) -> KeypointDetection:
    try:
        return KeypointDetection(str(rec["image_id"]), rec["wrist"], rec["keypoints"],
                                 float(rec.get("confidence", 1.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise RecordError(f"bad keypoint detection: {e}") from None


def person_from_record(rec: dict) -> PersonKeypoints:
    try:
        return PersonKeypoints(str(rec["image_id"]), rec.get("wrists", []), rec.get("elbows", []),
                               rec.get("wrist_visibility", []), rec.get("elbow_visibility", []))
    except (KeyError, TypeError, ValueError) as e:
        raise RecordError(f"bad person keypoint record: {e}") from None


def keypoint_detection_to_record(det: KeypointDetection) -> dict:
    return {"image_id": det.image_id, "confidence": det.confidence,
            "wrist": det.w_pred.tolist(), "keypoints": det.hand_points.tolist()}


def person_to_record(p: PersonKeypoints) -> dict:
    return {"image_id": p.image_id, "wrists": p.wrists.tolist(), "elbows": p.elbows.tolist(),
            "wrist_visibility": list(p.wrist_visibility), "elbow_visibility": list(p.elbow_visibility)}


# ---------------------------------------------------------------------------
# binary PPM (P6, maxval 255)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 image (or (h, w) grey, replicated)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (h, w, 3) image, got {img.shape}")
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def image_path(images_dir, image_id: str) -> str:
    return os.path.join(images_dir, f"{image_id}.ppm")
