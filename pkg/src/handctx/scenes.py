"""Procedural scenes where local appearance is ambiguous.

Hands and distractors are skin-toned ellipses drawn from the same shape
and color distributions.  Only hands have an arm: a bar leaving the wrist
side in the hand's own tone.  Some distractors carry a decoy stick of the
same shape but a clearly different tone.  From one feature cell the two
kinds of blob look alike.  "Is there a bar next to me" is fooled by the
sticks, and "is there a bar of my tone somewhere" is fooled when another
distractor happens to share a stick's tone.  Asking both questions together
is what separates them.
"""

from __future__ import annotations

import logging
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .orientation import HandAnnotation
from .records import annotation_to_record, image_path, write_jsonl, write_ppm

log = logging.getLogger(__name__)

SKIN_LIGHT = np.array([0.96, 0.80, 0.69])
SKIN_DARK = np.array([0.42, 0.27, 0.18])


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent named sub-stream of a single run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *extra])


@dataclass(frozen=True)
class GeneratorParams:
    size: int = 96
    hand_count_probs: tuple = (0.0, 0.45, 0.35, 0.2)  # P(#hands = 0, 1, 2, 3)
    distractor_count_probs: tuple = (0.15, 0.35, 0.3, 0.2)
    semi_major: tuple = (5.0, 7.0)
    semi_minor: tuple = (3.5, 5.0)
    arm_length: tuple = (18.0, 30.0)
    arm_width: tuple = (4.0, 6.0)
    tone_jitter: float = 0.04
    pixel_noise: float = 0.03
    min_center_gap: float = 14.0
    distractor_clearance: float = 16.0  # extra empty margin around distractors, pixels
    decoy_prob: float = 0.5  # chance that a distractor carries a stick
    tone_gap: float = 0.3  # min tone difference: stick vs its distractor, distractor vs the person
    tone_levels: int = 4  # > 0 quantizes tones to that many evenly spaced levels
    max_tries: int = 200


@dataclass
class Blob:
    center: np.ndarray  # pixels (x, y)
    semi_major: float
    semi_minor: float
    orientation: float  # radians, y-up convention
    color: np.ndarray

    @property
    def u(self) -> np.ndarray:
        """Image-space unit vector of the major axis (points away from the wrist for hands)."""
        return np.array([math.cos(self.orientation), -math.sin(self.orientation)])

    def quad(self) -> np.ndarray:
        u, v = self.u, np.array([math.sin(self.orientation), math.cos(self.orientation)])
        a, b, c = self.semi_major * u, self.semi_minor * v, self.center
        return np.array([c - a - b, c - a + b, c + a + b, c + a - b])

    def box(self) -> tuple:
        q = self.quad()
        return (*q.min(axis=0), *q.max(axis=0))


@dataclass
class SyntheticScene:
    image_id: str
    image: np.ndarray  # uint8 (size, size, 3)
    hands: list
    distractors: list
    arms: list = field(default_factory=list)  # (start, end, width) segments, one per hand
    decoys: list = field(default_factory=list)  # (start, end, width, color) sticks next to distractors

    def annotations(self) -> list[HandAnnotation]:
        return [HandAnnotation(self.image_id, h.quad(), 0) for h in self.hands]


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _seg_dist(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-12), 0, 1)
    return float(np.hypot(*(p - (a + t * ab))))


class _Infeasible(Exception):
    pass


def _skin(rng, tone: float, jitter: float) -> np.ndarray:
    return np.clip(SKIN_DARK + tone * (SKIN_LIGHT - SKIN_DARK) + rng.normal(0, jitter, 3), 0, 1)


def _place(rng, p: GeneratorParams, placed: list, bars: list, is_hand: bool, tone: float, bar_tone):
    """Place one blob and, when ``bar_tone`` is given, its bar.

    ``placed`` holds (blob, is_hand) pairs and ``bars`` (start, end, width, is_arm).
    Hands may crowd each other and each other's arms; distractors and sticks
    keep ``distractor_clearance`` from everything else.
    """
    s = p.size
    clear = p.distractor_clearance
    for _ in range(p.max_tries):
        a = rng.uniform(*p.semi_major)
        b = rng.uniform(*p.semi_minor)
        theta = rng.uniform(-math.pi, math.pi)
        c = rng.uniform(a + 1, s - a - 1, 2)
        blob = Blob(c, a, b, theta, _skin(rng, tone, p.tone_jitter))
        box = blob.box()
        if box[0] < 0 or box[1] < 0 or box[2] > s or box[3] > s:
            continue
        if any(_box_iou(box, o.box()) > 0.3 or np.hypot(*(c - o.center)) < p.min_center_gap
               or (not (is_hand and o_hand) and np.hypot(*(c - o.center)) < a + o.semi_major + clear)
               for o, o_hand in placed):
            continue
        if any(_seg_dist(c, a0, a1) < a + w / 2 + (2 if is_hand and arm else clear) for a0, a1, w, arm in bars):
            continue
        bar = None
        if bar_tone is not None:
            length, width = rng.uniform(*p.arm_length), rng.uniform(*p.arm_width)
            start = c - blob.u * a * 0.8
            end = start - blob.u * length
            if any(_seg_dist(o.center, start, end) < o.semi_major + width / 2 + (2 if is_hand and o_hand else clear)
                   for o, o_hand in placed):
                continue
            near = [(a0, a1, w) for a0, a1, w, arm in bars if not (is_hand and arm)]
            if not _bars_apart(start, end, width, near, clear):
                continue
            bar = (start, end, width)
        return blob, bar
    raise _Infeasible


def _bars_apart(start, end, width, others, margin) -> bool:
    for t in np.linspace(0, 1, 9):
        q = start + t * (end - start)
        if any(_seg_dist(q, a0, a1) < (width + w) / 2 + margin for a0, a1, w in others):
            return False
    return True


def _tone(rng, levels: int) -> float:
    return float(rng.integers(levels)) / max(levels - 1, 1) if levels > 0 else float(rng.uniform(0, 1))


def _other_tone(rng, avoid, gap, levels: int = 0) -> float:
    for _ in range(1000):
        t = _tone(rng, levels)
        if all(abs(t - v) >= gap for v in avoid):
            return t
    raise _Infeasible


def _paint_bar(img, xs, ys, a0, a1, w, color):
    ab = a1 - a0
    tt = np.clip(((xs - a0[0]) * ab[0] + (ys - a0[1]) * ab[1]) / np.dot(ab, ab), 0, 1)
    d = np.hypot(xs - (a0[0] + tt * ab[0]), ys - (a0[1] + tt * ab[1]))
    img[d <= w / 2] = np.clip(color, 0, 1)


def _render(rng, p: GeneratorParams, hands, distractors, arms, decoys) -> np.ndarray:
    s = p.size
    ys, xs = np.mgrid[0:s, 0:s] + 0.5
    # smooth background: two random colors blended along a random direction
    c0, c1 = rng.uniform(0.05, 0.6, (2, 3))
    ang = rng.uniform(0, 2 * math.pi)
    t = ((xs * math.cos(ang) + ys * math.sin(ang)) / s + 1) / 2
    img = c0 + (c1 - c0) * np.clip(t, 0, 1)[..., None]
    for blob, (a0, a1, w) in zip(hands, arms):
        _paint_bar(img, xs, ys, a0, a1, w, blob.color * 0.95)
    for a0, a1, w, color in decoys:
        _paint_bar(img, xs, ys, a0, a1, w, color * 0.95)
    for blob in list(hands) + list(distractors):
        u = blob.u
        dx, dy = xs - blob.center[0], ys - blob.center[1]
        pu = dx * u[0] + dy * u[1]
        pv = -dx * u[1] + dy * u[0]
        inside = (pu / blob.semi_major) ** 2 + (pv / blob.semi_minor) ** 2 <= 1
        img[inside] = blob.color
    img = img + rng.normal(0, p.pixel_noise, img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _draw_count(rng, probs) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    return int(rng.choice(len(probs), p=probs / probs.sum()))


def generate_scene(image_id: str, rng: np.random.Generator, p: GeneratorParams) -> SyntheticScene:
    n_hands = _draw_count(rng, p.hand_count_probs)
    n_dis = _draw_count(rng, p.distractor_count_probs)
    placed, bars, hands, distractors, arms, decoys = [], [], [], [], [], []
    person_tone = _tone(rng, p.tone_levels)
    kinds = ["hand"] * n_hands + ["distractor"] * n_dis
    rng.shuffle(kinds)
    for kind in kinds:
        is_hand = kind == "hand"
        if is_hand:
            tone, bar_tone = person_tone, person_tone
        else:
            tone = _other_tone(rng, [person_tone], p.tone_gap, p.tone_levels)
            bar_tone = _other_tone(rng, [tone], p.tone_gap, p.tone_levels) if rng.random() < p.decoy_prob else None
        blob, bar = _place(rng, p, placed, bars, is_hand, tone, bar_tone)
        placed.append((blob, is_hand))
        if bar is not None:
            bars.append((*bar, is_hand))
        if is_hand:
            hands.append(blob)
            arms.append(bar)
        else:
            distractors.append(blob)
            if bar is not None:
                decoys.append((*bar, _skin(rng, bar_tone, p.tone_jitter)))
    image = _render(rng, p, hands, distractors, arms, decoys)
    return SyntheticScene(image_id, image, hands, distractors, arms, decoys)


def generate_scenes(n: int, seed: int, params: GeneratorParams = GeneratorParams(),
                    prefix: str = "scene", stream: str = "scene-gen") -> list[SyntheticScene]:
    """``n`` scenes, fully determined by ``seed`` and the sub-stream name."""
    if n < 1:
        raise ValueError(f"need at least one scene, got n={n}")
    scenes = []
    for k in range(n):
        for attempt in range(100):
            rng = rng_stream(seed, stream, k, attempt)
            try:
                scenes.append(generate_scene(f"{prefix}_{k:05d}", rng, params))
                break
            except _Infeasible:
                log.info("scene %d: placement infeasible, regenerating with sub-seed %d", k, attempt + 1)
        else:
            raise RuntimeError(f"scene {k}: no feasible placement after 100 sub-seeds")
    return scenes


def write_scenes(scenes, out_dir) -> None:
    """``images/<id>.ppm`` plus ``annotations.jsonl`` in the shared quadrilateral format."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    anns = []
    for sc in scenes:
        write_ppm(image_path(img_dir, sc.image_id), sc.image)
        anns.extend(sc.annotations())
    write_jsonl(os.path.join(out_dir, "annotations.jsonl"), (annotation_to_record(a) for a in anns))
