"""Hand orientation: geometry from annotated quadrilaterals and the wrapped angular loss.

Angles are radians in (-pi, pi], measured counter-clockwise from the +x
axis with y pointing *up*.  Image coordinates have y pointing down, so a
vector (dx, dy) in pixels has angle ``atan2(-dy, dx)``.  Predictions and
ground truth go through the same conversion, so evaluation does not
depend on the choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateError, UsageError

DEFAULT_LAMBDA = 0.1


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


def image_vector_angle(dx: float, dy: float) -> float:
    """Angle of a pixel-space vector (y down) in the y-up convention."""
    return math.atan2(-dy, dx)


@dataclass
class HandAnnotation:
    """Quadrilateral hand box; side ``i`` joins corners i and (i+1) % 4."""

    image_id: str
    quad: np.ndarray
    wrist_side: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64).reshape(4, 2)
        if not 0 <= int(self.wrist_side) <= 3:
            raise UsageError(f"wrist_side must be in 0..3, got {self.wrist_side}")
        self.wrist_side = int(self.wrist_side)

    @property
    def orientation(self) -> float:
        return orientation_from_quad(self)

    def axis_aligned_box(self) -> tuple[float, float, float, float]:
        (x0, y0), (x1, y1) = self.quad.min(axis=0), self.quad.max(axis=0)
        return float(x0), float(y0), float(x1), float(y1)


def quad_centroid(quad: np.ndarray) -> np.ndarray:
    """Area centroid of a simple polygon; vertex mean if the area vanishes."""
    q = np.asarray(quad, dtype=np.float64)
    origin = q.mean(axis=0)
    x, y = q[:, 0] - origin[0], q[:, 1] - origin[1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2
    if abs(area) < 1e-12:
        return origin
    return origin + np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6 * area)


def orientation_from_quad(ann: HandAnnotation) -> float:
    """Angle of the vector from the wrist-side midpoint to the quadrilateral centroid."""
    q = ann.quad
    i = ann.wrist_side
    wrist = (q[i] + q[(i + 1) % 4]) / 2
    center = quad_centroid(q)
    dx, dy = center - wrist
    if math.hypot(dx, dy) < 1e-12:
        raise DegenerateError(f"degenerate annotation for image {ann.image_id!r}: centroid lies on the wrist side")
    return image_vector_angle(dx, dy)


def orientation_loss(theta, theta_star):
    """|atan2(sin(d), cos(d))| with d = theta - theta_star; works on floats and arrays."""
    d = np.asarray(theta, dtype=np.float64) - np.asarray(theta_star, dtype=np.float64)
    out = np.abs(np.arctan2(np.sin(d), np.cos(d)))
    return float(out) if out.ndim == 0 else out


def orientation_loss_grad(theta, theta_star):
    """d loss / d theta = sign of the wrapped difference; 0 at the kinks (0 and pi)."""
    d = np.arctan2(np.sin(np.asarray(theta, dtype=np.float64) - theta_star),
                   np.cos(np.asarray(theta, dtype=np.float64) - theta_star))
    g = np.where(d >= np.pi, 0.0, np.sign(d))
    return float(g) if g.ndim == 0 else g


def orientation_loss_tensor(theta, theta_star) -> T.Tensor:
    """Elementwise wrapped loss recorded on the active tape."""
    d = T.sub(theta, theta_star)
    return T.abs_(T.atan2(T.sin(d), T.cos(d)))


@dataclass(frozen=True)
class OrientationLossConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"orientation loss weight must be >= 0, got {self.lam}")


def combined_loss(task_losses: Sequence, l_ori, cfg: OrientationLossConfig = OrientationLossConfig()):
    """sum(task_losses) + lam * l_ori.  Accepts floats or tape tensors."""
    for v in [*task_losses, l_ori]:
        val = v.item() if isinstance(v, T.Tensor) else float(v)
        if not math.isfinite(val) or val < 0:
            raise UsageError(f"losses must be finite and non-negative, got {val}")
    total = 0.0
    for v in task_losses:
        total = total + v
    return total + l_ori * cfg.lam
