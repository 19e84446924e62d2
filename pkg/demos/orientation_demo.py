"""Orientation from an annotated quad, and the wrapped loss near 0/360 degrees."""

import math

import numpy as np

from handctx.orientation import HandAnnotation, orientation_from_quad, orientation_loss

# wrist edge on the left, fingers to the right: the hand points along +x
quad = np.array([[0, 10], [0, 0], [20, 0], [20, 10]], dtype=float)
ann = HandAnnotation("demo", quad, wrist_side=0)
print("orientation (deg):", math.degrees(orientation_from_quad(ann)))

for a, b in [(359, 1), (90, 270), (10, 40)]:
    print(f"L({a}, {b}) = {math.degrees(orientation_loss(math.radians(a), math.radians(b))):.6f} deg")
