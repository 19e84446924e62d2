import math

import numpy as np
import pytest

from handctx.evaluation import iou
from handctx.orientation import orientation_from_quad
from handctx.records import read_annotations, read_ppm
from handctx.scenes import GeneratorParams, generate_scenes, write_scenes


def test_same_seed_same_bytes(tmp_path):
    a = generate_scenes(3, seed=11)
    b = generate_scenes(3, seed=11)
    assert [s.image.tobytes() for s in a] == [s.image.tobytes() for s in b]
    write_scenes(a, tmp_path / "a")
    write_scenes(b, tmp_path / "b")
    for rel in ["annotations.jsonl", "images/scene_00000.ppm", "images/scene_00002.ppm"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_different_seeds_differ():
    assert generate_scenes(1, 1)[0].image.tobytes() != generate_scenes(1, 2)[0].image.tobytes()


def test_prefix_of_larger_set_is_stable():
    # scene k depends only on (seed, k), so small training sets nest in larger ones
    small, big = generate_scenes(4, 5), generate_scenes(9, 5)
    assert [s.image.tobytes() for s in small] == [s.image.tobytes() for s in big[:4]]


def test_no_distractors_means_every_blob_is_a_hand():
    p = GeneratorParams(distractor_count_probs=(1.0,))
    for sc in generate_scenes(30, 3, p):
        assert sc.distractors == [] and sc.decoys == []
        assert len(sc.hands) == len(sc.arms) >= 1


def test_hands_per_image_histogram_matches_params():
    p = GeneratorParams()
    n = 500
    counts = np.bincount([len(s.hands) for s in generate_scenes(n, 21, p)], minlength=len(p.hand_count_probs))
    for k, prob in enumerate(p.hand_count_probs):
        sd = math.sqrt(n * prob * (1 - prob))
        assert abs(counts[k] - n * prob) <= 4 * sd + 1e-9, (k, counts[k], n * prob)


def test_scene_invariants():
    for sc in generate_scenes(60, 8):
        assert len(sc.arms) == len(sc.hands)
        assert len(sc.decoys) <= len(sc.distractors)
        boxes = [b.box() for b in sc.hands + sc.distractors]
        for i in range(len(boxes)):
            x0, y0, x1, y1 = boxes[i]
            assert 0 <= x0 < x1 <= 96 and 0 <= y0 < y1 <= 96
            for j in range(i):
                assert iou(boxes[i], boxes[j]) <= 0.3
        for hand, (start, end, _w), ann in zip(sc.hands, sc.arms, sc.annotations()):
            # arm leaves the wrist side, pointing away from the fingers
            assert orientation_from_quad(ann) == pytest.approx(hand.orientation, abs=1e-9)
            wrist_mid = ann.quad[0:2].mean(axis=0)
            assert np.hypot(*(start - hand.center)) < np.hypot(*(wrist_mid - hand.center)) + 1e-9
            assert np.dot(end - start, hand.u) < 0


def test_write_scenes_roundtrip(tmp_path):
    scenes = generate_scenes(2, 4)
    write_scenes(scenes, tmp_path)
    anns = read_annotations(tmp_path / "annotations.jsonl")
    assert len(anns) == sum(len(s.hands) for s in scenes)
    np.testing.assert_array_equal(read_ppm(tmp_path / "images" / "scene_00001.ppm"), scenes[1].image)
    np.testing.assert_allclose(anns[0].quad, scenes[0].hands[0].quad(), atol=1e-12)


def test_needs_at_least_one_scene():
    with pytest.raises(ValueError):
        generate_scenes(0, 1)
