import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_nms, pairwise_iou_loop
from srnkit.anchors import AnchorSet, PyramidConfig, generate_pyramid_anchors
from srnkit.coding import decode
from srnkit.refine import (
    AlignmentError, Detection, Detections, StepScores, merge_multiscale, nms, nms_indices, run_inference,
    stc_filter, str_refine,
)


def _random_scores(n, rng, delta_scale=0.3):
    return StepScores(rng.random(n), rng.normal(0, delta_scale, (n, 4)), rng.random(n),
                      rng.normal(0, delta_scale, (n, 4)))


def test_stc_threshold_rule(anchors_256):
    n = len(anchors_256)
    s = StepScores.zeros(n)
    first = np.full(n, 0.005)
    scores = StepScores(first, s.first_deltas, s.second_scores, s.second_deltas)
    kept = set(stc_filter(anchors_256, scores, 0.01).tolist())
    level0 = anchors_256.level_slice(0).start
    level4 = anchors_256.level_slice(4).start
    assert level0 not in kept
    assert level4 in kept
    assert len(kept) == int(anchors_256.high_mask.sum())


def test_stc_theta_zero_keeps_all(anchors_256):
    scores = StepScores.zeros(len(anchors_256))
    assert len(stc_filter(anchors_256, scores, 0.0)) == len(anchors_256)


def test_stc_matches_per_anchor_rule(anchors_256):
    rng = np.random.default_rng(4)
    scores = _random_scores(len(anchors_256), rng)
    low = anchors_256.config.low_level_count
    for theta in (0.01, 0.3, 0.9):
        expected = [i for i in range(len(anchors_256))
                    if anchors_256.levels[i] >= low or scores.first_scores[i] >= theta]
        assert stc_filter(anchors_256, scores, theta).tolist() == expected


def test_stc_monotone_in_theta(anchors_256):
    scores = _random_scores(len(anchors_256), np.random.default_rng(8))
    sizes = [len(stc_filter(anchors_256, scores, t)) for t in np.linspace(0, 1, 21)]
    assert sizes == sorted(sizes, reverse=True)


def test_misaligned_scores(anchors_256):
    with pytest.raises(AlignmentError):
        stc_filter(anchors_256, StepScores.zeros(len(anchors_256) - 1))


def test_step_scores_validation():
    with pytest.raises(ValueError):
        StepScores(np.array([1.5]), np.zeros((1, 4)), np.array([0.5]), np.zeros((1, 4)))
    with pytest.raises(AlignmentError):
        StepScores(np.array([0.5, 0.5]), np.zeros((1, 4)), np.array([0.5, 0.5]), np.zeros((2, 4)))


def test_str_zero_deltas_identity(anchors_256):
    refined = str_refine(anchors_256, StepScores.zeros(len(anchors_256)))
    np.testing.assert_allclose(refined, anchors_256.boxes, rtol=0, atol=1e-9)


def test_str_selective(anchors_256):
    rng = np.random.default_rng(9)
    scores = _random_scores(len(anchors_256), rng)
    refined = str_refine(anchors_256, scores)
    low = anchors_256.low_mask
    np.testing.assert_array_equal(refined[low], anchors_256.boxes[low])
    high = np.flatnonzero(~low)
    np.testing.assert_allclose(refined[high], decode(anchors_256.boxes[high], scores.first_deltas[high]))


def test_str_doubling_delta(anchors_256):
    n = len(anchors_256)
    d = np.zeros((n, 4))
    d[:, 2:] = math.log(2)
    refined = str_refine(anchors_256, StepScores(np.zeros(n), d, np.zeros(n), np.zeros((n, 4))))
    i = anchors_256.level_slice(5).start
    a = anchors_256.boxes[i]
    cx, cy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    w, h = 2 * (a[2] - a[0]), 2 * (a[3] - a[1])
    np.testing.assert_allclose(refined[i], [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def test_nms_identical_boxes():
    d = Detections([[0, 0, 10, 10], [0, 0, 10, 10]], [0.4, 0.9])
    out = nms(d, 0.4)
    assert len(out) == 1 and out.scores[0] == 0.9


def test_nms_disjoint_sorted():
    d = Detections([[0, 0, 1, 1], [5, 5, 6, 6], [10, 10, 11, 11]], [0.2, 0.7, 0.5])
    assert nms(d).scores.tolist() == [0.7, 0.5, 0.2]


def test_nms_tie_break_earlier_index():
    d = Detections([[0, 0, 10, 10], [0, 0, 10, 10.5]], [0.5, 0.5])
    assert nms_indices(d.boxes, d.scores, 0.4).tolist() == [0]


def _random_dets(rng, n):
    xy = rng.uniform(0, 100, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(2, 40, (n, 2))])
    scores = np.round(rng.random(n), 2)  # coarse scores force ties
    return boxes, scores


def test_nms_matches_reference():
    rng = np.random.default_rng(21)
    for _ in range(200):
        boxes, scores = _random_dets(rng, int(rng.integers(0, 201)))
        thr = float(rng.choice([0.0, 0.3, 0.4, 0.5, 0.7]))
        assert nms_indices(boxes, scores, thr).tolist() == brute_nms(boxes, scores, thr)


def test_run_inference_empty():
    cfg = PyramidConfig(input_width=16, input_height=16, strides=(4, 8), low_level_count=1)
    a = generate_pyramid_anchors(cfg)
    # every anchor is low level... make level 2 empty by forcing scores there to push boxes out of frame
    n = len(a)
    first = np.zeros(n)
    deltas = np.zeros((n, 4))
    deltas[:, 0] = 100.0  # high-level anchors move far outside the frame
    out = run_inference(a, StepScores(first, deltas, np.zeros(n), np.zeros((n, 4))))
    assert len(out) == 0


def test_run_inference_no_high_levels_all_filtered():
    a = AnchorSet(np.array([[0, 0, 8, 8.0]]), np.array([0]),
                  PyramidConfig(input_width=8, input_height=8, strides=(4, 8), low_level_count=1), (0, 1, 1))
    out = run_inference(a, StepScores(np.array([0.001]), np.zeros((1, 4)), np.array([0.9]), np.zeros((1, 4))))
    assert len(out) == 0


def test_run_inference_single_anchor():
    cfg = PyramidConfig(input_width=8, input_height=8, strides=(4, 8), low_level_count=1)
    a = AnchorSet(np.array([[-2, -3, 6, 7.0]]), np.array([0]), cfg, (0, 1, 1))
    out = run_inference(a, StepScores(np.array([0.9]), np.zeros((1, 4)), np.array([0.9]), np.zeros((1, 4))))
    assert len(out) == 1
    det = next(iter(out))
    assert det == Detection((0, 0, 6, 7), 0.9)


def test_run_inference_identical_boxes_collapse():
    cfg = PyramidConfig(input_width=64, input_height=64, strides=(4, 8), low_level_count=1)
    n = 1000
    a = AnchorSet(np.tile([10, 10, 30, 35.0], (n, 1)), np.zeros(n, dtype=int), cfg, (0, n, n))
    scores = np.linspace(0.1, 0.95, n)
    out = run_inference(a, StepScores(np.ones(n), np.zeros((n, 4)), scores, np.zeros((n, 4))))
    assert len(out) == 1 and out.scores[0] == pytest.approx(0.95)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_run_inference_output_invariants(seed):
    cfg = PyramidConfig(input_width=320, input_height=240)
    a = generate_pyramid_anchors(cfg)
    scores = _random_scores(len(a), np.random.default_rng(seed))
    out = run_inference(a, scores)
    assert len(out) <= 750
    assert np.all(np.diff(out.scores) <= 0)
    assert np.all(out.boxes[:, [0, 1]] >= 0)
    assert np.all(out.boxes[:, 2] <= 320) and np.all(out.boxes[:, 3] <= 240)
    ious = pairwise_iou_loop(out.boxes, out.boxes)
    np.fill_diagonal(ious, 0)
    assert ious.max(initial=0) <= 0.4
    again = run_inference(a, scores)
    np.testing.assert_array_equal(out.boxes, again.boxes)
    np.testing.assert_array_equal(out.scores, again.scores)


def test_top_k_applies_after_filter():
    cfg = PyramidConfig(input_width=64, input_height=64, strides=(4, 8), low_level_count=1)
    a = generate_pyramid_anchors(cfg)
    n = len(a)
    rng = np.random.default_rng(0)
    second = rng.random(n)
    out = run_inference(a, StepScores(np.ones(n), np.zeros((n, 4)), second, np.zeros((n, 4))), top_k=1)
    assert len(out) == 1 and out.scores[0] == second.max()


def test_merge_single_scale_is_nms():
    rng = np.random.default_rng(2)
    boxes, scores = _random_dets(rng, 60)
    d = Detections(boxes, scores)
    merged = merge_multiscale([(1.0, d)])
    ref = nms(d)
    np.testing.assert_array_equal(merged.boxes, ref.boxes)


def test_merge_duplicate_across_scales():
    d1 = Detections([[10, 10, 40, 50]], [0.8])
    d2 = Detections([[20, 20, 80, 100]], [0.9])
    out = merge_multiscale([(1.0, d1), (2.0, d2)])
    assert len(out) == 1
    np.testing.assert_allclose(out.boxes[0], [10, 10, 40, 50])
    assert out.scores[0] == 0.9


def test_merge_disjoint_union():
    d1 = Detections([[0, 0, 10, 10]], [0.5])
    d2 = Detections([[100, 100, 140, 140]], [0.6])
    out = merge_multiscale([(1.0, d1), (0.5, d2)])
    assert sorted(map(tuple, out.boxes.tolist())) == [(0, 0, 10, 10), (200, 200, 280, 280)]


def test_merge_rejects_bad_scale():
    with pytest.raises(ValueError):
        merge_multiscale([(0.0, Detections.empty())])
