import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2xfuse import tensors as T
from v2xfuse.detection import (HEAD_CHANNELS, DetectionHeadParams, RotatedBox, average_precision, build_targets,
                               decode_boxes, detect_head, detection_loss, iou_matrix, nms, read_records,
                               rotated_iou, write_records)
from v2xfuse.geometry import BEVGrid, GridMeta

META = GridMeta.centered(4, 5, 0.5)


def aa_iou(a, b):
    """Closed form for yaw-free boxes (l along x, w along y)."""
    ix = max(0.0, min(a.cx + a.l / 2, b.cx + b.l / 2) - max(a.cx - a.l / 2, b.cx - b.l / 2))
    iy = max(0.0, min(a.cy + a.w / 2, b.cy + b.w / 2) - max(a.cy - a.w / 2, b.cy - b.w / 2))
    inter = ix * iy
    return inter / (a.w * a.l + b.w * b.l - inter)


def mc_iou(a, b, n, r):
    lo = np.minimum(a.corners().min(0), b.corners().min(0))
    hi = np.maximum(a.corners().max(0), b.corners().max(0))
    pts = r.uniform(lo, hi, size=(n, 2))
    ia, ib = a.contains(pts[:, 0], pts[:, 1]), b.contains(pts[:, 0], pts[:, 1])
    return (ia & ib).sum() / max(1, (ia | ib).sum())


box_st = st.builds(RotatedBox, st.floats(-3, 3), st.floats(-3, 3), st.floats(0.3, 3), st.floats(0.3, 3),
                   st.floats(-math.pi, math.pi))


# ---------------------------------------------------------------- boxes


def test_box_validation():
    with pytest.raises(ValueError):
        RotatedBox(0, 0, 0.0, 1)
    with pytest.raises(ValueError):
        RotatedBox(0, 0, 1, 1, score=1.5)


# ---------------------------------------------------------------- head and decode


def test_zero_head_gives_half_probability(rng):
    p = DetectionHeadParams.init(rng, 3)
    p.weight.data[:] = 0.0
    p.bias.data[:] = 0.0
    raw = detect_head(BEVGrid(T.tensor(rng.normal(size=(3, 4, 5))), META), p)
    assert raw.shape == (HEAD_CHANNELS, 4, 5)
    assert not raw.data.any()
    boxes = decode_boxes(raw, META, 0.5)
    assert len(boxes) == 20 and all(b.score == 0.5 for b in boxes)


def test_zero_regression_decodes_at_cell_center():
    raw = np.zeros((HEAD_CHANNELS, 4, 5))
    raw[0] = -20.0
    raw[0, 1, 2] = 5.0
    (b,) = decode_boxes(raw, META, 0.5)
    xs, ys = META.cell_centers()
    assert (b.cx, b.cy, b.w, b.l, b.yaw) == (xs[1, 2], ys[1, 2], 1.0, 1.0, 0.0)


def test_decode_yaw_and_offsets():
    raw = np.zeros((HEAD_CHANNELS, 1, 1))
    raw[:, 0, 0] = [3.0, 0.5, -1.0, math.log(2.0), math.log(4.0), 1.0, 0.0]
    (b,) = decode_boxes(raw, GridMeta(0.0, 0.0, 0.5, 1, 1), 0.5)
    assert b.yaw == pytest.approx(math.pi / 2)
    assert (b.cx, b.cy) == pytest.approx((0.25 + 0.25, 0.25 - 0.5))
    assert (b.w, b.l) == pytest.approx((2.0, 4.0))


def test_threshold_one_is_empty(rng):
    assert decode_boxes(rng.normal(size=(HEAD_CHANNELS, 4, 5)), META, 1.0) == []
    with pytest.raises(ValueError):
        decode_boxes(np.zeros((HEAD_CHANNELS, 1, 1)), META, 1.5)


def test_top_k_keeps_highest(rng):
    raw = rng.normal(size=(HEAD_CHANNELS, 4, 5))
    all_boxes = decode_boxes(raw, META, 0.0)
    top = decode_boxes(raw, META, 0.0, top_k=3)
    assert sorted(b.score for b in top) == sorted(b.score for b in all_boxes)[-3:]


def test_targets_positive_cells():
    gt = [RotatedBox(0.0, 0.0, 1.0, 1.0)]
    t = build_targets(gt, META)
    xs, ys = META.cell_centers()
    expect = (np.abs(xs) <= 0.5) & (np.abs(ys) <= 0.5)
    assert np.array_equal(t.positive, expect)
    np.testing.assert_allclose(t.regression[0][expect], -xs[expect] / 0.5)


def test_tiny_box_gets_a_cell():
    t = build_targets([RotatedBox(0.1, 0.1, 0.05, 0.05)], META)
    assert t.positive.sum() == 1


def test_head_and_loss_grad(rng):
    gt = [RotatedBox(0.3, -0.2, 1.2, 0.8, 0.4), RotatedBox(-0.7, 0.4, 0.6, 0.9, -1.0)]
    targets = build_targets(gt, META)
    for _ in range(5):
        p = DetectionHeadParams.init(rng, 3)
        p.weight.data = rng.normal(0, 0.5, p.weight.shape)
        feats = T.tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
        f = lambda: detection_loss(detect_head(BEVGrid(feats, META), p), targets)[0]
        # the loss is O(10), so a wider step keeps central-difference roundoff below the floor
        assert T.grad_check(f, p.parameters() + [feats], epsilon=1e-5) < 1e-4


def test_loss_without_positives_is_classification_only(rng):
    raw = T.tensor(rng.normal(size=(HEAD_CHANNELS, 4, 5)))
    total, parts = detection_loss(raw, build_targets([], META))
    assert parts["reg"] == 0.0 and total.item() == pytest.approx(parts["cls"])


# ---------------------------------------------------------------- IoU


def test_iou_identical():
    b = RotatedBox(1.0, 2.0, 1.5, 3.0, 0.7)
    assert rotated_iou(b, b) == pytest.approx(1.0, abs=1e-12)


def test_iou_half_overlap():
    assert rotated_iou(RotatedBox(0, 0, 1, 1), RotatedBox(0.5, 0, 1, 1)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_rotated_square():
    inter = 2 * (math.sqrt(2) - 1)
    expect = inter / (2 - inter)
    iou = rotated_iou(RotatedBox(0, 0, 1, 1), RotatedBox(0, 0, 1, 1, math.pi / 4))
    assert iou == pytest.approx(expect, abs=1e-12)
    assert iou == pytest.approx(0.7071, abs=1e-4)
    assert mc_iou(RotatedBox(0, 0, 1, 1), RotatedBox(0, 0, 1, 1, math.pi / 4), 10**6,
                  np.random.default_rng(3)) == pytest.approx(expect, abs=0.003)


def test_iou_disjoint():
    assert rotated_iou(RotatedBox(0, 0, 1, 1), RotatedBox(5, 0, 1, 1)) == 0.0


@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = rotated_iou(a, b), rotated_iou(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= 1.0 + 1e-12


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.lists(st.floats(0.2, 3), min_size=4, max_size=4))
def test_iou_axis_aligned_closed_form(c, s):
    a, b = RotatedBox(c[0], c[1], s[0], s[1]), RotatedBox(c[2], c[3], s[2], s[3])
    assert rotated_iou(a, b) == pytest.approx(aa_iou(a, b), abs=1e-12)


def test_iou_monte_carlo_random_pairs():
    r = np.random.default_rng(11)
    for _ in range(200):
        # centres drawn close together so most pairs actually overlap
        a = RotatedBox(*r.uniform(-0.5, 0.5, 2), *r.uniform(0.5, 2.5, 2), r.uniform(-math.pi, math.pi))
        b = RotatedBox(*r.uniform(-0.5, 0.5, 2), *r.uniform(0.5, 2.5, 2), r.uniform(-math.pi, math.pi))
        assert abs(rotated_iou(a, b) - mc_iou(a, b, 200_000, r)) < 0.005


def test_iou_matrix_shapes():
    a = [RotatedBox(0, 0, 1, 1), RotatedBox(1, 0, 1, 1)]
    assert iou_matrix(a, []).shape == (2, 0)
    np.testing.assert_allclose(iou_matrix(a, a), [[1, 0], [0, 1]], atol=1e-12)


# ---------------------------------------------------------------- NMS


def test_nms_single():
    b = RotatedBox(0, 0, 1, 1, score=0.3)
    assert nms([b]) == [b]
    assert nms([]) == []


def test_nms_identical_pair():
    hi, lo = RotatedBox(0, 0, 1, 1, score=0.9), RotatedBox(0, 0, 1, 1, score=0.8)
    assert nms([lo, hi], 0.5) == [hi]


def test_nms_chain():
    # B overlaps both neighbours, A and C only touch; once A removes B, C survives
    a = RotatedBox(0.0, 0, 1, 1, score=0.9)
    b = RotatedBox(0.5, 0, 1, 1, score=0.8)
    c = RotatedBox(1.0, 0, 1, 1, score=0.7)
    assert rotated_iou(a, b) == pytest.approx(1 / 3) and rotated_iou(a, c) == pytest.approx(0.0)
    assert nms([c, b, a], 0.3) == [a, c]


def test_nms_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 1.5)


@given(st.lists(st.builds(RotatedBox, st.floats(-2, 2), st.floats(-2, 2), st.floats(0.5, 2), st.floats(0.5, 2),
                          st.floats(-3, 3), st.sampled_from([0.2, 0.5, 0.7, 0.9])), max_size=8),
       st.randoms(use_true_random=False))
def test_nms_order_free(boxes, r):
    shuffled = boxes[:]
    r.shuffle(shuffled)
    key = lambda bs: sorted(b.as_row() + (b.score,) for b in bs)  # noqa: E731
    assert key(nms(boxes, 0.4)) == key(nms(shuffled, 0.4))


# ---------------------------------------------------------------- AP


def brute_ap(preds, gts, thr):
    """Sweep one detection at a time and take the precision envelope over every reached recall."""
    order = sorted(((p.score, sid, k) for sid, ps in preds.items() for k, p in enumerate(ps)), reverse=True)
    n_gt = sum(len(g) for g in gts.values())
    used = {sid: set() for sid in gts}
    points = []
    tp = fp = 0
    for _, sid, k in order:
        p = preds[sid][k]
        best, best_iou = None, -1.0
        for g_idx, g in enumerate(gts[sid]):
            if g_idx in used[sid]:
                continue
            v = aa_iou(p, g)
            if v > best_iou:
                best, best_iou = g_idx, v
        if best is not None and best_iou >= thr:
            used[sid].add(best)
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for rec in sorted({p[0] for p in points}):
        ap += (rec - prev) * max(pr for rc, pr in points if rc >= rec)
        prev = rec
    return ap


def test_ap_perfect():
    gt = {"a": [RotatedBox(0, 0, 1, 2), RotatedBox(4, 0, 1, 2)], "b": [RotatedBox(0, 3, 2, 2)]}
    assert average_precision(gt, gt, 0.7) == 1.0


def test_ap_no_predictions():
    assert average_precision({}, {"a": [RotatedBox(0, 0, 1, 1)]}) == 0.0


def test_ap_no_ground_truth_is_undefined():
    assert average_precision({"a": [RotatedBox(0, 0, 1, 1)]}, {"a": []}) is None


def test_ap_unknown_scene():
    with pytest.raises(KeyError):
        average_precision({"z": [RotatedBox(0, 0, 1, 1)]}, {"a": [RotatedBox(0, 0, 1, 1)]})


def test_ap_tp_fp_tp():
    gt = {"s": [RotatedBox(0, 0, 1, 1), RotatedBox(5, 0, 1, 1)]}
    preds = {"s": [RotatedBox(0, 0, 1, 1, score=0.9), RotatedBox(9, 9, 1, 1, score=0.8),
                   RotatedBox(5, 0, 1, 1, score=0.7)]}
    assert average_precision(preds, gt) == pytest.approx(5 / 6, abs=1e-12)
    assert brute_ap(preds, gt, 0.5) == pytest.approx(5 / 6, abs=1e-12)


def test_ap_duplicate_is_false_positive():
    gt = {"s": [RotatedBox(0, 0, 1, 1)]}
    preds = {"s": [RotatedBox(0, 0, 1, 1, score=0.9), RotatedBox(0, 0, 1, 1, score=0.8)]}
    assert average_precision(preds, gt) == 1.0
    preds["s"][0] = RotatedBox(0, 0, 1, 1, score=0.7)
    assert average_precision(preds, gt) == 1.0


def random_instance(r):
    n_scenes = r.integers(1, 3)
    gts, preds = {}, {}
    n_gt = r.integers(1, 6)
    n_pred = r.integers(0, 11)
    for s in range(n_scenes):
        gts[f"s{s}"], preds[f"s{s}"] = [], []
    for _ in range(n_gt):
        gts[f"s{r.integers(n_scenes)}"].append(RotatedBox(*r.uniform(-2, 2, 2), *r.uniform(0.5, 1.5, 2)))
    scores = r.permutation(np.linspace(0.05, 0.95, max(1, n_pred)))
    for k in range(n_pred):
        preds[f"s{r.integers(n_scenes)}"].append(
            RotatedBox(*r.uniform(-2, 2, 2), *r.uniform(0.5, 1.5, 2), 0.0, float(scores[k])))
    return preds, gts


def test_ap_matches_brute_force():
    r = np.random.default_rng(5)
    for _ in range(300):
        preds, gts = random_instance(r)
        for thr in (0.1, 0.5):
            assert average_precision(preds, gts, thr) == pytest.approx(brute_ap(preds, gts, thr), abs=1e-12)


def test_ap_rank_invariant():
    r = np.random.default_rng(6)
    transforms = [lambda s: s ** 3, lambda s: 1 / (1 + math.exp(-10 * (s - 0.5))), lambda s: 0.5 * s + 0.1]
    for _ in range(100):
        preds, gts = random_instance(r)
        base = average_precision(preds, gts, 0.3)
        for f in transforms:
            moved = {sid: [RotatedBox(*b.as_row(), f(b.score)) for b in ps] for sid, ps in preds.items()}
            assert average_precision(moved, gts, 0.3) == base


def test_ap_in_unit_interval():
    r = np.random.default_rng(7)
    for _ in range(100):
        v = average_precision(*random_instance(r))
        assert 0.0 <= v <= 1.0


def test_ap_brute_force_agrees_on_exhaustive_orders():
    # every assignment of a fixed score set to four predictions
    gt = {"s": [RotatedBox(0, 0, 1, 1), RotatedBox(3, 0, 1, 1)]}
    placed = [RotatedBox(0, 0, 1, 1), RotatedBox(0.2, 0, 1, 1), RotatedBox(3, 0, 1, 1), RotatedBox(8, 8, 1, 1)]
    for perm in itertools.permutations([0.9, 0.7, 0.5, 0.3]):
        preds = {"s": [RotatedBox(*b.as_row(), s) for b, s in zip(placed, perm)]}
        assert average_precision(preds, gt) == pytest.approx(brute_ap(preds, gt, 0.5), abs=1e-12)


# ---------------------------------------------------------------- records


def test_records_round_trip(tmp_path, rng):
    boxes = {"s1": [RotatedBox(*rng.normal(size=2), *rng.uniform(0.5, 2, 2), rng.normal(), rng.uniform())
                    for _ in range(3)], "s2": []}
    path = tmp_path / "r.txt"
    write_records(path, boxes)
    back = read_records(path)
    assert back == {"s1": boxes["s1"]}


def test_records_bad_line(tmp_path):
    path = tmp_path / "r.txt"
    path.write_text("s 1 2 3\n")
    with pytest.raises(ValueError, match=":1:"):
        read_records(path)
