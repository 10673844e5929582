import math

import numpy as np
import pytest

from v2xfuse import tensors as T
from v2xfuse.distillation import TeacherParams, distill_loss, teacher_features, to_ego_frame, union_cloud
from v2xfuse.geometry import BEVGrid, GridMeta, Pose6DoF
from v2xfuse.pillars import PointCloud

META = GridMeta.centered(8, 10, 0.5)
EGO = Pose6DoF(10.0, -3.0, 1.7, 0.0, 0.4, 0.0)
INF = Pose6DoF(12.0, 0.0, 6.0, 0.0, -2.0, 0.0)


def cloud(rng, n=40):
    return PointCloud(np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(-1, 1, n),
                                       rng.uniform(0, 1, n)]))


def grid(arr):
    return BEVGrid(T.tensor(arr), GridMeta.centered(arr.shape[1], arr.shape[2], 0.4))


def test_to_ego_frame_identity(rng):
    c = cloud(rng)
    np.testing.assert_allclose(to_ego_frame(c, EGO, EGO).points, c.points, atol=1e-12)


def test_to_ego_frame_translation():
    c = PointCloud([[0.0, 0.0, 0.0, 0.5]])
    out = to_ego_frame(c, Pose6DoF(3.0, 4.0, 1.0, 0, 0, 0), Pose6DoF(0, 0, 0, 0, math.pi / 2, 0))
    np.testing.assert_allclose(out.points, [[4.0, -3.0, 1.0, 0.5]], atol=1e-12)


def test_empty_cloud_is_neutral(rng):
    p = TeacherParams.init(rng, 4)
    c = cloud(rng)
    both = teacher_features([PointCloud.empty(), c], [EGO, INF], EGO, p, META).features.data
    alone = teacher_features([c], [INF], EGO, p, META).features.data
    assert np.array_equal(both, alone)


def test_union_order_invariant(rng):
    p = TeacherParams.init(rng, 4)
    a, b = cloud(rng), cloud(rng)
    ab = teacher_features([a, b], [EGO, INF], EGO, p, META).features.data
    ba = teacher_features([b, a], [INF, EGO], EGO, p, META).features.data
    np.testing.assert_allclose(ab, ba, atol=1e-12)


def test_union_needs_one_pose_per_cloud(rng):
    with pytest.raises(ValueError):
        union_cloud([cloud(rng)], [EGO, INF], EGO)


def test_teacher_shape_matches_grid(rng):
    out = teacher_features([cloud(rng)], [EGO], EGO, TeacherParams.init(rng, 6), META)
    assert out.features.shape == (6,) + META.shape and out.meta == META


def test_freeze_blocks_gradients(rng):
    p = TeacherParams.init(rng, 3).freeze()
    assert not any(t.requires_grad for t in p.parameters())
    student = T.tensor(rng.normal(size=(3,) + META.shape), requires_grad=True)
    t = teacher_features([cloud(rng)], [EGO], EGO, p, META)
    distill_loss(BEVGrid(student, META), t).backward()
    assert student.grad is not None
    assert all(q.grad is None for q in p.parameters())


def test_distill_zero_on_match(rng):
    x = rng.normal(size=(4, 3, 3))
    assert abs(distill_loss(grid(x), grid(x)).item()) < 1e-12
    assert distill_loss(grid(x), grid(x), "l2").item() == 0.0


def test_distill_hand_case():
    s = grid(np.log([0.5, 0.5]).reshape(2, 1, 1))
    t = grid(np.log([0.9, 0.1]).reshape(2, 1, 1))
    assert distill_loss(s, t).item() == pytest.approx(0.3681, abs=1e-4)


def test_distill_nonnegative(rng):
    for _ in range(200):
        assert distill_loss(grid(rng.normal(size=(3, 2, 2)) * 2), grid(rng.normal(size=(3, 2, 2)) * 2)).item() >= 0


def test_distill_grad_student_only(rng):
    for _ in range(10):
        s = T.tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
        t = T.tensor(rng.normal(size=(3, 2, 3)), requires_grad=True)
        meta = GridMeta.centered(2, 3, 0.4)
        f = lambda: distill_loss(BEVGrid(s, meta), BEVGrid(t, meta))  # noqa: E731
        assert T.grad_check(f, [s]) < 1e-5
        s.grad = t.grad = None
        f().backward()
        assert t.grad is None


def test_distill_errors(rng):
    with pytest.raises(T.ShapeError):
        distill_loss(grid(np.zeros((2, 2, 2))), grid(np.zeros((3, 2, 2))))
    with pytest.raises(ValueError):
        distill_loss(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 2, 2))), "cosine")
