import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from v2xfuse import tensors as T
from v2xfuse.geometry import GridMeta
from v2xfuse.params import zeros
from v2xfuse.pillars import (N_STATS, EncoderParams, PointCloud, encode_bev, load_points_txt, pillarize,
                             save_points_txt)

META = GridMeta(x_min=0.0, y_min=0.0, resolution=0.5, height=6, width=8, z_min=-3.0, z_max=3.0)


def cell_center(i, j, m=META):
    return m.x_min + (j + 0.5) * m.resolution, m.y_min + (i + 0.5) * m.resolution


def test_empty_cloud():
    s = pillarize(PointCloud.empty(), META)
    assert s.shape == (N_STATS, 6, 8) and not s.any()


def test_single_point_bookkeeping():
    x, y = cell_center(2, 3)
    s = pillarize(PointCloud([[x, y, 1.0, 0.5]]), META)
    np.testing.assert_array_equal(s[:, 2, 3], [1, 1.0, 1.0, 0.5])
    s[:, 2, 3] = 0
    assert not s.any()


def test_two_points_statistics():
    x, y = cell_center(1, 1)
    s = pillarize(PointCloud([[x, y, 0.0, 0.2], [x + 0.1, y, 2.0, 0.4]]), META)
    np.testing.assert_allclose(s[:, 1, 1], [2, 1.0, 2.0, 0.3])


def test_out_of_range_dropped():
    s = pillarize(PointCloud([[-1, 1, 0, 1], [1, 1, 9.0, 1], [100, 1, 0, 1]]), META)
    assert not s.any()


def test_nonfinite_cloud_rejected():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan, 0]])


@given(st.integers(0, 2**31), st.integers(-2, 2), st.integers(-2, 2))
def test_translation_equivariance(seed, di, dj):
    r = np.random.default_rng(seed)
    big = GridMeta(0.0, 0.0, 0.5, 12, 12, -3.0, 3.0)
    pts = np.column_stack([r.integers(3, 9, 30) * 0.5 + r.uniform(0.05, 0.45, 30),
                           r.integers(3, 9, 30) * 0.5 + r.uniform(0.05, 0.45, 30),
                           r.uniform(-1, 1, 30), r.uniform(0, 1, 30)])
    a = pillarize(PointCloud(pts), big)
    shifted = pts + np.array([dj * 0.5, di * 0.5, 0, 0])
    b = pillarize(PointCloud(shifted), big)
    np.testing.assert_allclose(b, np.roll(a, (di, dj), axis=(1, 2)), atol=1e-12)


@given(st.integers(0, 2**31))
def test_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    pts = np.column_stack([r.uniform(0, 4, 50), r.uniform(0, 3, 50), r.uniform(-2, 2, 50), r.uniform(0, 1, 50)])
    np.testing.assert_allclose(pillarize(PointCloud(pts), META), pillarize(PointCloud(r.permutation(pts)), META),
                               atol=1e-12)


def test_encoder_zero_in_zero_out(rng):
    p = EncoderParams.init(rng, 6)
    assert not encode_bev(np.zeros((4, 6, 8)), p, META).features.data.any()


def test_encoder_shape_and_determinism(rng):
    p = EncoderParams.init(rng, 6)
    stats = pillarize(PointCloud(np.column_stack([rng.uniform(0, 4, 40), rng.uniform(0, 3, 40),
                                                  rng.normal(size=40), rng.uniform(0, 1, 40)])), META)
    g1, g2 = encode_bev(stats, p, META, 0.3), encode_bev(stats, p, META, 0.3)
    assert g1.features.shape == (6, 6, 8) and g1.meta == META and g1.timestamp == 0.3
    assert np.array_equal(g1.features.data, g2.features.data)


def test_encoder_shape_mismatch(rng):
    with pytest.raises(T.ShapeError):
        encode_bev(np.zeros((3, 6, 8)), EncoderParams.init(rng, 4), META)


def test_encoder_grad(rng):
    m = GridMeta(0.0, 0.0, 0.5, 4, 5)
    stats = pillarize(PointCloud(np.column_stack([rng.uniform(0, 2.5, 25), rng.uniform(0, 2, 25),
                                                  rng.normal(size=25), rng.uniform(0, 1, 25)])), m)
    for _ in range(10):
        p = EncoderParams.init(rng, 3)
        p.b1.data = rng.normal(0, 0.3, 3)
        w = rng.normal(size=(3, 4, 5))
        assert T.grad_check(lambda: T.sum_(T.mul(encode_bev(stats, p, m).features, w)), p.parameters()) < 1e-5


def test_point_file_round_trip(tmp_path, rng):
    cloud = PointCloud(np.round(rng.normal(size=(7, 4)), 6))
    path = tmp_path / "pts.txt"
    save_points_txt(cloud, path)
    np.testing.assert_allclose(load_points_txt(path).points, cloud.points, atol=1e-6)
    path.write_text("# header\n1 2 3 4\n\n5 6 7\n")
    with pytest.raises(ValueError, match=":4:"):
        load_points_txt(path)
