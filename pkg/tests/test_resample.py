import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biplanar.errors import ParameterError
from biplanar.geometry import make_biplanar_rig, make_pose, project_point, project_point_orthogonal
from biplanar.resample import (
    bilinear_sample, resample_backward, resample_local_features, resample_orthogonal, resampling_operator,
)
from biplanar.volume import SliceSpec, Volume, slice_grid
from oracles import reference_sample


def random_grid(rng, n=(3, 3)):
    return rng.uniform(-1, 1, size=n + (3,))


def test_node_identity(rng):
    fm = rng.standard_normal((5, 7, 3))
    for j in range(5):
        for i in range(7):
            u = (-1 + 2 * i / 6, -1 + 2 * j / 4)
            assert np.array_equal(bilinear_sample(fm, u), fm[j, i])


def test_midpoint_average():
    fm = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
    assert bilinear_sample(fm, (0.0, 0.0))[0] == 1.5


def test_border_clamp(rng):
    fm = rng.standard_normal((4, 4, 2))
    assert np.array_equal(bilinear_sample(fm, (-2.0, 0.0)), bilinear_sample(fm, (-1.0, 0.0)))
    assert np.array_equal(bilinear_sample(fm, (3.0, 7.0)), fm[-1, -1])


def test_zero_padding_outside(rng):
    fm = rng.standard_normal((4, 4, 2)) + 5
    assert np.all(bilinear_sample(fm, (-3.0, 0.0), "zeros") == 0)
    np.testing.assert_allclose(bilinear_sample(fm, (0.1, -0.3), "zeros"), bilinear_sample(fm, (0.1, -0.3)))
    with pytest.raises(ParameterError):
        bilinear_sample(fm, (0, 0), "reflect")


def test_small_random_case_matches_reference(rng):
    fm = rng.standard_normal((4, 4, 2))
    pa, lat = make_biplanar_rig()
    grid = random_grid(rng)
    for pose in (pa, lat):
        out = resample_local_features(fm, pose, grid)
        assert out.shape == (3, 3, 2)
        for idx in np.ndindex(3, 3):
            ref = reference_sample(fm, project_point(pose, grid[idx]).u)
            assert np.max(np.abs(out[idx] - ref)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), sd=st.floats(2.0, 6.0), focal=st.floats(0.5, 4.0),
       padding=st.sampled_from(["border", "zeros"]))
def test_vectorized_equals_per_point_composition(seed, sd, focal, padding):
    rng = np.random.default_rng(seed)
    fm = rng.standard_normal((int(rng.integers(2, 9)), int(rng.integers(2, 9)), 3))
    grid = rng.uniform(-1, 1, size=(4, 5, 3))
    for pose in make_biplanar_rig(sd, focal):
        out = resample_local_features(fm, pose, grid, padding)
        for idx in np.ndindex(4, 5):
            ref = bilinear_sample(fm, project_point(pose, grid[idx]).u, padding)
            assert np.max(np.abs(out[idx] - ref)) <= 1e-12
            assert np.max(np.abs(out[idx] - reference_sample(fm, project_point(pose, grid[idx]).u, padding))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), sd=st.floats(2.0, 6.0), focal=st.floats(0.5, 4.0),
       padding=st.sampled_from(["border", "zeros"]))
def test_adjoint_identity(seed, sd, focal, padding):
    rng = np.random.default_rng(seed)
    fm = rng.standard_normal((6, 5, 3))
    grid = rng.uniform(-1.2, 1.2, size=(7, 4, 3))
    g = rng.standard_normal((7, 4, 3))
    for pose in make_biplanar_rig(sd, focal):
        lhs = np.sum(resample_local_features(fm, pose, grid, padding) * g)
        rhs = np.sum(fm * resample_backward(fm, pose, grid, g, padding))
        assert abs(lhs - rhs) <= 1e-9


def test_constant_map_and_partition_of_unity(rng):
    grid = rng.uniform(-1, 1, size=(6, 6, 3))
    pa, lat = make_biplanar_rig(2.0, 4.0)  # strong magnification: many clamped points
    ones = np.ones((4, 4, 3))
    for pose in (pa, lat):
        out = resample_local_features(ones * 2.5, pose, grid)
        assert np.allclose(out, 2.5, atol=1e-15)
        assert np.allclose(resample_local_features(ones, pose, grid), 1.0, atol=1e-15)
        assert np.allclose(resample_orthogonal(ones, pose.view, grid), 1.0, atol=1e-15)


def test_linearity(rng):
    pa = make_pose("PA")
    grid = random_grid(rng, (5, 5))
    f1, f2 = rng.standard_normal((2, 4, 4, 3))
    lhs = resample_local_features(0.7 * f1 + f2, pa, grid)
    rhs = 0.7 * resample_local_features(f1, pa, grid) + resample_local_features(f2, pa, grid)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_backward_zero_and_node_cases(rng):
    pa = make_pose("PA")
    fm = rng.standard_normal((5, 5, 2))
    grid = random_grid(rng)
    assert np.all(resample_backward(fm, pa, grid, np.zeros((3, 3, 2))) == 0)
    # the origin projects to the principal point, node (2, 2) of a 5x5 map
    node = np.zeros((1, 1, 3))
    g = np.array([[[0.3, -1.2]]])
    grad = resample_backward(fm, pa, node, g)
    expect = np.zeros_like(fm)
    expect[2, 2] = g[0, 0]
    assert np.array_equal(grad, expect)
    with pytest.raises(ParameterError):
        resample_backward(fm, pa, grid, np.zeros((3, 3, 3)))


def test_backward_matches_finite_differences(rng):
    pa = make_pose("PA")
    fm = rng.standard_normal((4, 4, 2))
    grid = random_grid(rng)
    g = rng.standard_normal((3, 3, 2))
    loss = lambda f: np.sum(resample_local_features(f, pa, grid) * g)
    analytic = resample_backward(fm, pa, grid, g)
    h = 1e-5
    for idx in np.ndindex(fm.shape):
        e = np.zeros_like(fm)
        e[idx] = h
        num = (loss(fm + e) - loss(fm - e)) / (2 * h)
        assert abs(num - analytic[idx]) / max(abs(num), abs(analytic[idx]), 1e-6) <= 1e-4


def test_orthogonal_replicates_along_view_axis(rng):
    vol = Volume(np.zeros((32, 32, 32)))
    fm = rng.standard_normal((8, 8, 4))
    # PA looks along y: coronal slices at different y get identical features
    a = resample_orthogonal(fm, "PA", slice_grid(vol, SliceSpec("coronal", 3), (16, 16)))
    b = resample_orthogonal(fm, "PA", slice_grid(vol, SliceSpec("coronal", 27), (16, 16)))
    assert np.array_equal(a, b)
    c = resample_orthogonal(fm, "Lat", slice_grid(vol, SliceSpec("sagittal", 1), (16, 16)))
    d = resample_orthogonal(fm, "Lat", slice_grid(vol, SliceSpec("sagittal", 30), (16, 16)))
    assert np.array_equal(c, d)
    pa = make_pose("PA")
    e = resample_local_features(fm, pa, slice_grid(vol, SliceSpec("coronal", 3), (16, 16)))
    f = resample_local_features(fm, pa, slice_grid(vol, SliceSpec("coronal", 27), (16, 16)))
    assert np.abs(e - f).max() > 1e-3


def test_orthogonal_equals_explicit_replication(rng):
    fm = rng.standard_normal((6, 6, 2))
    x, z = rng.uniform(-1, 1, size=(2, 10))
    for y in np.linspace(-1, 1, 5):
        grid = np.stack([x, np.full(10, y), z], axis=-1)
        out = resample_orthogonal(fm, "PA", grid)
        for n in range(10):
            ref = bilinear_sample(fm, project_point_orthogonal("PA", grid[n]))
            assert np.max(np.abs(out[n] - ref)) <= 1e-12


def test_telecentric_limit(rng):
    fm = rng.standard_normal((8, 8, 3))
    grid = rng.uniform(-1, 1, size=(9, 9, 3))
    for view, pose in zip(("PA", "Lat"), make_biplanar_rig(1e5, 1e5)):
        diff = resample_local_features(fm, pose, grid) - resample_orthogonal(fm, view, grid)
        assert np.abs(diff).max() <= 1e-3


def test_crop_consistency_with_per_point_oracle(rng):
    vol = Volume(np.zeros((32, 32, 32)))
    fm = rng.standard_normal((8, 8, 2))
    pa, lat = make_biplanar_rig()
    grid = slice_grid(vol, SliceSpec("axial", 10, (4, 6, 12, 9)), (16, 16))
    for pose in (pa, lat):
        out = resample_local_features(fm, pose, grid)
        for idx in np.ndindex(16, 16):
            ref = reference_sample(fm, project_point(pose, grid[idx]).u)
            assert np.max(np.abs(out[idx] - ref)) <= 1e-12


def test_operator_shape_and_sparsity(rng):
    op = resampling_operator(make_pose("Lat"), random_grid(rng, (4, 5)), (6, 7, 3))
    assert op.shape == (20, 42)
    assert np.all(np.diff(op.indptr) <= 4)
    with pytest.raises(ParameterError):
        resampling_operator("PA", random_grid(rng), (4, 4), "perspective")
    with pytest.raises(ParameterError):
        resampling_operator("PA", random_grid(rng), (4, 4), "fisheye")
