import numpy as np
import pytest
from scipy import ndimage

from dtireg.errors import DomainError, ValidationError
from dtireg.ffd import FfdTransform, make_ffd, refine_grid, render_field, resample
from dtireg.interpolation import SplineImage, bspline3, bspline3_derivative
from dtireg.volume_io import GridGeometry, ScalarVolume, load_volume, save_volume


def random_ffd(geo, delta, rng, scale=1.0):
    T = make_ffd(geo, delta)
    return T.with_parameters(rng.uniform(-scale, scale, T.n_params))


def test_bspline_values():
    assert bspline3(0.0) == pytest.approx(2 / 3, abs=1e-15)
    assert bspline3(1.0) == pytest.approx(1 / 6, abs=1e-15)
    assert bspline3(2.0) == 0.0 and bspline3(-2.5) == 0.0
    t = np.linspace(-1.9, 1.9, 41)
    h = 1e-6
    fd = (bspline3(t + h) - bspline3(t - h)) / (2 * h)
    assert np.allclose(bspline3_derivative(t), fd, atol=1e-8)


def test_partition_of_unity(rng):
    u = rng.uniform(0, 1, 1000)
    total = sum(bspline3(u - k) for k in (-1, 0, 1, 2))
    assert np.max(np.abs(total - 1.0)) < 1e-12
    dtotal = sum(bspline3_derivative(u - k) for k in (-1, 0, 1, 2))
    assert np.max(np.abs(dtotal)) < 1e-12


def test_zero_coefficients_identity(geo8, rng):
    T = make_ffd(geo8, 3.0)
    assert np.all(T.displacement(geo8) == 0)
    J = T.jacobian_field(geo8)
    assert np.all(J == np.eye(3))
    x = geo8.voxel_centers()[3, 4, 5]
    assert np.array_equal(T.transform_point(x), x)


def test_constant_coefficients_translate(geo8):
    T = make_ffd(geo8, 3.0)
    t = np.array([0.5, -1.25, 2.0])
    coef = np.broadcast_to(t, T.mesh_dims + (3,))
    T = FfdTransform(geo8, 3.0, coef)
    assert np.allclose(T.displacement(geo8), t, atol=1e-12)
    assert np.allclose(T.jacobian_field(geo8), np.eye(3), atol=1e-12)


def test_single_coefficient_at_control_point():
    geo = GridGeometry((9, 9, 9))
    T = make_ffd(geo, 4.0)
    coef = np.zeros(T.mesh_dims + (3,))
    eta = np.array([1.0, -2.0, 0.5])
    i, j, k = T.margin + 1, T.margin + 1, T.margin + 1
    coef[i, j, k] = eta
    T = FfdTransform(geo, 4.0, coef)
    phi = T.control_points()[i, j, k]
    assert np.allclose(T.transform_point(phi) - phi, (2 / 3) ** 3 * eta, atol=1e-14)


def test_locality():
    geo = GridGeometry((16, 16, 16))
    T = make_ffd(geo, 4.0)
    coef = np.zeros(T.mesh_dims + (3,))
    i = j = k = 4
    coef[i, j, k] = [1.0, 1.0, 1.0]
    T = FfdTransform(geo, 4.0, coef)
    phi = T.control_points()[i, j, k]
    u = T.displacement(geo)
    far = np.any(np.abs(geo.voxel_centers() - phi) >= 2 * 4.0, axis=-1)
    assert far.any() and np.all(u[far] == 0)


def test_parameter_order(geo8):
    T = make_ffd(geo8, 3.0)
    mu = np.arange(T.n_params, dtype=float)
    T2 = T.with_parameters(mu)
    m = T.mesh_dims
    assert T2.coefficients[1, 0, 0, 0] == 1.0
    assert T2.coefficients[0, 1, 0, 0] == m[0]
    assert T2.coefficients[0, 0, 0, 1] == np.prod(m)
    assert np.array_equal(T2.parameters(), mu)
    with pytest.raises(ValidationError):
        T.with_parameters(mu[:-1])


def test_jacobian_matches_finite_differences(geo8, rng):
    T = random_ffd(geo8, 3.0, rng)
    h = 1e-5
    for _ in range(20):
        x = geo8.origin + rng.uniform(0.1, 0.9, 3) * geo8.extent
        J = T.jacobian(x)
        fd = np.empty((3, 3))
        for e in range(3):
            d = np.zeros(3)
            d[e] = h
            fd[:, e] = (T.transform_point(x + d) - T.transform_point(x - d)) / (2 * h)
        assert np.max(np.abs(J - fd)) < 1e-6


def test_grid_and_pointwise_agree(geo8, rng):
    T = random_ffd(geo8, 3.0, rng)
    u = T.displacement(geo8)
    J = T.jacobian_field(geo8)
    centers = geo8.voxel_centers()
    for idx in [(0, 0, 0), (7, 8, 9), (3, 2, 5)]:
        x = centers[idx]
        assert np.allclose(T.transform_point(x) - x, u[idx], atol=1e-12)
        assert np.allclose(T.jacobian(x), J[idx], atol=1e-12)


def test_parameter_gradient_is_adjoint(geo8, rng):
    """<W, d(displacement)/d mu . v> equals <parameter_gradient(W), v>."""
    T = make_ffd(geo8, 3.0)
    W = rng.normal(size=geo8.dims + (3,))
    v = rng.normal(size=T.n_params)
    lhs = np.sum(W * T.with_parameters(v).displacement(geo8))
    rhs = T.parameter_gradient(geo8, W) @ v
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_refine_grid_preserves_field(rng):
    geo = GridGeometry((12, 10, 14), (1.0, 1.5, 0.75), (2.0, -3.0, 1.0))
    T = random_ffd(geo, 4.0, rng, 2.0)
    R = refine_grid(T)
    assert np.allclose(R.delta, T.delta / 2)
    pts = geo.origin + rng.uniform(0, 1, (1000, 3)) * geo.extent
    err = max(np.max(np.abs(R.transform_point(p) - T.transform_point(p))) for p in pts)
    assert err < 1e-9
    assert np.max(np.abs(R.displacement(geo) - T.displacement(geo))) < 1e-9


def test_refine_twice(rng):
    geo = GridGeometry((16, 16, 16))
    T = random_ffd(geo, 8.0, rng)
    R = refine_grid(refine_grid(T))
    assert np.max(np.abs(R.displacement(geo) - T.displacement(geo))) < 1e-9


def test_outside_domain_raises(geo8):
    T = make_ffd(geo8, 3.0)
    with pytest.raises(DomainError):
        T.transform_point(np.array(geo8.origin) - 1.0)
    with pytest.raises(DomainError):
        T.jacobian(np.array(geo8.origin) + geo8.extent + 0.5)
    bigger = GridGeometry((9, 9, 10), geo8.spacing, geo8.origin)
    with pytest.raises(DomainError):
        T.displacement(bigger)


def test_mesh_must_cover_domain(geo8):
    with pytest.raises(ValidationError):
        FfdTransform(geo8, 3.0, mesh_dims=(4, 4, 4))
    with pytest.raises(ValidationError):
        make_ffd(geo8, 0.0)


def test_spline_interpolates_samples(rng):
    a = rng.normal(size=(7, 8, 9))
    s = SplineImage(a)
    idx = np.indices(a.shape).reshape(3, -1).T.astype(float)
    val, valid = s.sample(idx)
    assert valid.all()
    assert np.allclose(val, a.ravel(), atol=1e-10)


def test_spline_matches_scipy_and_gradient(rng):
    a = rng.normal(size=(7, 8, 9))
    s = SplineImage(a)
    pts = rng.uniform(0, 1, (200, 3)) * (np.array(a.shape) - 1)
    val, grad, valid = s.sample(pts, True)
    ref = ndimage.map_coordinates(a, pts.T, order=3, mode="mirror")
    assert np.allclose(val, ref, atol=1e-10)
    h = 1e-6
    for e in range(3):
        d = np.zeros(3)
        d[e] = h
        fd = (s.sample(pts + d)[0] - s.sample(pts - d)[0]) / (2 * h)
        inner = np.all((pts > h) & (pts < np.array(a.shape) - 1 - h), axis=1)
        assert np.allclose(grad[inner, e], fd[inner], atol=1e-6)


def test_spline_outside_invalid():
    s = SplineImage(np.ones((4, 4, 4)))
    val, valid = s.sample(np.array([[-0.1, 1, 1], [1, 1, 3.0], [1, 3.01, 1]]))
    assert list(valid) == [False, True, False]
    assert val[0] == 0 and val[2] == 0


def test_resample_identity_and_shift(rng):
    geo = GridGeometry((10, 10, 10), (2.0, 2.0, 2.0))
    vol = ScalarVolume(geo, rng.normal(size=geo.dims))
    T = make_ffd(geo, 6.0)
    out, valid = resample(vol, T, geo)
    assert valid.all() and np.allclose(out.samples, vol.samples, atol=1e-10)
    coef = np.zeros(T.mesh_dims + (3,))
    coef[..., 0] = 2.0  # one voxel along x
    out, valid = resample(vol, FfdTransform(geo, 6.0, coef), geo)
    assert np.allclose(out.samples[:-1], vol.samples[1:], atol=1e-10)
    assert not valid[-1].any() and valid[:-1].all()
    assert np.all(out.samples[-1] == 0)


def test_resample_all_outside():
    geo = GridGeometry((6, 6, 6))
    vol = ScalarVolume(geo, np.ones(geo.dims))
    T = make_ffd(geo, 3.0)
    coef = np.full(T.mesh_dims + (3,), 50.0)
    out, valid = resample(vol, FfdTransform(geo, 3.0, coef), geo)
    assert not valid.any() and np.all(out.samples == 0)


def test_render_field(geo8, rng):
    T = random_ffd(geo8, 3.0, rng)
    F = render_field(T, geo8)
    assert F.geometry == geo8 and np.array_equal(F.displacement, T.displacement(geo8))


def test_container_round_trip(tmp_path, geo8, rng):
    T = make_ffd(geo8, (3.0, 2.5, 4.0))
    # dyadic values survive the float32 payload exactly
    T = T.with_parameters(np.round(rng.uniform(-2, 2, T.n_params) * 64) / 64)
    save_volume(T, tmp_path / "t.dtv")
    T2 = load_volume(tmp_path / "t.dtv")
    assert isinstance(T2, FfdTransform)
    assert T2.mesh_dims == T.mesh_dims and T2.margin == T.margin
    assert np.array_equal(T2.delta, T.delta) and T2.domain == T.domain
    assert np.array_equal(T2.parameters(), T.parameters())
