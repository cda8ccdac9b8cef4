import csv

import numpy as np
import pytest

from dtireg.errors import ValidationError
from dtireg.evaluation import evaluate
from dtireg.ffd import make_ffd, refine_grid
from dtireg.optimizer import OptimizerConfig
from dtireg.registration import (
    AffineTransform, RegistrationConfig, RegistrationMode, build_pyramid, downsample, prepare_components,
    pyramid_levels, register, register_affine_mi, warp_tensors,
)
from dtireg.reorientation import reorient_tensor
from dtireg.synthetic import make_moving, random_tps
from dtireg.tensor_model import fa_map, fit_tensor
from dtireg.volume_io import GridGeometry, ScalarVolume, TensorVolume

FAST = OptimizerConfig(epsilon=0.01, relative=True, max_iterations=50)


def rot_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_prepare_components(phantom16):
    _, T = phantom16
    f, m = prepare_components(T, T, "jt-dt")
    assert len(f) == 6 and np.array_equal(f[3].samples, T.components[3])
    f, m = prepare_components(T, T, RegistrationMode.JT_FA)
    assert len(f) == 1 and np.allclose(f[0].samples, fa_map(T).samples)
    f, m = prepare_components(fa_map(T), fa_map(T), "affine-mi")
    assert len(m) == 1
    with pytest.raises(ValidationError):
        prepare_components(fa_map(T), T, "jt-dt")
    other = TensorVolume(GridGeometry((8, 8, 8)), np.zeros((6, 8, 8, 8)))
    with pytest.raises(ValidationError):
        prepare_components(T, other, "jt-dt")
    with pytest.raises(ValueError):
        prepare_components(T, T, "ssd")


def test_pyramid_levels_64():
    geo = GridGeometry((64, 64, 64))
    plan = pyramid_levels(geo, 3, 8.0)
    assert [lv.factor for lv in plan] == [4, 2, 1]
    assert [lv.control_spacing for lv in plan] == [32.0, 16.0, 8.0]
    comps = [ScalarVolume(geo, np.random.default_rng(0).normal(size=geo.dims))]
    pyr = build_pyramid(comps, 3)
    assert [p[0].geometry.dims for p in pyr] == [(16, 16, 16), (32, 32, 32), (64, 64, 64)]
    assert pyr[-1][0] is comps[0]
    assert pyr[0][0].geometry.spacing == (4.0, 4.0, 4.0)
    assert pyr[0][0].geometry.origin == geo.origin


def test_pyramid_constant_image():
    geo = GridGeometry((32, 32, 32))
    v = ScalarVolume(geo, np.full(geo.dims, 7.0))
    assert np.allclose(downsample(v, 4).samples, 7.0, atol=1e-12)


def test_small_volume_reduces_levels(caplog):
    with caplog.at_level("WARNING"):
        plan = pyramid_levels(GridGeometry((20, 20, 20)), 3)
    assert len(plan) == 2 and "too small" in caplog.text
    assert len(pyramid_levels(GridGeometry((10, 10, 10)), 3)) == 1


def test_config_validation():
    with pytest.raises(ValidationError):
        RegistrationConfig(levels=0)
    with pytest.raises(ValidationError):
        RegistrationConfig(control_spacing=1.0)
    with pytest.raises(ValidationError):
        RegistrationConfig(bins=4)
    assert RegistrationConfig(mode="jt-fa").mode is RegistrationMode.JT_FA


def test_refine_hand_off_keeps_field(rng):
    geo = GridGeometry((32, 32, 32))
    T = make_ffd(geo, 32.0)
    T = T.with_parameters(rng.uniform(-2, 2, T.n_params))
    R = refine_grid(refine_grid(T))
    assert np.allclose(R.delta, 8.0)
    assert np.max(np.abs(R.displacement(geo) - T.displacement(geo))) < 1e-9


def test_affine_transform_protocol(rng):
    geo = GridGeometry((10, 12, 8), (1.0, 1.0, 2.0))
    A = AffineTransform(geo, rng.normal(size=12) * 0.3)
    x = geo.voxel_centers()
    expected = (x - A.center) @ (A.matrix - np.eye(3)).T + A.translation
    assert np.allclose(A.displacement(geo), expected)
    assert np.allclose(A.jacobian_field(geo), A.matrix)
    W = rng.normal(size=geo.dims + (3,))
    v = rng.normal(size=12)
    lhs = np.sum(W * AffineTransform(geo, v).displacement(geo))
    assert lhs == pytest.approx(A.parameter_gradient(geo, W) @ v, rel=1e-12)
    with pytest.raises(ValidationError):
        AffineTransform(geo, np.zeros(5))


def test_warp_tensors_identity(phantom16):
    _, T = phantom16
    out, valid = warp_tensors(T, make_ffd(T.geometry, 8.0), T.geometry)
    assert valid.all()
    assert np.max(np.abs(out.components - T.components)) < 1e-12 * np.abs(T.components).max() + 1e-15


def test_affine_null(phantom32):
    _, T = phantom32
    res = register_affine_mi(T, T, RegistrationConfig(optimizer=FAST))
    disp = np.linalg.norm(res.field.displacement, axis=-1)
    assert disp.mean() < 0.1


def test_affine_recovers_rotation(phantom32):
    _, T = phantom32
    geo = T.geometry
    c = np.array(geo.origin) + geo.extent / 2
    Q = rot_z(5)
    u = (geo.voxel_centers() - c) @ (Q - np.eye(3)).T
    from dtireg.volume_io import VectorField
    moving_dwi, _ = make_moving(make_moving_source(T), VectorField(geo, u))
    M = fit_tensor(moving_dwi)
    res = register_affine_mi(T, M, RegistrationConfig(optimizer=OptimizerConfig(epsilon=1e-4, relative=True)))
    A = res.transform.matrix
    # moving(y) = fixed(Q (y - c) + c), so the recovered map is Q^T
    angle = np.degrees(np.arctan2(A[1, 0] - A[0, 1], A[0, 0] + A[1, 1]))
    assert angle == pytest.approx(-5.0, abs=0.5)


def make_moving_source(T):
    from dtireg.synthetic import default_gradients
    from dtireg.tensor_model import synthesize_signals
    s0 = ScalarVolume(T.geometry, np.full(T.geometry.dims, 1000.0))
    return synthesize_signals(T, default_gradients(), 1000.0, s0)


@pytest.fixture(scope="module")
def warped20(phantom20):
    dwi, T = phantom20
    geo = T.geometry
    moving, truth = make_moving(dwi, random_tps(geo, max_disp_voxels=2.0, seed=1).field(geo))
    return T, fit_tensor(moving), truth


def test_jt_dt_improves_alignment(warped20, tmp_path):
    T, M, truth = warped20
    cfg = RegistrationConfig(mode="jt-dt", optimizer=FAST)
    res = register(T, M, cfg)
    assert len(res.levels) == 2
    for lv in res.levels:
        assert lv.costs[-1] < lv.costs[0] and np.all(np.diff(lv.costs) <= 0)
    before = evaluate(T, M, warped_zero(T), truth)
    after = evaluate(T, res.registered_tensors, res.field, truth)
    assert after.C < before.C and after.ovl > before.ovl
    res.write_trace(tmp_path / "trace.csv")
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["level", "iteration", "cost"]
    assert len(rows) - 1 == len(res.costs)
    assert float(rows[-1][2]) == res.costs[-1]


def warped_zero(T):
    from dtireg.volume_io import VectorField
    return VectorField(T.geometry, np.zeros(T.geometry.dims + (3,)))


def test_jt_fa_runs_on_fa_maps(warped20):
    T, M, _ = warped20
    res = register(fa_map(T), fa_map(M), RegistrationConfig(mode="jt-fa", optimizer=FAST))
    assert res.registered_tensors is None
    for lv in res.levels:
        assert lv.costs[-1] < lv.costs[0]


def test_registration_deterministic(warped20):
    T, M, _ = warped20
    cfg = RegistrationConfig(mode="jt-dt", optimizer=FAST)
    a, b = register(T, M, cfg), register(T, M, cfg)
    assert a.costs == b.costs
    assert np.array_equal(a.transform.parameters(), b.transform.parameters())
    assert np.array_equal(a.registered_tensors.components, b.registered_tensors.components)


def test_final_cost_near_self_similarity(warped20):
    """The registered cost approaches the value of the fixed image against itself."""
    from dtireg.jt_similarity import multicomponent_similarity
    from dtireg.registration import tensor_components
    T, M, _ = warped20
    res = register(T, M, RegistrationConfig(mode="jt-dt", optimizer=FAST))
    comps = tensor_components(T)
    floor = multicomponent_similarity(comps, comps, make_ffd(T.geometry, 8.0))
    start = multicomponent_similarity(comps, tensor_components(M), make_ffd(T.geometry, 8.0))
    final = res.levels[-1].costs[-1]
    assert abs(final - floor) < 5e-2
    assert abs(final - floor) < abs(start - floor)
