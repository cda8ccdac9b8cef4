import numpy as np
import pytest

from dtireg.errors import SingularJacobianError
from dtireg.ffd import FfdTransform, make_ffd
from dtireg.reorientation import (
    polar_rotation, polar_rotation_field, reorient_field, reorient_tensor, rotations_from_jacobians,
)
from dtireg.volume_io import GridGeometry, TensorVolume

from conftest import random_rotation, random_spd


def rotation_z(deg):
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def test_polar_examples(rng):
    assert np.allclose(polar_rotation(np.eye(3)), np.eye(3), atol=1e-15)
    R = rotation_z(30)
    assert np.allclose(polar_rotation(R), R, atol=1e-12)
    assert np.allclose(polar_rotation(np.diag([2.0, 3.0, 0.5])), np.eye(3), atol=1e-12)
    assert np.allclose(polar_rotation(R * 4.0), R, atol=1e-12)


def test_polar_recovers_rotation_from_spd_product(rng):
    for _ in range(100):
        R0 = random_rotation(rng)
        P = random_spd(rng)
        assert np.max(np.abs(polar_rotation(R0 @ P) - R0)) < 1e-9
        Q = R0 @ np.diag([2.0, 1.0, 0.5]) @ R0.T
        assert np.max(np.abs(polar_rotation(R0 @ Q) - R0)) < 1e-9


def test_polar_is_a_rotation(rng):
    for _ in range(50):
        M = rng.normal(size=(3, 3))
        if np.linalg.det(M) <= 0:
            M[:, 0] *= -1
        R = polar_rotation(M)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_polar_of_inverse_is_transpose(rng):
    for _ in range(20):
        A = random_rotation(rng) @ random_spd(rng)
        assert np.allclose(polar_rotation(np.linalg.inv(A)), polar_rotation(A).T, atol=1e-9)


def test_polar_singular_raises():
    with pytest.raises(SingularJacobianError):
        polar_rotation(np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(SingularJacobianError) as exc:
        polar_rotation(np.diag([1.0, 1.0, -1.0]), voxel=(1, 2, 3))
    assert exc.value.voxels == [(1, 2, 3)]


def test_polar_field_flags_folded(rng):
    M = np.stack([np.eye(3), np.diag([1.0, -1.0, 1.0]), rotation_z(10) * 2])
    R, folded = polar_rotation_field(M)
    assert folded.tolist() == [False, True, False]
    assert np.array_equal(R[1], np.eye(3))
    assert np.allclose(R[2], rotation_z(10), atol=1e-12)


def test_reorient_preserves_eigenvalues(rng):
    for _ in range(50):
        D = random_spd(rng)
        R = random_rotation(rng)
        a = np.linalg.eigvalsh(D)
        b = np.linalg.eigvalsh(reorient_tensor(D, R))
        assert np.max(np.abs(a - b)) < 1e-12 * max(1.0, np.abs(a).max())


def test_reorient_identity_and_composition(rng):
    D = random_spd(rng)
    assert np.allclose(reorient_tensor(D, np.eye(3)), D, atol=1e-15)
    R1, R2 = random_rotation(rng), random_rotation(rng)
    assert np.allclose(reorient_tensor(reorient_tensor(D, R1), R2), reorient_tensor(D, R2 @ R1), atol=1e-12)


def test_reorient_rotates_principal_axis():
    D = np.diag([3.0, 1.0, 1.0])
    out = reorient_tensor(D, rotation_z(90))
    w, v = np.linalg.eigh(out)
    assert np.allclose(np.abs(v[:, -1]), [0, 1, 0], atol=1e-12)


def test_rotations_from_jacobians_strict_and_permissive(caplog):
    J = np.stack([rotation_z(20), np.diag([1.0, 1.0, -1.0])])
    with pytest.raises(SingularJacobianError):
        rotations_from_jacobians(J, strict=True)
    with caplog.at_level("WARNING"):
        R = rotations_from_jacobians(J, strict=False)
    assert "folded" in caplog.text
    assert np.allclose(R[0], rotation_z(-20), atol=1e-12)
    assert np.array_equal(R[1], np.eye(3))


def _rigid_ffd(geo, R, center, delta=4.0):
    """Cubic B-splines reproduce affine maps: coefficients are the map at the control points."""
    T = make_ffd(geo, delta)
    phi = T.control_points()
    coef = (phi - center) @ (R - np.eye(3)).T
    return FfdTransform(geo, delta, coef)


def test_rigid_field_matches_global_rotation(rng):
    geo = GridGeometry((10, 10, 10), (1.0, 1.0, 1.0))
    center = np.array(geo.origin) + geo.extent / 2
    R = rotation_z(8) @ np.array([[1, 0, 0], [0, np.cos(0.1), -np.sin(0.1)], [0, np.sin(0.1), np.cos(0.1)]])
    T = _rigid_ffd(geo, R, center)
    assert np.max(np.abs(T.jacobian_field(geo) - R)) < 1e-9
    mats = np.stack([random_spd(rng) for _ in range(geo.size)]).reshape(geo.dims + (3, 3))
    tv = TensorVolume.from_matrices(geo, mats)
    out = reorient_field(tv, T).matrices()
    expected = reorient_tensor(tv.matrices(), R.T)
    assert np.max(np.abs(out - expected)) < 1e-6 * np.abs(mats).max()


def test_reorient_field_folding(rng):
    geo = GridGeometry((6, 6, 6))
    T = make_ffd(geo, 2.0)
    coef = np.zeros(T.mesh_dims + (3,))
    coef[4, 4, 4, 0] = 8.0
    coef[5, 4, 4, 0] = -8.0
    T = FfdTransform(geo, 2.0, coef)
    tv = TensorVolume.from_matrices(geo, np.broadcast_to(np.diag([3.0, 1.0, 1.0]), geo.dims + (3, 3)))
    with pytest.raises(SingularJacobianError) as exc:
        reorient_field(tv, T, strict=True)
    assert len(exc.value.voxels) > 0
    out = reorient_field(tv, T, strict=False)
    assert np.all(np.isfinite(out.components))
