"""Finite-strain tensor reorientation."""
from __future__ import annotations

import logging

import numpy as np

from .errors import SingularJacobianError
from .volume_io import TensorVolume

log = logging.getLogger(__name__)

DET_TOL = 1e-8


def _nearest_rotation(M):
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    flip = np.linalg.det(R) < 0
    if np.any(flip):
        # reflection: negate the singular pair with the smallest singular value
        U = U.copy()
        U[flip, :, -1] *= -1
        R = U @ Vt
    return R


def polar_rotation(M, voxel=None) -> np.ndarray:
    """Rotation closest to ``M`` in Frobenius norm, i.e. ``U V^T`` of its SVD."""
    M = np.asarray(M, dtype=float)
    det = np.linalg.det(M)
    if not det > DET_TOL:
        where = f" at voxel {voxel}" if voxel is not None else ""
        raise SingularJacobianError(f"Jacobian determinant {det:.3g}{where} is not orientation preserving",
                                    [voxel] if voxel is not None else [])
    return _nearest_rotation(M[None])[0]


def polar_rotation_field(M):
    """Vectorized rotation extraction; returns ``(R, folded)`` with identity at folded voxels."""
    M = np.asarray(M, dtype=float)
    det = np.linalg.det(M)
    folded = ~(det > DET_TOL)
    R = _nearest_rotation(M)
    R[folded] = np.eye(3)
    return R, folded


def reorient_tensor(D, R) -> np.ndarray:
    """``R D R^T`` (broadcasts over leading axes)."""
    D = np.asarray(D, dtype=float)
    R = np.asarray(R, dtype=float)
    return R @ D @ np.swapaxes(R, -1, -2)


def rotations_from_jacobians(J, strict=True):
    """Reorientation rotations for forward mapping Jacobians ``J``.

    The tensor moved by the mapping rotates with the polar factor of the
    inverse Jacobian, which is the transpose of the polar factor of ``J``.
    """
    R, folded = polar_rotation_field(J)
    if np.any(folded):
        voxels = [tuple(int(i) for i in v) for v in np.argwhere(folded)]
        if strict:
            raise SingularJacobianError(
                f"{len(voxels)} voxel(s) with Jacobian determinant <= {DET_TOL}, first {voxels[:5]}", voxels)
        log.warning("identity rotation substituted at %d folded voxel(s)", len(voxels))
    return np.swapaxes(R, -1, -2)


def reorient_field(tensors: TensorVolume, transform, strict=True) -> TensorVolume:
    """Rotate every tensor by the local rotation of ``transform`` on the tensor grid."""
    J = transform.jacobian_field(tensors.geometry)
    R = rotations_from_jacobians(J, strict)
    out = reorient_tensor(tensors.matrices(), R)
    return TensorVolume.from_matrices(tensors.geometry, out, tensors.valid)
