"""Synthetic phantoms and known nonrigid distortions.

Moving data are produced the way a physically consistent distorted
acquisition would look: DW images are warped, tensors refitted and rotated
with the warp's local rotations, and DW images resynthesized from them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularJacobianError, ValidationError
from .interpolation import SplineImage
from .reorientation import DET_TOL, reorient_tensor, rotations_from_jacobians
from .tensor_model import fit_tensor, synthesize_signals
from .volume_io import DwiSet, GridGeometry, ScalarVolume, TensorVolume, VectorField

BACKGROUND_EIGENVALUES = (0.7e-3, 0.7e-3, 0.7e-3)
BUNDLE_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)


def default_gradients() -> np.ndarray:
    """Twelve-direction scheme: six face diagonals, three axes, three body diagonals."""
    g = np.array([
        [1, 0, 1], [-1, 0, 1], [0, 1, 1], [0, 1, -1], [1, 1, 0], [-1, 1, 0],
        [1, 0, 0], [0, 1, 0], [0, 0, 1],
        [1, 1, 1], [-1, 1, 1], [1, -1, 1],
    ], dtype=float)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# phantom geometry, in voxel-index units

@dataclass(frozen=True)
class Tube:
    start: tuple
    end: tuple
    radius: float

    def sample_points(self):
        return np.array([self.start, self.end], dtype=float)

    def distance_and_tangent(self, p):
        a = np.asarray(self.start, float)
        b = np.asarray(self.end, float)
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        d = np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)
        tangent = np.broadcast_to(ab / np.linalg.norm(ab), p.shape)
        return d, tangent


@dataclass(frozen=True)
class Arc:
    center: tuple
    radius: float
    tube_radius: float
    normal: tuple
    start_angle: float = 0.0
    end_angle: float = 2 * np.pi

    def _frame(self):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        ref = np.eye(3)[np.argmin(np.abs(n))]
        u = np.cross(n, ref)
        u /= np.linalg.norm(u)
        return n, u, np.cross(n, u)

    def sample_points(self):
        n, u, v = self._frame()
        th = np.linspace(self.start_angle, self.end_angle, 64)
        return np.asarray(self.center, float) + self.radius * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * v)

    def distance_and_tangent(self, p):
        n, u, v = self._frame()
        rel = p - np.asarray(self.center, float)
        h = rel @ n
        inplane = rel - h[..., None] * n
        rho = np.linalg.norm(inplane, axis=-1)
        theta = np.mod(np.arctan2(rel @ v, rel @ u) - self.start_angle, 2 * np.pi)
        span = self.end_angle - self.start_angle
        d = np.sqrt((rho - self.radius) ** 2 + h ** 2)
        d = np.where(theta <= span, d, np.inf)
        rhat = inplane / np.maximum(rho, 1e-12)[..., None]
        tangent = np.cross(n, rhat)
        return d, tangent


def default_bundles(dims) -> tuple:
    """Straight and curved bundles that make all six tensor components vary."""
    n = np.asarray(dims, dtype=float) - 1.0
    r = max(1.5, 0.06 * float(n.min()))

    def at(*f):
        return tuple(float(v) for v in np.asarray(f) * n)

    return (
        Tube(at(0.12, 0.28, 0.30), at(0.88, 0.28, 0.30), r),
        Tube(at(0.72, 0.15, 0.12), at(0.72, 0.15, 0.88), r),
        Tube(at(0.15, 0.80, 0.20), at(0.80, 0.45, 0.80), r),
        Arc(at(0.50, 0.55, 0.62), 0.26 * float(n.min()), r, (0, 0, 1), 0.0, 1.5 * np.pi),
        Arc(at(0.28, 0.55, 0.50), 0.20 * float(n.min()), r, (1, 0, 0), 0.25 * np.pi, 1.9 * np.pi),
        Arc(at(0.55, 0.82, 0.45), 0.22 * float(n.min()), r, (0, 1, 0), 0.0, 1.6 * np.pi),
    )


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    background_eigenvalues: tuple = BACKGROUND_EIGENVALUES
    bundle_eigenvalues: tuple = BUNDLE_EIGENVALUES
    bundles: tuple | None = None
    s0: float = 1000.0
    bvalue: float = 1000.0
    gradients: np.ndarray | None = field(default=None, compare=False)
    jitter: float = 0.0


def _shift_bundle(b, offset):
    if isinstance(b, Tube):
        return Tube(tuple(np.add(b.start, offset)), tuple(np.add(b.end, offset)), b.radius)
    return Arc(tuple(np.add(b.center, offset)), b.radius, b.tube_radius, b.normal, b.start_angle, b.end_angle)


def phantom_tensors(spec: PhantomSpec, seed=0) -> TensorVolume:
    geometry = GridGeometry(spec.dims, spec.spacing)
    bundles = spec.bundles if spec.bundles is not None else default_bundles(spec.dims)
    if spec.jitter > 0:
        rng = np.random.default_rng(seed)
        bundles = tuple(_shift_bundle(b, rng.uniform(-spec.jitter, spec.jitter, 3)) for b in bundles)
    hi = np.asarray(spec.dims, float) - 1
    for b in bundles:
        rad = b.radius if isinstance(b, Tube) else b.tube_radius
        pts = b.sample_points()
        if np.any(pts - rad < 0) or np.any(pts + rad > hi):
            raise ValidationError(f"bundle {b} extends outside the {spec.dims} volume")

    idx = np.stack(np.meshgrid(*(np.arange(d) for d in spec.dims), indexing="ij"), axis=-1).astype(float)
    D = np.broadcast_to(np.diag(spec.background_eigenvalues), spec.dims + (3, 3)).copy()
    lam = np.asarray(spec.bundle_eigenvalues, float)
    for b in bundles:
        rad = b.radius if isinstance(b, Tube) else b.tube_radius
        d, t = b.distance_and_tangent(idx)
        inside = d <= rad
        if not np.any(inside):
            continue
        t = t[inside]
        t = t / np.linalg.norm(t, axis=-1, keepdims=True)
        # D = l_perp I + (l_par - l_perp) t t^T assumes the two minor eigenvalues are equal
        if lam[1] == lam[2]:
            D[inside] = lam[1] * np.eye(3) + (lam[0] - lam[1]) * t[:, :, None] * t[:, None, :]
        else:
            ref = np.where(np.abs(t[:, :1]) < 0.9, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
            e2 = np.cross(t, ref)
            e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
            e3 = np.cross(t, e2)
            E = np.stack([t, e2, e3], axis=-1)
            D[inside] = (E * lam) @ np.swapaxes(E, -1, -2)
    return TensorVolume.from_matrices(geometry, D)


def make_phantom(spec: PhantomSpec = PhantomSpec(), seed=0):
    """Return ``(dwi, tensors)`` for a deterministic bundle phantom."""
    tensors = phantom_tensors(spec, seed)
    g = default_gradients() if spec.gradients is None else np.asarray(spec.gradients, float)
    s0 = ScalarVolume(tensors.geometry, np.full(spec.dims, float(spec.s0)))
    return synthesize_signals(tensors, g, spec.bvalue, s0), tensors


# ---------------------------------------------------------------------------
# thin-plate spline warps

class TpsWarp:
    """3D thin-plate spline interpolating displacements at control points (mm)."""

    def __init__(self, points, displacements):
        self.points = np.asarray(points, dtype=float)
        self.displacements = np.asarray(displacements, dtype=float)
        n = self.points.shape[0]
        K = np.linalg.norm(self.points[:, None] - self.points[None], axis=-1)
        P = np.hstack([np.ones((n, 1)), self.points])
        A = np.zeros((n + 4, n + 4))
        A[:n, :n] = K
        A[:n, n:] = P
        A[n:, :n] = P.T
        rhs = np.zeros((n + 4, 3))
        rhs[:n] = self.displacements
        sol = np.linalg.solve(A, rhs)
        self.weights = sol[:n]
        self.affine = sol[n:]

    @staticmethod
    def is_degenerate(points) -> bool:
        n = len(points)
        if n < 4:
            return True
        P = np.hstack([np.ones((n, 1)), points])
        if np.linalg.matrix_rank(P) < 4:
            return True
        K = np.linalg.norm(points[:, None] - points[None], axis=-1)
        A = np.block([[K, P], [P.T, np.zeros((4, 4))]])
        return np.linalg.cond(A) > 1e12

    def displacement_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 3)
        out = self.affine[0] + flat @ self.affine[1:]
        for p, w in zip(self.points, self.weights):
            out += np.linalg.norm(flat - p, axis=-1)[:, None] * w
        return out.reshape(x.shape)

    def field(self, geometry: GridGeometry) -> VectorField:
        return VectorField(geometry, self.displacement_at(geometry.voxel_centers()))


def random_tps(geometry: GridGeometry, n_points=27, max_disp_voxels=4.0, seed=0) -> TpsWarp:
    """Random TPS warp with displacements uniform in ``[-max, max]`` voxels per axis."""
    if max_disp_voxels < 0:
        raise ValidationError("max_disp_voxels must be nonnegative")
    rng = np.random.default_rng(seed)
    lo = np.array(geometry.origin)
    ext = geometry.extent
    side = int(round(n_points ** (1.0 / 3.0)))
    for _ in range(5):
        if side ** 3 == n_points:
            grid = (np.arange(side) + 0.5) / side
            frac = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), -1).reshape(-1, 3)
            frac = frac + rng.uniform(-0.25, 0.25, frac.shape) / side
        else:
            frac = rng.uniform(0.1, 0.9, (n_points, 3))
        pts = lo + frac * ext
        if not TpsWarp.is_degenerate(pts):
            break
    else:
        raise ValidationError("could not draw a non-degenerate TPS control configuration")
    disp = rng.uniform(-1.0, 1.0, (n_points, 3)) * max_disp_voxels * np.array(geometry.spacing)
    return TpsWarp(pts, disp)


# ---------------------------------------------------------------------------
# distorted data sets

def _sample_clamped(spline, geometry, points_mm):
    idx = geometry.to_index(points_mm.reshape(-1, 3))
    idx = np.clip(idx, 0.0, np.array(geometry.dims) - 1.0)
    return spline.sample(idx)[0].reshape(points_mm.shape[:-1])


def field_jacobian(field: VectorField) -> np.ndarray:
    """Jacobian of ``y -> y + u(y)`` by central differences on the grid."""
    u = field.displacement
    J = np.empty(field.geometry.dims + (3, 3))
    for e in range(3):
        J[..., :, e] = np.gradient(u, field.geometry.spacing[e], axis=e)
    J += np.eye(3)
    return J


def invert_field(field: VectorField, iterations=50, tol=1e-8) -> VectorField:
    """Displacement ``v`` with ``x + v(x) + u(x + v(x)) = x``.

    Solved per voxel by Newton steps on ``y + u(y) = x``; beyond the grid
    ``u`` takes its nearest edge value.
    """
    geo = field.geometry
    x = geo.voxel_centers().reshape(-1, 3)
    splines = [SplineImage(field.displacement[..., c]) for c in range(3)]
    top = np.array(geo.dims) - 1.0
    spacing = np.array(geo.spacing)
    y = x - field.displacement.reshape(-1, 3)
    for _ in range(iterations):
        idx = geo.to_index(y)
        inside = (idx >= 0) & (idx <= top)
        idx = np.clip(idx, 0.0, top)
        u = np.empty_like(y)
        J = np.empty(y.shape + (3,))
        for c, s in enumerate(splines):
            val, grad, _ = s.sample(idx, True)
            u[:, c] = val
            J[:, c, :] = np.where(inside, grad / spacing, 0.0)
        J += np.eye(3)
        r = y + u - x
        if np.abs(r).max() < tol:
            break
        step = np.linalg.solve(J, r[..., None])[..., 0]
        # a singular or wild local Jacobian falls back to the fixed-point update
        bad = ~np.all(np.isfinite(step), axis=-1) | (np.abs(step).max(axis=-1) > 2 * np.abs(r).max(axis=-1) + 1)
        step[bad] = r[bad]
        y = y - step
    return VectorField(geo, (y - x).reshape(geo.dims + (3,)))


def make_moving(fixed_dwi: DwiSet, warp: VectorField):
    """Distort a DWI set with ``moving(y) = fixed(y + warp(y))``.

    Returns ``(moving_dwi, ground_truth)``, where the ground truth is the
    displacement ``v`` on the fixed grid with ``fixed(x) = moving(x + v(x))``,
    the field a registration of moving onto fixed should recover.
    Samples pulled from beyond the grid use the nearest edge value.
    """
    geo = fixed_dwi.geometry
    if warp.geometry != geo:
        raise ValidationError("warp and DWI geometries differ")
    J = field_jacobian(warp)
    det = np.linalg.det(J)
    if np.any(det <= DET_TOL):
        voxels = [tuple(int(i) for i in v) for v in np.argwhere(det <= DET_TOL)]
        raise SingularJacobianError(f"warp folds at {len(voxels)} voxel(s), first {voxels[:5]}", voxels)

    y = geo.voxel_centers() + warp.displacement
    s0 = ScalarVolume(geo, _sample_clamped(SplineImage(fixed_dwi.s0.samples), geo, y))
    dwis = tuple(ScalarVolume(geo, _sample_clamped(SplineImage(v.samples), geo, y)) for v in fixed_dwi.dwis)
    warped = DwiSet(s0, dwis, fixed_dwi.gradients, fixed_dwi.bvalue)

    tensors = fit_tensor(warped)
    R = rotations_from_jacobians(J, strict=True)
    rotated = TensorVolume.from_matrices(geo, reorient_tensor(tensors.matrices(), R), tensors.valid)
    moving = synthesize_signals(rotated, fixed_dwi.gradients, fixed_dwi.bvalue, s0)
    return moving, invert_field(warp)
