"""Cubic B-spline free-form deformation.

The mapping is ``g(x) = x + sum_ijk eta_ijk beta3((x - phi_ijk) / delta)``
with control points on a uniform mesh extending ``margin`` points beyond
each face of the image domain. The parameter vector stacks the x, y and z
coefficient blocks, each flattened with the mesh i index fastest.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError, ValidationError
from .interpolation import SplineImage, bspline3, bspline3_derivative
from .volume_io import (
    GridGeometry, ScalarVolume, VectorField, _require, _triple, geometry_from_header, split_payload,
)

MARGIN = 2
_DOMAIN_TOL = 1e-9


def _basis(coords, origin, delta, m, derivative=False):
    t = (coords[:, None] - origin) / delta - np.arange(m)[None, :]
    if derivative:
        return bspline3_derivative(t) / delta
    return bspline3(t)


class FfdTransform:
    """Displacement-convention FFD over an image domain."""

    def __init__(self, domain: GridGeometry, delta, coefficients=None, mesh_dims=None, margin=MARGIN):
        self.domain = domain
        self.delta = np.broadcast_to(np.asarray(delta, dtype=float), (3,)).copy()
        if not np.all(self.delta > 0):
            raise ValidationError("control spacing must be positive")
        self.margin = int(margin)
        if mesh_dims is None:
            if coefficients is not None:
                mesh_dims = np.asarray(coefficients).shape[:3]
            else:
                k = np.ceil(domain.extent / self.delta - 1e-9).astype(int)
                mesh_dims = tuple(int(v) + 1 + 2 * self.margin for v in np.maximum(k, 1))
        self.mesh_dims = tuple(int(v) for v in mesh_dims)
        covered = (np.array(self.mesh_dims) - 1 - 2 * self.margin) * self.delta
        if np.any(covered < domain.extent - 1e-9):
            raise ValidationError(f"control mesh {self.mesh_dims} does not cover the image domain")
        if coefficients is None:
            coefficients = np.zeros(self.mesh_dims + (3,))
        coef = np.array(coefficients, dtype=float)
        if coef.shape != self.mesh_dims + (3,):
            raise ValidationError(f"coefficients shape {coef.shape} != {self.mesh_dims + (3,)}")
        if not np.all(np.isfinite(coef)):
            raise ValidationError("coefficients must be finite")
        coef.flags.writeable = False
        self.coefficients = coef
        self.grid_origin = np.array(domain.origin) - self.margin * self.delta
        self.lo = np.array(domain.origin)
        self.hi = self.lo + domain.extent

    # ------------------------------------------------------------------ params
    @property
    def n_params(self) -> int:
        return 3 * int(np.prod(self.mesh_dims))

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.coefficients[..., d].ravel(order="F") for d in range(3)])

    def with_parameters(self, mu) -> "FfdTransform":
        mu = np.asarray(mu, dtype=float)
        if mu.size != self.n_params:
            raise ValidationError(f"expected {self.n_params} parameters, got {mu.size}")
        blocks = mu.reshape(3, -1)
        coef = np.stack([b.reshape(self.mesh_dims, order="F") for b in blocks], axis=-1)
        return FfdTransform(self.domain, self.delta, coef, self.mesh_dims, self.margin)

    def control_points(self) -> np.ndarray:
        axes = [self.grid_origin[a] + self.delta[a] * np.arange(self.mesh_dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    # -------------------------------------------------------------- pointwise
    def _check_point(self, x):
        if np.any(x < self.lo - _DOMAIN_TOL) or np.any(x > self.hi + _DOMAIN_TOL):
            raise DomainError(f"point {x.tolist()} is outside the transform domain")

    def _local(self, x, derivative_axis=None):
        t = (x - self.grid_origin) / self.delta
        base = np.floor(t).astype(int) - 1
        ws = []
        for a in range(3):
            offs = t[a] - (base[a] + np.arange(4))
            if a == derivative_axis:
                ws.append(bspline3_derivative(offs) / self.delta[a])
            else:
                ws.append(bspline3(offs))
        w = ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]
        block = self.coefficients[base[0]:base[0] + 4, base[1]:base[1] + 4, base[2]:base[2] + 4]
        return np.einsum("abc,abcd->d", w, block)

    def transform_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_point(x)
        return x + self._local(x)

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        self._check_point(x)
        J = np.eye(3)
        for e in range(3):
            J[:, e] += self._local(x, derivative_axis=e)
        return J

    # ------------------------------------------------------------- on a grid
    def _check_geometry(self, geometry):
        lo = np.array(geometry.origin)
        hi = lo + geometry.extent
        if np.any(lo < self.lo - _DOMAIN_TOL) or np.any(hi > self.hi + _DOMAIN_TOL):
            raise DomainError("geometry extends outside the transform domain")

    def _bases(self, geometry, derivative_axis=None):
        return [
            _basis(geometry.axis_coords(a), self.grid_origin[a], self.delta[a], self.mesh_dims[a],
                   derivative=(a == derivative_axis))
            for a in range(3)
        ]

    def displacement(self, geometry) -> np.ndarray:
        """Displacement at every voxel center of ``geometry``, shape ``dims + (3,)``."""
        self._check_geometry(geometry)
        bx, by, bz = self._bases(geometry)
        return np.einsum("ia,jb,kc,abcd->ijkd", bx, by, bz, self.coefficients, optimize=True)

    def jacobian_field(self, geometry) -> np.ndarray:
        """Spatial Jacobian of g at every voxel, shape ``dims + (3, 3)``."""
        self._check_geometry(geometry)
        J = np.zeros(geometry.dims + (3, 3))
        for e in range(3):
            bx, by, bz = self._bases(geometry, derivative_axis=e)
            J[..., :, e] = np.einsum("ia,jb,kc,abcd->ijkd", bx, by, bz, self.coefficients, optimize=True)
        J += np.eye(3)
        return J

    def parameter_gradient(self, geometry, weights) -> np.ndarray:
        """Chain rule through the mapping.

        ``weights[x, d]`` is the derivative of a cost with respect to
        ``g_d(x)``; returns the derivative with respect to the parameters.
        """
        bx, by, bz = self._bases(geometry)
        w = np.asarray(weights).reshape(geometry.dims + (3,))
        g = np.einsum("ia,jb,kc,ijkd->abcd", bx, by, bz, w, optimize=True)
        return np.concatenate([g[..., d].ravel(order="F") for d in range(3)])

    # ---------------------------------------------------------- serialization
    def to_container(self):
        header = {"kind": "ffd", **self.domain.to_header(), "mesh_dims": list(self.mesh_dims),
                  "delta": self.delta.tolist(), "margin": self.margin, "channels": 3}
        return header, [self.coefficients[..., d] for d in range(3)]

    @classmethod
    def from_container(cls, header, flat) -> "FfdTransform":
        domain = geometry_from_header(header)
        mesh = GridGeometry(_triple(header, "mesh_dims", int))
        delta = _triple(header, "delta", float)
        margin = _require(header, "margin", int)
        parts = split_payload(flat, mesh, 3)
        return cls(domain, delta, np.stack(parts, axis=-1), mesh.dims, margin)


def make_ffd(geometry: GridGeometry, delta_mm) -> FfdTransform:
    """Zero-displacement FFD covering ``geometry`` with control spacing ``delta_mm``."""
    return FfdTransform(geometry, delta_mm)


def transform_point(T: FfdTransform, x) -> np.ndarray:
    return T.transform_point(x)


def jacobian(T: FfdTransform, x) -> np.ndarray:
    return T.jacobian(x)


def render_field(T, geometry: GridGeometry) -> VectorField:
    return VectorField(geometry, T.displacement(geometry))


def _subdivide_axis(c, axis, margin):
    """Exact cubic B-spline two-scale subdivision along one axis."""
    c = np.moveaxis(c, axis, 0)
    m = c.shape[0]
    n_int = m - 1 - 2 * margin
    m_new = 2 * n_int + 1 + 2 * margin
    out = np.empty((m_new,) + c.shape[1:])
    zero = np.zeros_like(c[0])
    get = lambda k: c[k] if 0 <= k < m else zero  # noqa: E731
    for jf in range(m_new):
        J = jf + margin
        h, odd = divmod(J, 2)
        if odd:
            out[jf] = 0.5 * (get(h) + get(h + 1))
        else:
            out[jf] = (get(h - 1) + 6.0 * get(h) + get(h + 1)) / 8.0
    return np.moveaxis(out, 0, axis)


def refine_grid(T: FfdTransform) -> FfdTransform:
    """Halve the control spacing while reproducing the same displacement field."""
    c = T.coefficients
    for axis in range(3):
        c = _subdivide_axis(c, axis, T.margin)
    return FfdTransform(T.domain, T.delta / 2.0, c, c.shape[:3], T.margin)


def sample_points(spline: SplineImage, geometry: GridGeometry, points_mm, with_gradient=False):
    """Sample a prefiltered image at mm positions; gradient returned per mm."""
    idx = geometry.to_index(np.asarray(points_mm).reshape(-1, 3))
    if with_gradient:
        val, grad, valid = spline.sample(idx, True)
        return val, grad / np.array(geometry.spacing), valid
    return spline.sample(idx)


def resample(moving: ScalarVolume, T, target: GridGeometry, spline: SplineImage | None = None):
    """Cubic-interpolated ``moving(g(x))`` on ``target``; returns ``(volume, valid_mask)``.

    Samples mapping outside the moving grid are set to zero and marked
    invalid in the mask.
    """
    spline = spline or SplineImage(moving.samples)
    pts = target.voxel_centers() + T.displacement(target)
    val, valid = sample_points(spline, moving.geometry, pts)
    return ScalarVolume(target, val.reshape(target.dims)), valid.reshape(target.dims)


def dense_field_transform(field: VectorField):
    """Wrap a dense displacement field as a transform sampled on its own grid."""
    return _DenseTransform(field)


class _DenseTransform:
    def __init__(self, field: VectorField):
        self.field = field

    def displacement(self, geometry):
        if geometry != self.field.geometry:
            raise ValidationError("dense field can only be evaluated on its own grid")
        return np.array(self.field.displacement)

    def jacobian_field(self, geometry):
        u = self.displacement(geometry)
        J = np.empty(geometry.dims + (3, 3))
        for e in range(3):
            J[..., :, e] = np.gradient(u, geometry.spacing[e], axis=e)
        J += np.eye(3)
        return J


__all__ = [
    "FfdTransform", "make_ffd", "bspline3", "transform_point", "jacobian", "render_field",
    "refine_grid", "resample", "sample_points", "dense_field_transform", "MARGIN",
]
