"""Multiresolution registration of tensor volumes.

Nonrigid modes drive a cubic B-spline FFD with the Jensen-Tsallis cost on
either the FA map (one component) or the six tensor elements. The affine
baseline maximizes Parzen mutual information between FA maps. Both use the
same pyramid and optimizer, resample the moving tensors through the final
transform and reorient them once at the end.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .ffd import make_ffd, refine_grid, render_field, sample_points
from .interpolation import SplineImage
from .jt_similarity import DEFAULT_BINS, HistogramObjective
from .optimizer import OptimizerConfig, minimize
from .reorientation import reorient_field
from .tensor_model import fa_map
from .volume_io import GridGeometry, ScalarVolume, TensorVolume, VectorField

log = logging.getLogger(__name__)

MIN_COARSE_VOXELS = 8


class RegistrationMode(str, Enum):
    JT_FA = "jt-fa"
    JT_DT = "jt-dt"
    AFFINE_MI = "affine-mi"


@dataclass(frozen=True)
class RegistrationConfig:
    mode: RegistrationMode = RegistrationMode.JT_DT
    levels: int = 3
    control_spacing: float = 8.0     # finest-level FFD control spacing, voxels
    bins: int = DEFAULT_BINS
    alpha: float = 2.0
    optimizer: OptimizerConfig = OptimizerConfig()
    strict_folding: bool = False     # raise instead of warning when the result folds

    def __post_init__(self):
        object.__setattr__(self, "mode", RegistrationMode(self.mode))
        if not 1 <= self.levels <= 5:
            raise ValidationError("levels must be between 1 and 5")
        if not self.control_spacing >= 2:
            raise ValidationError("control spacing must be at least 2 voxels")
        if self.bins < 8:
            raise ValidationError("bins must be at least 8")


@dataclass(frozen=True)
class PyramidLevel:
    index: int          # 0 = coarsest
    factor: int
    sigma: float        # Gaussian sigma in fine voxels before subsampling
    control_spacing: float  # mm


@dataclass
class LevelReport:
    level: PyramidLevel
    costs: list
    status: str
    iterations: int
    evaluations: int
    excluded: int
    seconds: float


@dataclass
class RegistrationResult:
    mode: RegistrationMode
    transform: object
    levels: list = field(default_factory=list)
    registered_components: list = field(default_factory=list)
    registered_tensors: TensorVolume | None = None
    field: VectorField | None = None
    valid: np.ndarray | None = None   # fixed voxels that map inside the moving image

    @property
    def costs(self) -> list:
        return [c for lv in self.levels for c in lv.costs]

    @property
    def status(self) -> str:
        bad = [lv.status for lv in self.levels if lv.status not in ("converged", "stationary")]
        return bad[-1] if bad else "converged"

    def write_trace(self, path):
        """Cost trace as CSV with columns level, iteration, cost."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "iteration", "cost"])
            for lv in self.levels:
                for i, c in enumerate(lv.costs):
                    w.writerow([lv.level.index, i, repr(float(c))])


# ---------------------------------------------------------------------------
# components and pyramid

def tensor_components(tensors: TensorVolume) -> list:
    return [ScalarVolume(tensors.geometry, tensors.components[i]) for i in range(6)]


def prepare_components(fixed, moving, mode) -> tuple:
    """Component lists for a mode: the FA map for FA modes, the six elements for JT-DT.

    ``fixed``/``moving`` are TensorVolumes, or ScalarVolumes already holding
    FA maps for the FA-based modes.
    """
    mode = RegistrationMode(mode)
    if fixed.geometry != moving.geometry:
        raise ValidationError("fixed and moving geometries differ")
    if mode is RegistrationMode.JT_DT:
        if not (isinstance(fixed, TensorVolume) and isinstance(moving, TensorVolume)):
            raise ValidationError("JT-DT registration needs tensor volumes for both images")
        return tensor_components(fixed), tensor_components(moving)

    def fa(v):
        if isinstance(v, TensorVolume):
            return fa_map(v)
        if isinstance(v, ScalarVolume):
            return v
        raise ValidationError(f"cannot derive an FA map from {type(v).__name__}")
    return [fa(fixed)], [fa(moving)]


def pyramid_levels(geometry: GridGeometry, levels=3, control_spacing=8.0) -> list:
    """Level descriptions, coarse to fine, reduced if the coarsest would be too small."""
    n = levels
    while n > 1 and min(-(-d // 2 ** (n - 1)) for d in geometry.dims) < MIN_COARSE_VOXELS:
        n -= 1
    if n < levels:
        log.warning("volume %s too small for %d pyramid levels; using %d", geometry.dims, levels, n)
    spacing = float(np.min(geometry.spacing))
    out = []
    for i in range(n):
        f = 2 ** (n - 1 - i)
        out.append(PyramidLevel(i, f, f / 2.0 if f > 1 else 0.0, control_spacing * spacing * f))
    return out


def downsample(volume: ScalarVolume, factor: int) -> ScalarVolume:
    if factor == 1:
        return volume
    sm = ndimage.gaussian_filter(volume.samples, factor / 2.0, mode="nearest")
    geo = volume.geometry
    sub = sm[::factor, ::factor, ::factor]
    return ScalarVolume(GridGeometry(sub.shape, tuple(s * factor for s in geo.spacing), geo.origin), sub)


def build_pyramid(components, levels=3) -> list:
    """Per-level component lists, coarse to fine; the finest level is the input itself."""
    components = list(components)
    plan = pyramid_levels(components[0].geometry, levels)
    return [[downsample(c, lv.factor) for c in components] for lv in plan]


# ---------------------------------------------------------------------------
# resampling the moving data through a transform

def resample_components(moving_components, transform, target: GridGeometry):
    pts = target.voxel_centers().reshape(-1, 3) + transform.displacement(target).reshape(-1, 3)
    out = []
    valid = None
    for comp in moving_components:
        val, ok = sample_points(SplineImage(comp.samples), comp.geometry, pts)
        out.append(ScalarVolume(target, val.reshape(target.dims)))
        valid = ok.reshape(target.dims)
    return out, valid


def warp_tensors(moving: TensorVolume, transform, target: GridGeometry, strict=False):
    """Resample the six elements, then reorient once with the transform's local rotations."""
    comps, valid = resample_components(tensor_components(moving), transform, target)
    resampled = TensorVolume(target, np.stack([c.samples for c in comps]), valid)
    return reorient_field(resampled, transform, strict=strict), valid


# ---------------------------------------------------------------------------
# affine transform with the FFD's transform protocol

class AffineTransform:
    """``g(x) = x + M (x - c) / r + t`` with ``c`` the domain centre and ``r`` its half-extent.

    Parameters are ``t`` (3) followed by ``M`` (row major); scaling by
    ``r`` gives all twelve parameters units of millimetres at the boundary.
    """

    n_params = 12

    def __init__(self, domain: GridGeometry, params=None):
        self.domain = domain
        self.center = np.array(domain.origin) + 0.5 * domain.extent
        self.radius = max(0.5 * float(np.max(domain.extent)), 1.0)
        p = np.zeros(12) if params is None else np.array(params, dtype=float).ravel()
        if p.size != 12:
            raise ValidationError("affine transforms have 12 parameters")
        self._p = p

    def parameters(self):
        return self._p.copy()

    def with_parameters(self, mu):
        return AffineTransform(self.domain, mu)

    @property
    def translation(self):
        return self._p[:3].copy()

    @property
    def matrix(self):
        return np.eye(3) + self._p[3:].reshape(3, 3) / self.radius

    def displacement(self, geometry):
        x = geometry.voxel_centers() - self.center
        return x @ (self.matrix - np.eye(3)).T + self._p[:3]

    def jacobian_field(self, geometry):
        return np.broadcast_to(self.matrix, geometry.dims + (3, 3)).copy()

    def parameter_gradient(self, geometry, weights):
        w = np.asarray(weights).reshape(-1, 3)
        x = (geometry.voxel_centers().reshape(-1, 3) - self.center) / self.radius
        return np.concatenate([w.sum(axis=0), (w.T @ x).ravel()])


# ---------------------------------------------------------------------------
# drivers

def _run_levels(fixed_components, moving_components, config, make_transform, step_transform, metric):
    fixed_pyr = build_pyramid(fixed_components, config.levels)
    moving_pyr = build_pyramid(moving_components, config.levels)
    plan = pyramid_levels(fixed_components[0].geometry, config.levels, config.control_spacing)
    T = make_transform(plan[0])
    reports = []
    for lv, fc, mc in zip(plan, fixed_pyr, moving_pyr):
        if lv.index > 0:
            T = step_transform(T)
        t0 = time.perf_counter()
        obj = HistogramObjective(fc, mc, T, metric, config.alpha, config.bins)
        res = minimize(obj, T.parameters(), config.optimizer)
        T = T.with_parameters(res.x)
        obj.value(res.x)
        reports.append(LevelReport(lv, list(res.costs), res.status, res.iterations, res.evaluations,
                                   obj.last_excluded, time.perf_counter() - t0))
        log.info("level %d (factor %d): %d iterations, cost %.6g -> %.6g, %s",
                 lv.index, lv.factor, res.iterations, res.costs[0], res.costs[-1], res.status)
    return T, reports


def _finish(mode, T, reports, fixed_components, moving_components, moving_tensors, config):
    geo = fixed_components[0].geometry
    comps, valid = resample_components(moving_components, T, geo)
    result = RegistrationResult(mode, T, reports, comps, None, render_field(T, geo), valid)
    if moving_tensors is not None:
        result.registered_tensors, _ = warp_tensors(moving_tensors, T, geo, config.strict_folding)
    return result


def register(fixed, moving, config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Register ``moving`` onto ``fixed`` with the configured mode.

    ``fixed``/``moving`` are TensorVolumes (or FA ScalarVolumes for the
    FA-based modes). The reported field is ``v`` on the fixed grid with
    ``fixed(x) ~ moving(x + v(x))``.
    """
    if config.mode is RegistrationMode.AFFINE_MI:
        return register_affine_mi(fixed, moving, config)
    fc, mc = prepare_components(fixed, moving, config.mode)
    geo = fc[0].geometry
    T, reports = _run_levels(fc, mc, config, lambda lv: make_ffd(geo, lv.control_spacing), refine_grid, "jt")
    tensors = moving if isinstance(moving, TensorVolume) else None
    return _finish(config.mode, T, reports, fc, mc, tensors, config)


def register_affine_mi(fixed, moving, config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Twelve-parameter affine baseline maximizing Parzen mutual information of FA maps."""
    config = replace(config, mode=RegistrationMode.AFFINE_MI)
    fc, mc = prepare_components(fixed, moving, RegistrationMode.AFFINE_MI)
    geo = fc[0].geometry
    T, reports = _run_levels(fc, mc, config, lambda lv: AffineTransform(geo), lambda T: T, "mi")
    tensors = moving if isinstance(moving, TensorVolume) else None
    return _finish(config.mode, T, reports, fc, mc, tensors, config)
