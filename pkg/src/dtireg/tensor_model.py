"""Diffusion tensor estimation, signal synthesis and scalar indices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .volume_io import DwiSet, ScalarVolume, TensorVolume

# eigenvalues in [-PSD_TOL, 0) are clamped to EIG_FLOOR; below -PSD_TOL the voxel is invalid
PSD_TOL = 1e-12
EIG_FLOOR = 1e-12
_UNIT_TOL = 1e-9
# relative eigenvalue gap below which two eigenvalues share an eigenspace
DEGENERATE_TOL = 1e-10


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray   # (3,) descending
    eigenvectors: np.ndarray  # (3, 3), column i pairs with eigenvalues[i]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


@dataclass(frozen=True)
class ScalarIndexSet:
    """FA, MD, trace, and the direction color channels in (G, R, B) order."""

    fa: ScalarVolume
    md: ScalarVolume
    trace: ScalarVolume
    rgb: tuple

    def rgb_for_display(self) -> tuple:
        """Channels reordered to (R, G, B) for image writers."""
        g, r, b = self.rgb
        return (r, g, b)


def adc(tensor, g) -> float:
    """Apparent diffusion coefficient along unit direction ``g``."""
    g = np.asarray(g, dtype=float)
    if abs(np.linalg.norm(g) - 1.0) > _UNIT_TOL:
        raise ValidationError(f"gradient direction must be unit length, |g| = {np.linalg.norm(g)}")
    return float(g @ np.asarray(tensor, dtype=float) @ g)


def design_matrix(gradients) -> np.ndarray:
    """Rows ``g^T D g`` expressed over the six unique tensor components."""
    g = np.asarray(gradients, dtype=float)
    gx, gy, gz = g.T
    return np.stack([gx * gx, 2 * gx * gy, 2 * gx * gz, gy * gy, 2 * gy * gz, gz * gz], axis=1)


def _sort_desc(evals, evecs):
    order = np.argsort(-evals, axis=-1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=-1)
    evecs = np.take_along_axis(evecs, order[..., None, :], axis=-1)
    return evals, evecs


def _canonical_plane(axis):
    """Orthonormal pair spanning the plane normal to ``axis`` (unit, ... x 3)."""
    ref = np.zeros_like(axis)
    least = np.argmin(np.abs(axis), axis=-1)
    np.put_along_axis(ref, least[..., None], 1.0, axis=-1)
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    w = np.cross(axis, u)
    return u, w


def _fix_signs(evecs):
    # largest-magnitude entry of every eigenvector made positive
    idx = np.argmax(np.abs(evecs), axis=-2)
    lead = np.take_along_axis(evecs, idx[..., None, :], axis=-2)
    return evecs * np.where(lead < 0, -1.0, 1.0)


def eig_field(matrices) -> tuple:
    """Vectorized spectral decomposition of ``(..., 3, 3)`` symmetric matrices.

    Eigenvalues descend; eigenvectors are columns. Inside an exactly (to
    ``DEGENERATE_TOL``) repeated eigenvalue pair the basis is fixed to a
    canonical one so results do not depend on LAPACK rounding.
    """
    m = np.asarray(matrices, dtype=float)
    evals, evecs = np.linalg.eigh(m)
    evals, evecs = _sort_desc(evals, evecs)
    scale = np.maximum(np.abs(evals).max(axis=-1), np.finfo(float).tiny)
    gap12 = (evals[..., 0] - evals[..., 1]) <= DEGENERATE_TOL * scale
    gap23 = (evals[..., 1] - evals[..., 2]) <= DEGENERATE_TOL * scale
    iso = gap12 & gap23
    if np.any(iso):
        evecs[iso] = np.eye(3)
    pair23 = gap23 & ~iso
    if np.any(pair23):
        u, w = _canonical_plane(evecs[pair23][..., :, 0])
        evecs[pair23, :, 1] = u
        evecs[pair23, :, 2] = w
    pair12 = gap12 & ~iso
    if np.any(pair12):
        u, w = _canonical_plane(evecs[pair12][..., :, 2])
        evecs[pair12, :, 0] = u
        evecs[pair12, :, 1] = w
    evecs = _fix_signs(evecs)
    return evals, evecs


def spectral(tensor) -> SpectralDecomposition:
    m = np.asarray(tensor, dtype=float)
    if m.shape != (3, 3):
        raise ValidationError("spectral() expects a single 3x3 matrix")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ValidationError("tensor is not symmetric")
    evals, evecs = eig_field(0.5 * (m + m.T))
    return SpectralDecomposition(evals, evecs)


def fractional_anisotropy(evals) -> np.ndarray:
    """FA from eigenvalues on the last axis; zero tensors give 0."""
    ev = np.asarray(evals, dtype=float)
    mean = ev.mean(axis=-1, keepdims=True)
    num = ((ev - mean) ** 2).sum(axis=-1)
    den = (ev ** 2).sum(axis=-1)
    safe = np.where(den > 0, den, 1.0)
    fa = np.sqrt(1.5 * num / safe)
    return np.where(den > 0, np.clip(fa, 0.0, 1.0), 0.0)


def fa_map(tensors: TensorVolume) -> ScalarVolume:
    evals = np.linalg.eigvalsh(tensors.matrices())
    return ScalarVolume(tensors.geometry, fractional_anisotropy(evals))


def scalar_indices(tensors: TensorVolume) -> ScalarIndexSet:
    evals, evecs = eig_field(tensors.matrices())
    geo = tensors.geometry
    trace = evals.sum(axis=-1)
    e1 = np.abs(evecs[..., :, 0])
    zero = ~np.any(tensors.matrices() != 0, axis=(-2, -1))
    e1[zero] = 0.0
    rgb = tuple(ScalarVolume(geo, e1[..., i]) for i in range(3))  # (G, R, B) = (|e1x|, |e1y|, |e1z|)
    return ScalarIndexSet(
        fa=ScalarVolume(geo, fractional_anisotropy(evals)),
        md=ScalarVolume(geo, trace / 3.0),
        trace=ScalarVolume(geo, trace),
        rgb=rgb,
    )


def synthesize_signals(tensors: TensorVolume, gradients, bvalue, s0: ScalarVolume) -> DwiSet:
    """Noiseless DW signals ``S_k = S0 exp(-b g_k^T D g_k)``."""
    if s0.geometry != tensors.geometry:
        raise ValidationError("S0 and tensor geometries differ")
    g = np.asarray(gradients, dtype=float)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    X = design_matrix(g)
    adcs = np.tensordot(X, tensors.components, axes=(1, 0))
    sig = s0.samples[None] * np.exp(-float(bvalue) * adcs)
    dwis = tuple(ScalarVolume(s0.geometry, s) for s in sig)
    return DwiSet(s0, dwis, g, bvalue)


def fit_tensor(dwi: DwiSet) -> TensorVolume:
    """Log-linear least-squares tensor fit.

    Voxels with any nonpositive signal, or with an eigenvalue below
    ``-PSD_TOL`` after fitting, are marked invalid and hold the zero tensor.
    Slightly negative eigenvalues are clamped to ``EIG_FLOOR``.
    """
    X = design_matrix(dwi.gradients)
    if np.linalg.matrix_rank(X) < 6:
        raise ConfigurationError("gradient scheme is degenerate: design matrix rank < 6")
    A = -dwi.bvalue * X
    pinv = np.linalg.pinv(A)

    s0 = dwi.s0.samples
    sk = dwi.signals()
    valid = (s0 > 0) & np.all(sk > 0, axis=0)
    logs = np.zeros(sk.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log(np.where(valid, sk, 1.0)) - np.log(np.where(valid, s0, 1.0))[None]
    logs[:, valid] = ratio[:, valid]
    comps = np.tensordot(pinv, logs, axes=(1, 0))
    comps[:, ~valid] = 0.0

    tv = TensorVolume(dwi.geometry, comps)
    mats = tv.matrices()
    evals, evecs = np.linalg.eigh(mats)
    low = evals.min(axis=-1)
    bad = valid & (low < -PSD_TOL)
    clamp = valid & (low < 0) & ~bad
    if np.any(clamp):
        ev = evals[clamp]
        ev = np.where(ev < 0, EIG_FLOOR, ev)
        vec = evecs[clamp]
        mats[clamp] = (vec * ev[:, None, :]) @ np.swapaxes(vec, -1, -2)
    mats[bad] = 0.0
    valid = valid & ~bad
    return TensorVolume.from_matrices(dwi.geometry, mats, valid)
