"""Accuracy measures for registered tensor fields.

All measures are taken over a white-matter mask derived from the fixed
image alone (FA above 0.4), so the mask never depends on registration
output.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateError, ValidationError
from .tensor_model import eig_field, fractional_anisotropy
from .volume_io import TensorVolume, VectorField

FA_THRESHOLD = 0.4
# fixed-tensor eigenvalues closer than this (relative) span one eigenspace for OVL
OVL_DEGENERATE_TOL = 1e-6


def fa_mask(fixed: TensorVolume, threshold=FA_THRESHOLD) -> np.ndarray:
    evals = np.linalg.eigvalsh(fixed.matrices())
    return (fractional_anisotropy(evals) > threshold) & fixed.valid


def _check_mask(mask, geometry):
    mask = np.asarray(mask, bool)
    if mask.shape != geometry.dims:
        raise ValidationError("mask shape does not match geometry")
    if not mask.any():
        raise DegenerateError("evaluation mask is empty")
    return mask


def field_correspondence(estimated: VectorField, truth: VectorField, mask):
    """Per-voxel ``|v - v'| / (|v| + |v'|)`` on the mask, and its median."""
    if estimated.geometry != truth.geometry:
        raise ValidationError("estimated and ground-truth fields have different geometries")
    mask = _check_mask(mask, truth.geometry)
    a = estimated.displacement[mask]
    b = truth.displacement[mask]
    num = np.linalg.norm(a - b, axis=-1)
    den = np.linalg.norm(a, axis=-1) + np.linalg.norm(b, axis=-1)
    cb = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return cb, float(np.median(cb))


def _masked_eig(tensors: TensorVolume, mask):
    return eig_field(tensors.matrices()[mask])


def eigenvector_angle(fixed: TensorVolume, registered: TensorVolume, mask):
    """Principal-eigenvector angle in degrees folded to [0, 90].

    Returns ``(per_voxel, median, dropped)``; voxels where either tensor has
    no positive principal eigenvalue are dropped.
    """
    if fixed.geometry != registered.geometry:
        raise ValidationError("tensor volumes have different geometries")
    mask = _check_mask(mask, fixed.geometry)
    lf, vf = _masked_eig(fixed, mask)
    lr, vr = _masked_eig(registered, mask)
    keep = (lf[:, 0] > 0) & (lr[:, 0] > 0)
    n, m = vf[keep, :, 0], vr[keep, :, 0]
    cos = np.abs(np.einsum("ij,ij->i", n, m)) / (np.linalg.norm(n, axis=-1) * np.linalg.norm(m, axis=-1))
    ab = np.degrees(np.arccos(np.clip(cos, 0.0, 1.0)))
    dropped = int((~keep).sum())
    if ab.size == 0:
        raise DegenerateError("no masked voxel has a principal eigenvector in both fields")
    return ab, float(np.median(ab)), dropped


def _align_degenerate(lf, vf, vr, tol=OVL_DEGENERATE_TOL):
    """Within a repeated fixed eigenvalue, choose the basis that follows the registered eigenvectors.

    Eigenvectors inside a repeated eigenvalue are arbitrary, so the overlap
    would otherwise depend on a basis choice. The subspace basis is the
    Gram-Schmidt orthonormalization of the registered eigenvectors (in
    order) projected onto the subspace.
    """
    vf = vf.copy()
    scale = np.maximum(np.abs(lf).max(axis=-1), np.finfo(float).tiny)
    g12 = (lf[:, 0] - lf[:, 1]) <= tol * scale
    g23 = (lf[:, 1] - lf[:, 2]) <= tol * scale
    iso = g12 & g23
    vf[iso] = vr[iso]
    for sel, (i, j) in ((g23 & ~iso, (1, 2)), (g12 & ~iso, (0, 1))):
        if not np.any(sel):
            continue
        basis = vf[sel][:, :, [i, j]]
        other = vf[sel][:, :, 3 - i - j]
        r = vr[sel][:, :, i]
        proj = np.einsum("nak,nk->na", basis, np.einsum("nak,na->nk", basis, r))
        norm = np.linalg.norm(proj, axis=-1)
        ok = norm > 1e-8
        first = np.where(ok[:, None], proj / np.where(ok, norm, 1.0)[:, None], basis[:, :, 0])
        vals = np.empty(basis.shape[:2] + (3,))
        vals[:, :, i] = first
        vals[:, :, j] = np.cross(other, first)
        vals[:, :, 3 - i - j] = other
        vf[sel] = vals
    return vf


def voxel_overlap(lf, vf, lr, vr):
    """``sum_i l'_i l_i <e'_i, e_i>^2 / sum_i l'_i l_i`` per row; NaN where the denominator is 0."""
    w = lf * lr
    den = w.sum(axis=-1)
    dots = np.einsum("nai,nai->ni", vf, vr) ** 2
    num = (w * dots).sum(axis=-1)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def overlap(fixed: TensorVolume, registered: TensorVolume, mask):
    """Mean eigenvalue-weighted eigenvector overlap; returns ``(per_voxel, mean, dropped)``."""
    if fixed.geometry != registered.geometry:
        raise ValidationError("tensor volumes have different geometries")
    mask = _check_mask(mask, fixed.geometry)
    lf, vf = _masked_eig(fixed, mask)
    lr, vr = _masked_eig(registered, mask)
    vf = _align_degenerate(lf, vf, vr)
    ov = voxel_overlap(lf, vf, lr, vr)
    keep = np.isfinite(ov)
    if not np.any(keep):
        raise DegenerateError("every masked voxel has a zero overlap denominator")
    ov = np.clip(ov[keep], 0.0, 1.0)
    return ov, float(ov.mean()), int((~keep).sum())


@dataclass(frozen=True)
class PairedTTest:
    t: float
    p: float
    df: int
    mean_difference: float
    degenerate: bool = False


def paired_ttest(a, b) -> PairedTTest:
    """Two-sided paired Student t-test of ``a`` against ``b``."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValidationError("paired samples must have equal length")
    if a.size < 3:
        raise ValidationError("paired t-test needs at least 3 pairs")
    d = a - b
    if np.all(d == d[0]):
        return PairedTTest(float("nan"), float("nan"), a.size - 1, float(d.mean()), True)
    res = stats.ttest_rel(a, b)
    return PairedTTest(float(res.statistic), float(res.pvalue), a.size - 1, float(d.mean()))


@dataclass
class EvaluationReport:
    C: float            # median field correspondence
    a: float            # median principal-eigenvector angle, degrees
    ovl: float          # mean overlap
    n_b: int
    medians: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    per_voxel: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"C": self.C, "a_deg": self.a, "ovl": self.ovl, "N_B": self.n_b,
                "medians": self.medians, "means": self.means, "dropped": self.dropped}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, case, mode) -> list:
        return [case, mode, repr(self.C), repr(self.a), repr(self.ovl), self.n_b]


CSV_COLUMNS = ["case", "mode", "C", "a_deg", "ovl", "N_B"]


def evaluate(fixed: TensorVolume, registered: TensorVolume, estimated: VectorField, truth: VectorField,
             threshold=FA_THRESHOLD, mask=None) -> EvaluationReport:
    """All three measures on the fixed-image FA mask."""
    if mask is None:
        mask = fa_mask(fixed, threshold)
    mask = _check_mask(mask, fixed.geometry)
    cb, c_med = field_correspondence(estimated, truth, mask)
    ab, a_med, a_drop = eigenvector_angle(fixed, registered, mask)
    ov, ov_mean, ov_drop = overlap(fixed, registered, mask)
    return EvaluationReport(
        C=c_med, a=a_med, ovl=ov_mean, n_b=int(mask.sum()),
        medians={"C": c_med, "a_deg": a_med, "ovl": float(np.median(ov))},
        means={"C": float(cb.mean()), "a_deg": float(ab.mean()), "ovl": ov_mean},
        dropped={"a_deg": a_drop, "ovl": ov_drop},
        per_voxel={"C": cb, "a_deg": ab, "ovl": ov},
    )


def reports_csv(rows) -> str:
    """CSV text for ``(case, mode, report)`` rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for case, mode, rep in rows:
        w.writerow(rep.csv_row(case, mode))
    return buf.getvalue()
