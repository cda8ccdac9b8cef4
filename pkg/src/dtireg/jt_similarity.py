"""Jensen-Tsallis similarity between image components.

The per-component measure treats the rows of a Parzen-window joint
histogram (moving intensity conditioned on fixed-intensity bin) as the
distributions being compared, weighted by the fixed-image histogram. For
alpha = 2 it reduces to

    D = sum_ij P_ij^2 / w_i - sum_j q_j^2,    S = 1 - D / (1 - 1/n)

with ``w`` the fixed marginal, ``q`` the moving marginal and ``n`` the
number of occupied fixed bins. Aligned images make the conditional rows
sharp and mutually distinct, so S is smallest at alignment; registration
minimizes it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, ValidationError
from .ffd import sample_points
from .interpolation import SplineImage
from .volume_io import ScalarVolume

DEFAULT_BINS = 32
PARZEN_PAD = 2
WINDOW_PERCENTILES = (1.0, 99.0)
_SUM_TOL = 1e-9


# ---------------------------------------------------------------------------
# entropies on plain distributions

def _check_alpha(alpha):
    alpha = float(alpha)
    if not alpha > 0 or alpha == 1.0:
        raise ValidationError(f"entropic index must be positive and != 1, got {alpha}")
    return alpha


def _check_distribution(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > _SUM_TOL:
        raise ValidationError("not a probability vector")
    return p


def alpha_log(x, alpha):
    """Tsallis alpha-logarithm ``(x^(1-alpha) - 1) / (1 - alpha)``."""
    alpha = _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValidationError("alpha_log is defined for x > 0 only")
    out = (x ** (1.0 - alpha) - 1.0) / (1.0 - alpha)
    return float(out) if out.ndim == 0 else out


def _tsallis(p, alpha):
    if alpha == 2.0:
        return 1.0 - np.sum(p * p, axis=-1)
    return (np.sum(np.where(p > 0, p, 0.0) ** alpha, axis=-1) - 1.0) / (1.0 - alpha)


def tsallis_entropy(p, alpha=2.0) -> float:
    alpha = _check_alpha(alpha)
    return float(_tsallis(_check_distribution(p), alpha))


def jt_divergence(ps, w, alpha=2.0) -> float:
    """Jensen-Tsallis divergence of the weighted distributions ``ps``."""
    alpha = _check_alpha(alpha)
    ps = [np.asarray(p, dtype=float) for p in ps]
    if len({p.shape for p in ps}) != 1:
        raise ValidationError("distributions must all have the same length")
    for p in ps:
        _check_distribution(p)
    w = np.asarray(w, dtype=float)
    if w.shape != (len(ps),) or np.any(w < 0) or abs(w.sum() - 1.0) > _SUM_TOL:
        raise ValidationError("weights must be nonnegative, one per distribution, and sum to 1")
    rows = np.stack(ps)
    mix = w @ rows
    return float(_tsallis(mix, alpha) - w @ _tsallis(rows, alpha))


def jt_similarity(ps, w, alpha=2.0) -> float:
    n = len(ps)
    if n < 2:
        raise ValidationError("similarity needs at least two distributions")
    return 1.0 - jt_divergence(ps, w, alpha) / alpha_log(n, alpha)


# ---------------------------------------------------------------------------
# joint histograms

def intensity_window(samples, percentiles=WINDOW_PERCENTILES):
    """Robust (low, high) intensity range; widened when degenerate."""
    a = np.asarray(samples, dtype=float).ravel()
    lo, hi = np.percentile(a, percentiles)
    if hi <= lo:
        lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        hi = lo + 1.0
    return float(lo), float(hi)


@dataclass(frozen=True)
class JointDistribution:
    """Smoothed joint probabilities, fixed bins on rows, moving bins on columns."""

    bins: np.ndarray
    fixed_marginal: np.ndarray
    fixed_window: tuple
    moving_window: tuple
    kernel_order: int = 3
    n_excluded: int = 0

    @property
    def moving_marginal(self) -> np.ndarray:
        return self.bins.sum(axis=0)

    @property
    def occupied(self) -> np.ndarray:
        return self.fixed_marginal > 0

    def conditionals(self) -> np.ndarray:
        """Rows divided by their fixed-bin mass, occupied rows only."""
        occ = self.occupied
        return self.bins[occ] / self.fixed_marginal[occ, None]


class ParzenHistogram:
    """Joint histogram of fixed bins against a cubic Parzen window on moving values.

    The fixed side is binned once (nearest bin) at construction; moving values
    are supplied per evaluation together with a validity mask.
    """

    def __init__(self, fixed_values, fixed_window, moving_window, bins=(DEFAULT_BINS, DEFAULT_BINS)):
        n_f, n_m = (int(b) for b in bins)
        if n_f < 8 or n_m < 8:
            raise ValidationError("histograms need at least 8 bins per axis")
        self.n_f, self.n_m = n_f, n_m
        self.fixed_window = tuple(fixed_window)
        self.moving_window = tuple(moving_window)
        lo, hi = self.fixed_window
        f = (np.asarray(fixed_values, dtype=float).ravel() - lo) / (hi - lo) * (n_f - 1)
        self.fbin = np.clip(np.rint(f), 0, n_f - 1).astype(np.int64)
        mlo, mhi = self.moving_window
        self._mscale = (n_m - 1 - 2 * PARZEN_PAD) / (mhi - mlo)
        self._mlo = mlo

    def joint(self, moving_values, valid):
        """Return ``(P, cache)`` where ``cache`` feeds :meth:`moving_derivative`."""
        valid = np.asarray(valid, bool)
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise DegenerateError("no fixed voxel maps inside the moving image")
        v = np.asarray(moving_values, dtype=float)[valid]
        fb = self.fbin[valid]
        m = PARZEN_PAD + (v - self._mlo) * self._mscale
        top = self.n_m - 1 - PARZEN_PAD
        inside = (m > PARZEN_PAD) & (m < top)
        m = np.clip(m, PARZEN_PAD, top)
        fl = np.floor(m)
        u = m - fl
        base = fl.astype(np.int64) - 1
        uu = u * u
        uuu = uu * u
        t = 1.0 - u
        w = (t * t * t / 6.0, (3 * uuu - 6 * uu + 4) / 6.0, (-3 * uuu + 3 * uu + 3 * u + 1) / 6.0, uuu / 6.0)
        flat = fb * self.n_m + base
        size = self.n_f * self.n_m
        P = np.zeros(size)
        for r in range(4):
            P += np.bincount(flat + r, weights=w[r], minlength=size)
        P = P.reshape(self.n_f, self.n_m) / n_valid
        omega = np.bincount(fb, minlength=self.n_f) / n_valid
        cache = (valid, flat, u, inside, n_valid)
        return P, omega, cache

    def moving_derivative(self, dC_dP, cache) -> np.ndarray:
        """Derivative of a histogram cost with respect to each moving sample."""
        valid, flat, u, inside, n_valid = cache
        uu = u * u
        t = 1.0 - u
        dw = (-0.5 * t * t, 1.5 * uu - 2 * u, -1.5 * uu + u + 0.5, 0.5 * uu)
        g = dC_dP.ravel()
        acc = np.zeros(flat.size)
        for r in range(4):
            acc += g[flat + r] * dw[r]
        acc *= np.where(inside, self._mscale / n_valid, 0.0)
        out = np.zeros(valid.size)
        out[valid] = acc
        return out


# ---------------------------------------------------------------------------
# histogram costs: each returns (value, d value / d P)

def jt_cost(P, omega, alpha=2.0, with_gradient=True):
    """JT similarity of the conditional rows of ``P`` weighted by ``omega``."""
    occ = omega > 0
    n = int(occ.sum())
    if n < 2:
        raise DegenerateError(f"only {n} occupied fixed-intensity bin(s); similarity undefined")
    alpha = _check_alpha(alpha)
    q = P.sum(axis=0)
    norm = alpha_log(n, alpha)
    if alpha == 2.0:
        Po = P[occ]
        D = np.sum(Po * Po / omega[occ, None]) - np.sum(q * q)
    else:
        rows = P[occ] / omega[occ, None]
        D = _tsallis(q, alpha) - omega[occ] @ _tsallis(rows, alpha)
    S = 1.0 - D / norm
    if not with_gradient:
        return S, None
    if alpha != 2.0:
        raise ValidationError("analytic gradient is only available for alpha = 2; "
                              "use finite_difference_gradient instead")
    dD = np.zeros_like(P)
    dD[occ] = 2.0 * P[occ] / omega[occ, None]
    dD -= 2.0 * q[None, :]
    dD[~occ] = 0.0
    return S, -dD / norm


def mi_cost(P, omega, with_gradient=True):
    """Negated mutual information of the joint histogram."""
    q = P.sum(axis=0)
    nz = P > 0
    denom = (omega[:, None] * q[None, :])
    mi = np.sum(P[nz] * np.log(P[nz] / denom[nz]))
    if not with_gradient:
        return -mi, None
    grad = np.zeros_like(P)
    qb = np.broadcast_to(q[None, :], P.shape)
    grad[nz] = np.log(P[nz] / qb[nz])
    return -mi, -grad


def joint_from_samples(hist: ParzenHistogram, moving_values, valid) -> JointDistribution:
    P, omega, _ = hist.joint(moving_values, valid)
    return JointDistribution(P, omega, hist.fixed_window, hist.moving_window, 3,
                             int(np.size(valid) - np.count_nonzero(valid)))


def build_joint(fixed: ScalarVolume, moving: ScalarVolume, transform, bins=(DEFAULT_BINS, DEFAULT_BINS),
                kernel_order=3) -> JointDistribution:
    """Parzen joint histogram of ``fixed(x)`` against ``moving(g(x))``."""
    if kernel_order != 3:
        raise ValidationError("only the cubic B-spline Parzen window (order 3) is supported")
    pair = ComponentPair(fixed, moving, bins)
    pts = pair.points(transform)
    val, valid = sample_points(pair.spline, moving.geometry, pts)
    return joint_from_samples(pair.hist, val, valid)


def component_similarity(joint: JointDistribution, alpha=2.0) -> float:
    return float(jt_cost(joint.bins, joint.fixed_marginal, alpha, with_gradient=False)[0])


# ---------------------------------------------------------------------------
# objectives over transform parameters

class ComponentPair:
    """One fixed/moving component with its binning and prefiltered moving image."""

    def __init__(self, fixed: ScalarVolume, moving: ScalarVolume, bins=(DEFAULT_BINS, DEFAULT_BINS)):
        self.fixed = fixed
        self.moving = moving
        self.spline = SplineImage(moving.samples)
        self.hist = ParzenHistogram(fixed.samples, intensity_window(fixed.samples),
                                    intensity_window(moving.samples), bins)
        self._centers = fixed.geometry.voxel_centers().reshape(-1, 3)

    def points(self, transform):
        return self._centers + transform.displacement(self.fixed.geometry).reshape(-1, 3)


def _normalize_bins(bins):
    if np.isscalar(bins):
        return (int(bins), int(bins))
    return tuple(int(b) for b in bins)


class HistogramObjective:
    """Average histogram cost over L component pairs as a function of parameters.

    ``metric`` is ``"jt"`` (Jensen-Tsallis similarity, minimized) or ``"mi"``
    (negated mutual information). Calling the object returns
    ``(value, gradient)``; gradients need alpha = 2 for ``"jt"``.
    """

    def __init__(self, fixed_components, moving_components, template, metric="jt", alpha=2.0,
                 bins=DEFAULT_BINS):
        fixed_components = list(fixed_components)
        moving_components = list(moving_components)
        if len(fixed_components) != len(moving_components):
            raise ValidationError("fixed and moving component lists differ in length")
        if not fixed_components:
            raise ValidationError("at least one component is required")
        geos = {c.geometry for c in fixed_components}
        mgeos = {c.geometry for c in moving_components}
        if len(geos) != 1 or len(mgeos) != 1:
            raise ValidationError("components must share one fixed and one moving geometry")
        if metric not in ("jt", "mi"):
            raise ValidationError(f"unknown metric '{metric}'")
        self.metric = metric
        self.alpha = _check_alpha(alpha)
        self.template = template
        self.fixed_geometry = fixed_components[0].geometry
        self.moving_geometry = moving_components[0].geometry
        bins = _normalize_bins(bins)
        self.pairs = [ComponentPair(f, m, bins) for f, m in zip(fixed_components, moving_components)]
        self._centers = self.pairs[0]._centers
        self.last_excluded = 0
        self.last_components = []

    def _cost(self, P, omega, with_gradient):
        if self.metric == "jt":
            return jt_cost(P, omega, self.alpha, with_gradient)
        return mi_cost(P, omega, with_gradient)

    def evaluate(self, mu, with_gradient=True):
        T = self.template.with_parameters(mu)
        pts = self._centers + T.displacement(self.fixed_geometry).reshape(-1, 3)
        L = len(self.pairs)
        total = 0.0
        weights = np.zeros_like(pts) if with_gradient else None
        values = []
        for pair in self.pairs:
            if with_gradient:
                val, grad, valid = sample_points(pair.spline, self.moving_geometry, pts, True)
            else:
                val, valid = sample_points(pair.spline, self.moving_geometry, pts)
            P, omega, cache = pair.hist.joint(val, valid)
            c, dc = self._cost(P, omega, with_gradient)
            values.append(float(c))
            total += c
            if with_gradient:
                weights += pair.hist.moving_derivative(dc, cache)[:, None] * grad
        self.last_excluded = int(valid.size - np.count_nonzero(valid))
        self.last_components = values
        total /= L
        if not with_gradient:
            return float(total)
        return float(total), T.parameter_gradient(self.fixed_geometry, weights / L)

    def __call__(self, mu):
        return self.evaluate(mu, with_gradient=True)

    def value(self, mu) -> float:
        return self.evaluate(mu, with_gradient=False)


def multicomponent_similarity(fixed_components, moving_components, transform, alpha=2.0,
                              bins=DEFAULT_BINS) -> float:
    """Mean JT similarity over corresponding components under ``transform``."""
    obj = HistogramObjective(fixed_components, moving_components, transform, "jt", alpha, bins)
    return obj.value(transform.parameters())


def similarity_gradient(fixed_components, moving_components, transform, alpha=2.0,
                        bins=DEFAULT_BINS) -> np.ndarray:
    """Analytic derivative of the multicomponent similarity with respect to the parameters."""
    if float(alpha) != 2.0:
        raise ValidationError("analytic gradient is only available for alpha = 2; "
                              "use finite_difference_gradient instead")
    obj = HistogramObjective(fixed_components, moving_components, transform, "jt", alpha, bins)
    return obj(transform.parameters())[1]


def finite_difference_gradient(fixed_components, moving_components, transform, alpha=2.0,
                               bins=DEFAULT_BINS, h=None) -> np.ndarray:
    """Central-difference gradient; works for any alpha but costs 2 evaluations per parameter."""
    obj = HistogramObjective(fixed_components, moving_components, transform, "jt", alpha, bins)
    mu = transform.parameters()
    if h is None:
        h = 1e-4 * float(np.min(obj.fixed_geometry.spacing))
    g = np.zeros_like(mu)
    for i in range(mu.size):
        e = np.zeros_like(mu)
        e[i] = h
        g[i] = (obj.value(mu + e) - obj.value(mu - e)) / (2 * h)
    return g
