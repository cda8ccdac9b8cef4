"""Limited-memory BFGS with a strong-Wolfe line search.

Objectives are callables returning ``(value, gradient)``. Optional box
bounds switch the line search to projected Armijo backtracking.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizationError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    memory: int = 10
    epsilon: float = 0.01          # stop when |c_t - c_(t-1)| < epsilon
    relative: bool = False         # compare against epsilon * (c_0 - c_t) instead
    max_iterations: int = 200
    c1: float = 1e-4
    c2: float = 0.9
    gradient_tol: float = 1e-8     # stop when max |g| < gradient_tol
    max_line_search: int = 20
    bounds: tuple | None = None    # (lower, upper), scalars or arrays

    def __post_init__(self):
        if self.memory < 1:
            raise ValidationError("memory must be at least 1")
        if not self.epsilon >= 0:
            raise ValidationError("epsilon must be nonnegative")
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be nonnegative")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValidationError("line-search constants need 0 < c1 < c2 < 1")


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    costs: list = field(default_factory=list)   # cost at start and after every iteration
    iterations: int = 0
    evaluations: int = 0
    status: str = "max_iterations"
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "stationary")


class _Counted:
    def __init__(self, fun):
        self.fun = fun
        self.n = 0

    def __call__(self, x):
        self.n += 1
        f, g = self.fun(x)
        f = float(f)
        g = np.asarray(g, dtype=float)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise OptimizationError("objective returned a non-finite value or gradient")
        return f, g


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points and slopes, or None."""
    d1 = ga + gb - 3 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.copysign(np.sqrt(rad), b - a)
    den = gb - ga + 2 * d2
    if den == 0:
        return None
    return b - (b - a) * (gb + d2 - d1) / den


def _wolfe(fun, x, f0, g0, d, alpha0, cfg):
    """Strong-Wolfe line search; returns ``(alpha, f, g)`` or None."""
    dphi0 = g0 @ d
    cache = {}

    def phi(a):
        if a not in cache:
            f, g = fun(x + a * d)
            cache[a] = (f, g, g @ d)
        return cache[a]

    def zoom(lo, flo, dlo, hi, fhi, dhi, budget):
        for _ in range(budget):
            a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            width = hi - lo
            if a is None or not (min(lo, hi) + 0.1 * abs(width) <= a <= max(lo, hi) - 0.1 * abs(width)):
                a = lo + 0.5 * width
            fa, ga, da = phi(a)
            if fa > f0 + cfg.c1 * a * dphi0 or fa >= flo:
                hi, fhi, dhi = a, fa, da
            else:
                if abs(da) <= -cfg.c2 * dphi0:
                    return a, fa, ga
                if da * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = a, fa, da
        return None

    prev, fprev, dprev = 0.0, f0, dphi0
    a = alpha0
    for i in range(cfg.max_line_search):
        fa, ga, da = phi(a)
        if fa > f0 + cfg.c1 * a * dphi0 or (i > 0 and fa >= fprev):
            return zoom(prev, fprev, dprev, a, fa, da, cfg.max_line_search - i)
        if abs(da) <= -cfg.c2 * dphi0:
            return a, fa, ga
        if da >= 0:
            return zoom(a, fa, da, prev, fprev, dprev, cfg.max_line_search - i)
        prev, fprev, dprev = a, fa, da
        a = 2.0 * a
    return None


def _projected_armijo(fun, x, f0, g0, d, alpha0, lower, upper, cfg):
    a = alpha0
    for _ in range(cfg.max_line_search):
        xn = np.clip(x + a * d, lower, upper)
        step = xn - x
        if not np.any(step):
            return None
        fn, gn = fun(xn)
        if fn <= f0 + cfg.c1 * (g0 @ step):
            return xn, fn, gn
        a *= 0.5
    return None


def minimize(objective, x0, config: OptimizerConfig = OptimizerConfig()) -> OptimizeResult:
    """Minimize ``objective`` from ``x0``.

    The first step is scaled so its largest component has unit length;
    later steps start from the quasi-Newton step (length 1). Iteration stops
    when the cost changes by less than ``epsilon``, the gradient vanishes,
    the line search fails, or ``max_iterations`` is reached; the returned
    ``status`` says which.
    """
    cfg = config
    fun = _Counted(objective)
    x = np.array(x0, dtype=float).ravel()
    lower = upper = None
    if cfg.bounds is not None:
        lower = np.broadcast_to(np.asarray(cfg.bounds[0], float), x.shape)
        upper = np.broadcast_to(np.asarray(cfg.bounds[1], float), x.shape)
        if np.any(lower > upper):
            raise ValidationError("lower bound exceeds upper bound")
        x = np.clip(x, lower, upper)
    f, g = fun(x)
    result = OptimizeResult(x, f, g, [f])
    pairs = deque(maxlen=cfg.memory)

    def free_mask(x, g):
        if lower is None:
            return None
        return ~(((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0)))

    for it in range(cfg.max_iterations):
        free = free_mask(x, g)
        gf = g if free is None else np.where(free, g, 0.0)
        gmax = np.max(np.abs(gf)) if gf.size else 0.0
        if gmax < cfg.gradient_tol:
            result.status, result.message = "stationary", "gradient below tolerance"
            break
        d = _two_loop(gf, list(pairs))
        if free is not None:
            d = np.where(free, d, 0.0)
        if d @ gf >= 0:  # lost descent (stale curvature); restart from steepest descent
            pairs.clear()
            d = -gf
        alpha0 = 1.0 / gmax if not pairs else 1.0

        if lower is None:
            found = _wolfe(fun, x, f, g, d, alpha0, cfg)
            if found is not None:
                a, fn, gn = found
                xn = x + a * d
        else:
            found = _projected_armijo(fun, x, f, g, d, alpha0, lower, upper, cfg)
            if found is not None:
                xn, fn, gn = found
        if found is None:
            result.status, result.message = "line_search_failed", f"no acceptable step at iteration {it + 1}"
            log.warning("line search failed at iteration %d; keeping best point", it + 1)
            break

        s, y = xn - x, gn - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            pairs.append((s, y, 1.0 / sy))
        change = f - fn
        x, f, g = xn, fn, gn
        result.costs.append(f)
        result.iterations = it + 1
        log.debug("iteration %d cost %.8g", it + 1, f)
        limit = cfg.epsilon * (result.costs[0] - f) if cfg.relative else cfg.epsilon
        if abs(change) < limit:
            result.status, result.message = "converged", f"cost change {abs(change):.3g} < {limit:.3g}"
            break
    else:
        result.status, result.message = "max_iterations", f"stopped after {cfg.max_iterations} iterations"

    result.x, result.value, result.gradient = x, f, g
    result.evaluations = fun.n
    return result


@dataclass
class GradientCheck:
    max_error: float           # max_i |a_i - f_i| / max_i |f_i|
    errors: np.ndarray         # per-component |a_i - f_i| / max_i |f_i|
    analytic: np.ndarray
    numeric: np.ndarray


def check_gradient(objective, mu, h=1e-4, indices=None) -> GradientCheck:
    """Compare the analytic gradient with central differences of step ``h``."""
    mu = np.array(mu, dtype=float).ravel()
    _, a = objective(mu)
    a = np.asarray(a, dtype=float)
    idx = np.arange(mu.size) if indices is None else np.asarray(indices)
    num = np.zeros(idx.size)
    for k, i in enumerate(idx):
        e = np.zeros_like(mu)
        e[i] = h
        num[k] = (objective(mu + e)[0] - objective(mu - e)[0]) / (2 * h)
    scale = max(np.max(np.abs(num)), np.finfo(float).tiny)
    err = np.abs(a[idx] - num) / scale
    return GradientCheck(float(err.max()) if err.size else 0.0, err, a[idx], num)
