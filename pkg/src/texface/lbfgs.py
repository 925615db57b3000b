"""Limited-memory BFGS with a strong-Wolfe line search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LbfgsError(RuntimeError):
    pass


@dataclass
class LbfgsResult:
    x: np.ndarray
    fx: float
    iterations: int
    status: str  # "converged" | "max_iter" | "line_search_failed"
    trace: list = field(default_factory=list)  # accepted objective values


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolant on [a, b]; falls back to bisection."""
    if a == b:
        return a
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - ga * gb
    if disc < 0.0:
        return 0.5 * (a + b)
    d2 = np.sqrt(disc) * np.sign(b - a)
    denom = gb - ga + 2.0 * d2
    if abs(denom) < 1e-18:
        return 0.5 * (a + b)
    t = b - (b - a) * (gb + d2 - d1) / denom
    lo, hi = min(a, b), max(a, b)
    if not (lo < t < hi):
        return 0.5 * (a + b)
    return t


def _zoom(phi, a_lo, a_hi, f_lo, g_lo, f_hi, g_hi, f0, g0, c1, c2, max_zoom=30):
    for _ in range(max_zoom):
        a = _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi)
        span = abs(a_hi - a_lo)
        if span < 1e-18:
            return a_lo, f_lo
        # keep the trial point strictly interior
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        a = min(max(a, lo + 0.05 * span), hi - 0.05 * span)
        fa, ga = phi(a)
        if fa > f0 + c1 * a * g0 or fa >= f_lo:
            a_hi, f_hi, g_hi = a, fa, ga
        else:
            if abs(ga) <= -c2 * g0:
                return a, fa
            if ga * (a_hi - a_lo) >= 0.0:
                a_hi, f_hi, g_hi = a_lo, f_lo, g_lo
            a_lo, f_lo, g_lo = a, fa, ga
    return a_lo, f_lo


def strong_wolfe_search(fun, x, f, g, direction, c1=1e-4, c2=0.1, max_expand=20):
    """Line search satisfying the strong Wolfe conditions.

    Returns (step, x_new, f_new, g_new) or None on failure.
    """
    g0 = float(g @ direction)
    if g0 >= 0.0:
        return None
    cache = {}

    def phi(a):
        if a not in cache:
            fa, ga_vec = fun(x + a * direction)
            cache[a] = (float(fa), ga_vec)
        fa, ga_vec = cache[a]
        return fa, float(ga_vec @ direction)

    a_prev, f_prev, g_prev = 0.0, f, g0
    a = 1.0
    for _ in range(max_expand):
        fa, ga = phi(a)
        if not np.isfinite(fa):
            a = 0.5 * (a_prev + a)
            continue
        if fa > f + c1 * a * g0 or (a_prev > 0.0 and fa >= f_prev):
            a, fa = _zoom(phi, a_prev, a, f_prev, g_prev, fa, ga, f, g0, c1, c2)
            break
        if abs(ga) <= -c2 * g0:
            break
        if ga >= 0.0:
            a, fa = _zoom(phi, a, a_prev, fa, ga, f_prev, g_prev, f, g0, c1, c2)
            break
        a_prev, f_prev, g_prev = a, fa, ga
        a *= 2.0
    else:
        return None
    fa, ga = phi(a)
    # Secant polish toward phi'(a) = 0; exact on quadratics, which gives the
    # conjugate-gradient-like finite termination of L-BFGS on quadratic
    # objectives.  Each candidate must keep both Wolfe conditions and improve.
    for _ in range(4):
        if abs(ga) <= 1e-12 * max(1.0, abs(g0)) or ga == g0:
            break
        a_new = a * g0 / (g0 - ga)
        if not np.isfinite(a_new) or a_new <= 0.0 or a_new == a:
            break
        f_new, g_new = phi(a_new)
        ok = (
            np.isfinite(f_new)
            and f_new <= fa
            and f_new <= f + c1 * a_new * g0
            and abs(g_new) <= -c2 * g0
        )
        if not ok:
            break
        a, fa, ga = a_new, f_new, g_new
    fa, ga_vec = cache[a] if a in cache else fun(x + a * direction)
    if not np.isfinite(fa) or fa > f:
        return None
    return a, x + a * direction, float(fa), ga_vec


def lbfgs_minimize(
    fun,
    x0: np.ndarray,
    history: int = 10,
    max_iter: int = 100,
    tol: float = 1e-10,
    callback=None,
) -> LbfgsResult:
    """Minimize fun(x) -> (value, gradient) starting from x0.

    Accepted objective values are non-increasing (strong-Wolfe steps only);
    the best iterate seen is returned.  Deterministic for fixed inputs.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise LbfgsError("non-finite objective at the starting point")
    if g.shape != x.shape:
        raise LbfgsError("gradient dimension does not match x")

    s_hist, y_hist, rho_hist = [], [], []
    best_x, best_f = x.copy(), f
    trace = [f]
    status = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) <= tol:
            status = "converged"
            break
        # two-loop recursion
        q = -g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = q

        result = strong_wolfe_search(fun, x, f, g, direction)
        if result is None:
            # steepest-descent restart before giving up
            s_hist, y_hist, rho_hist = [], [], []
            result = strong_wolfe_search(fun, x, f, g, -g)
            if result is None:
                status = "line_search_failed"
                break
        _, x_new, f_new, g_new = result
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-14 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)) and sy > 0.0:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, np.asarray(g_new, dtype=np.float64)
        trace.append(f)
        if f < best_f:
            best_f, best_x = f, x.copy()
        if callback is not None:
            callback(it, x, f)
    else:
        if np.linalg.norm(g) <= tol:
            status = "converged"

    return LbfgsResult(x=best_x, fx=best_f, iterations=it, status=status, trace=trace)
