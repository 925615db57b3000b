"""Probability-simplex projection and simplex-constrained least squares."""

from __future__ import annotations

import numpy as np


class SimplexError(ValueError):
    pass


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of v onto {w : w >= 0, sum w = 1}.

    Sorting-based exact algorithm (Held et al. / Duchi et al.).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise SimplexError("expected a nonempty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise SimplexError("non-finite input")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    j = np.arange(1, v.size + 1)
    cond = u - css / j > 0
    rho = np.nonzero(cond)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _stack_columns(stacks) -> np.ndarray:
    """Flatten a list of per-layer Gram stacks into column vectors."""
    return np.stack([np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in s]) for s in stacks], axis=1)


def _layer_scales(target_stack, normalize: bool) -> np.ndarray:
    scales = []
    for g in target_stack:
        g = np.asarray(g)
        s = 1.0 / g.shape[0] ** 2 if normalize else 1.0
        scales.append(np.full(g.size, s))
    return np.concatenate(scales)


def simplex_lsq_objective(w, basis_cols, target_col, layer_sizes, scales, squared=True):
    r = basis_cols @ w - target_col
    total = 0.0
    grad = np.zeros_like(w)
    start = 0
    for size in layer_sizes:
        sl = slice(start, start + size)
        rl = r[sl]
        s = scales[start]
        sq = float(rl @ rl)
        if squared:
            total += s * sq
            grad += 2.0 * s * (basis_cols[sl].T @ rl)
        else:
            nrm = np.sqrt(sq)
            total += s * nrm
            if nrm > 1e-14:
                grad += (s / nrm) * (basis_cols[sl].T @ rl)
        start += size
    return total, grad


def solve_simplex_lsq(
    target_stack,
    basis_stacks,
    squared: bool = True,
    normalize_layers: bool = False,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> np.ndarray:
    """Minimize sum_l || sum_k w_k B_k^l - T^l ||_F^2 over the simplex.

    Projected gradient with Barzilai-Borwein step sizes; terminates when the
    weight change drops below tol or after max_iter iterations.  With
    squared=False the per-layer Frobenius norms enter unsquared.
    """
    k = len(basis_stacks)
    if k < 1:
        raise SimplexError("need at least one basis stack")
    nlayers = len(target_stack)
    for s in basis_stacks:
        if len(s) != nlayers or any(
            np.asarray(a).shape != np.asarray(b).shape for a, b in zip(s, target_stack)
        ):
            raise SimplexError("stack dimensions do not match the target")
    target_col = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in target_stack])
    basis_cols = _stack_columns(basis_stacks)
    layer_sizes = [np.asarray(g).size for g in target_stack]
    scales = _layer_scales(target_stack, normalize_layers)

    if k == 1:
        return np.array([1.0])

    def descend(w0):
        """BB-step projected gradient from w0; returns the best iterate seen."""
        w = w0
        f, g = simplex_lsq_objective(w, basis_cols, target_col, layer_sizes, scales, squared)
        best_w, best_f = w, f
        step = 1.0 / max(np.linalg.norm(g), 1e-12)
        for _ in range(max_iter):
            w_new = project_to_simplex(w - step * g)
            if np.linalg.norm(w_new - w) < tol:
                w = w_new
                break
            f_new, g_new = simplex_lsq_objective(w_new, basis_cols, target_col, layer_sizes, scales, squared)
            s_vec = w_new - w
            y_vec = g_new - g
            sy = float(s_vec @ y_vec)
            if sy > 1e-16:
                step = float(s_vec @ s_vec) / sy
            else:
                step = 1.0 / max(np.linalg.norm(g_new), 1e-12)
            w, f, g = w_new, f_new, g_new
            if f < best_f:
                best_w, best_f = w, f
        f, _ = simplex_lsq_objective(w, basis_cols, target_col, layer_sizes, scales, squared)
        if f < best_f:
            best_w, best_f = w, f
        return best_w, best_f

    # The equality-constrained solution projected onto the simplex is a much
    # better start than uniform weights when the basis is ill conditioned.
    try:
        warm = project_to_simplex(solve_affine_lsq(target_stack, basis_stacks, normalize_layers))
    except np.linalg.LinAlgError:
        warm = np.full(k, 1.0 / k)
    best_w, best_f = descend(warm)

    # Guarantee the result is no worse than the uniform blend or any vertex.
    candidates = [np.full(k, 1.0 / k)]
    candidates.extend(np.eye(k))
    for cand in candidates:
        f_c, _ = simplex_lsq_objective(cand, basis_cols, target_col, layer_sizes, scales, squared)
        if f_c < best_f:
            best_w, best_f = descend(cand)
            if f_c < best_f:
                best_w, best_f = cand, f_c
    return best_w


def solve_affine_lsq(target_stack, basis_stacks, normalize_layers: bool = False) -> np.ndarray:
    """Least squares with only the sum-to-one constraint (weights may go negative).

    Comparison mode for the convex-vs-unconstrained blending ablation.
    """
    k = len(basis_stacks)
    if k < 1:
        raise SimplexError("need at least one basis stack")
    target_col = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in target_stack])
    basis_cols = _stack_columns(basis_stacks)
    scales = np.sqrt(_layer_scales(target_stack, normalize_layers))
    a = basis_cols * scales[:, None]
    b = target_col * scales
    # KKT system for min ||Aw - b||^2 s.t. 1'w = 1.
    ata = a.T @ a
    ones = np.ones(k)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = ata + 1e-12 * np.eye(k)
    kkt[:k, k] = ones
    kkt[k, :k] = ones
    rhs = np.concatenate([a.T @ b, [1.0]])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:k]


def solve_nearest(target_stack, basis_stacks) -> np.ndarray:
    """One-hot weights selecting the closest basis stack in Frobenius distance."""
    k = len(basis_stacks)
    target_col = np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in target_stack])
    basis_cols = _stack_columns(basis_stacks)
    dists = np.linalg.norm(basis_cols - target_col[:, None], axis=0)
    w = np.zeros(k)
    w[int(np.argmin(dists))] = 1.0
    return w
