"""Gauss-Newton steps with iteratively reweighted least squares.

Residuals may be partitioned into groups; robust groups contribute the
unsquared norm ||r_g|| to the energy and receive the IRLS weight
1/max(||r_g||, eps) in the normal equations, which majorizes that energy.
Plain groups contribute ||r_g||^2 with unit weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IRLS_EPS = 1e-6
LM_LAMBDA0 = 1e-6
LM_MAX_ESCALATIONS = 12


class GaussNewtonError(RuntimeError):
    pass


@dataclass(frozen=True)
class ResidualGroups:
    """Static grouping of a residual vector.

    ids: per-residual group index (contiguous groups not required).
    robust: per-group flag; True groups get the 1/||r|| IRLS weight.
    """

    ids: np.ndarray
    robust: np.ndarray

    @staticmethod
    def all_robust(n_residuals: int, group_size: int = 1) -> "ResidualGroups":
        ids = np.arange(n_residuals) // group_size
        return ResidualGroups(ids=ids, robust=np.ones(ids.max() + 1, dtype=bool))


def _group_norms(r, groups: ResidualGroups):
    sq = np.zeros(groups.robust.size)
    np.add.at(sq, groups.ids, r * r)
    return np.sqrt(sq)


def irls_energy(r, groups: ResidualGroups | None) -> float:
    if groups is None:
        return float(r @ r)
    norms = _group_norms(r, groups)
    return float(np.sum(np.where(groups.robust, norms, norms**2)))


def irls_weights(r, groups: ResidualGroups | None) -> np.ndarray:
    """Per-residual weights for the weighted normal equations."""
    if groups is None:
        return np.ones_like(r)
    norms = _group_norms(r, groups)
    w_group = np.where(groups.robust, 1.0 / np.maximum(norms, IRLS_EPS), 1.0)
    return w_group[groups.ids]


def solve_damped_normal_equations(j, r, weights, lam) -> np.ndarray:
    jw = j * weights[:, None]
    h = j.T @ jw
    g = jw.T @ r
    n = h.shape[0]
    try:
        return np.linalg.solve(h + lam * np.eye(n), -g)
    except np.linalg.LinAlgError as exc:
        raise GaussNewtonError("singular damped normal matrix") from exc


def gauss_newton_irls(
    fun,
    x0: np.ndarray,
    steps: int = 20,
    groups: ResidualGroups | None = None,
    retract=None,
):
    """Run `steps` damped Gauss-Newton/IRLS steps on fun(x) -> (r, J).

    Each step solves the IRLS-weighted normal equations with Levenberg
    damping (lambda starts at 1e-6, x10 on a rejected step); a step is
    accepted when the robust energy does not increase.  `retract`
    optionally maps a raw parameter vector back onto its manifold
    (e.g. quaternion renormalization) after each update.
    """
    x = np.array(x0, dtype=np.float64)
    if retract is not None:
        x = retract(x)
    r, j = fun(x)
    r = np.asarray(r, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    if j.shape != (r.size, x.size):
        raise GaussNewtonError(f"Jacobian shape {j.shape} inconsistent with residual {r.size} and x {x.size}")
    energy = irls_energy(r, groups)
    history = [energy]
    for _ in range(steps):
        weights = irls_weights(r, groups)
        lam = LM_LAMBDA0
        accepted = False
        for _ in range(LM_MAX_ESCALATIONS):
            delta = solve_damped_normal_equations(j, r, weights, lam)
            x_try = x + delta
            if retract is not None:
                x_try = retract(x_try)
            r_try, j_try = fun(x_try)
            r_try = np.asarray(r_try, dtype=np.float64)
            e_try = irls_energy(r_try, groups)
            if np.isfinite(e_try) and e_try <= energy:
                x, r, j, energy = x_try, r_try, np.asarray(j_try, dtype=np.float64), e_try
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break  # stationary under max damping; keep the best iterate
        history.append(energy)
    return x, history
