import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from texface.simplex import (
    SimplexError,
    project_to_simplex,
    solve_affine_lsq,
    solve_nearest,
    solve_simplex_lsq,
)


finite_vectors = hnp.arrays(
    np.float64,
    st.integers(1, 12),
    elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=200, deadline=None)
@given(finite_vectors)
def test_projection_lands_on_simplex(v):
    w = project_to_simplex(v)
    assert np.all(w >= 0)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(finite_vectors)
def test_projection_idempotent(v):
    w = project_to_simplex(v)
    assert np.allclose(project_to_simplex(w), w, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(finite_vectors, finite_vectors.filter(lambda v: v.size > 0))
def test_projection_is_nearest_point(v, probe):
    # No feasible point may be closer to v than the projection.
    w = project_to_simplex(v)
    if probe.size != v.size:
        probe = np.resize(probe, v.size)
    q = project_to_simplex(probe)
    assert np.linalg.norm(w - v) <= np.linalg.norm(q - v) + 1e-9


def test_projection_fixed_point_for_feasible_input():
    w = np.array([0.2, 0.5, 0.3])
    assert np.allclose(project_to_simplex(w), w, atol=1e-12)


def test_projection_rejects_bad_input():
    with pytest.raises(SimplexError):
        project_to_simplex(np.array([]))
    with pytest.raises(SimplexError):
        project_to_simplex(np.array([1.0, np.inf]))


def _planted_problem(seed, k=5, layers=2, size=6, w_true=None):
    rng = np.random.default_rng(seed)
    basis = [[rng.standard_normal((size, size)) for _ in range(layers)] for _ in range(k)]
    if w_true is None:
        w_true = project_to_simplex(rng.uniform(size=k))
    target = [sum(w_true[j] * basis[j][l] for j in range(k)) for l in range(layers)]
    return target, basis, w_true


def test_planted_mixture_recovered():
    target, basis, w_true = _planted_problem(0, w_true=np.array([0.4, 0.3, 0.2, 0.1, 0.0]))
    w = solve_simplex_lsq(target, basis)
    assert np.max(np.abs(w - w_true)) < 1e-6


def test_k3_matches_grid_search_oracle():
    target, basis, _ = _planted_problem(7, k=3, w_true=np.array([0.55, 0.25, 0.2]))

    def objective(w):
        return sum(
            np.linalg.norm(sum(w[j] * basis[j][l] for j in range(3)) - target[l]) ** 2
            for l in range(2)
        )

    best_w, best_f = None, np.inf
    steps = np.arange(0.0, 1.0 + 1e-12, 1e-3)
    for a in steps:
        for b in np.arange(0.0, 1.0 - a + 1e-12, 1e-3):
            f = objective(np.array([a, b, 1.0 - a - b]))
            if f < best_f:
                best_w, best_f = np.array([a, b, 1.0 - a - b]), f
    w = solve_simplex_lsq(target, basis)
    assert np.max(np.abs(w - best_w)) < 2e-3
    assert objective(w) <= best_f + 1e-12


def test_solution_beats_vertices_and_uniform():
    target, basis, _ = _planted_problem(3, k=6)

    def objective(w):
        return sum(
            np.linalg.norm(sum(w[j] * basis[j][l] for j in range(6)) - target[l]) ** 2
            for l in range(2)
        )

    w = solve_simplex_lsq(target, basis)
    f = objective(w)
    assert f <= objective(np.full(6, 1 / 6)) + 1e-12
    for vertex in np.eye(6):
        assert f <= objective(vertex) + 1e-12


def test_single_basis_short_circuit():
    target, basis, _ = _planted_problem(1, k=1)
    assert np.array_equal(solve_simplex_lsq(target, basis), [1.0])


def test_unsquared_mode_runs_and_stays_feasible():
    target, basis, _ = _planted_problem(9, k=4)
    w = solve_simplex_lsq(target, basis, squared=False)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0, abs=1e-9)


def test_mismatched_stacks_rejected():
    target, basis, _ = _planted_problem(1)
    bad = [s[:1] for s in basis]
    with pytest.raises(SimplexError):
        solve_simplex_lsq(target, bad)


def test_affine_solver_sums_to_one_and_can_go_negative():
    rng = np.random.default_rng(4)
    basis = [[rng.standard_normal((5, 5))] for _ in range(3)]
    # target outside the convex hull in the first basis direction
    target = [1.8 * basis[0][0] - 0.8 * basis[1][0]]
    w = solve_affine_lsq(target, basis)
    assert w.sum() == pytest.approx(1.0, abs=1e-8)
    assert w.min() < 0
    assert np.allclose(w, [1.8, -0.8, 0.0], atol=1e-6)


def test_nearest_picks_the_closest_stack():
    target, basis, _ = _planted_problem(5, k=4, w_true=np.array([0.0, 0.05, 0.95, 0.0]))
    w = solve_nearest(target, basis)
    assert np.array_equal(np.sort(w), [0, 0, 0, 1])
    assert w[2] == 1.0
