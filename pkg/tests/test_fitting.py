import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from texface.fitting import (
    PYRAMID_SCHEDULE,
    W_LANDMARK,
    W_REG,
    _downscale_for_level,
    bake_lowfreq_texture,
    color_residuals,
    extract_partial_albedo,
    fill_partial_texture,
    joint_residuals,
    landmark_residuals,
    pack_params,
    rasterize_uv,
    reg_residuals,
    total_energy,
    unpack_params,
)
from texface.image import ImageBuffer
from texface.morphable import evaluate_pca
from texface.render import project_points, quat_to_matrix, render_synth

from conftest import make_scene


def small_scene(toy_model):
    return make_scene(toy_model, size=96, seed=5)


def fd_jacobian(fun, x, eps=1e-6):
    r0 = fun(x)
    j = np.zeros((r0.size, x.size))
    for k in range(x.size):
        xp = x.copy()
        xp[k] += eps
        xm = x.copy()
        xm[k] -= eps
        j[:, k] = (fun(xp) - fun(xm)) / (2 * eps)
    return j


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_pack_unpack_round_trip(scene):
    truth = scene["truth"]
    x = pack_params(truth)
    back = unpack_params(x, truth)
    assert np.allclose(pack_params(back), x, atol=1e-12)
    assert np.allclose(back.quat, truth.quat)


def test_unpack_renormalizes_quaternion(scene):
    x = pack_params(scene["truth"])
    x[:4] *= 3.0
    back = unpack_params(x, scene["truth"])
    assert np.linalg.norm(back.quat) == pytest.approx(1.0, abs=1e-12)


def test_landmark_jacobian_matches_fd(toy_model, scene):
    truth = scene["truth"]
    x = pack_params(truth)
    scale = np.sqrt(W_LANDMARK / len(scene["landmarks"]))
    r, j = landmark_residuals(x, truth, toy_model, scene["landmarks"], scale)
    jf = fd_jacobian(lambda v: landmark_residuals(v, truth, toy_model, scene["landmarks"], scale)[0], x)
    assert rel_err(j, jf) < 1e-3


def test_reg_jacobian_matches_fd(toy_model, scene):
    truth = scene["truth"]
    x = pack_params(truth)
    r, j = reg_residuals(x, truth, toy_model, np.sqrt(W_REG))
    jf = fd_jacobian(lambda v: reg_residuals(v, truth, toy_model, np.sqrt(W_REG))[0], x)
    assert rel_err(j, jf) < 1e-8


def test_color_jacobian_matches_fd(toy_model):
    # Jacobians are taken with the pixel-to-triangle correspondence frozen,
    # so the finite-difference reference uses the same fixed visibility.
    sc = small_scene(toy_model)
    truth = sc["truth"]
    mask = binary_erosion(sc["mask"], iterations=3)
    x = pack_params(truth)
    vis = sc["vis"]
    r, j = color_residuals(x, truth, toy_model, sc["image"], mask, vis=vis)
    jf = fd_jacobian(
        lambda v: color_residuals(v, truth, toy_model, sc["image"], mask, vis=vis)[0], x
    )
    assert rel_err(j, jf) < 1e-3


def test_joint_residual_grouping(toy_model):
    sc = small_scene(toy_model)
    truth = sc["truth"]
    x = pack_params(truth)
    r, j, groups = joint_residuals(x, truth, toy_model, sc["image"], sc["landmarks"], sc["mask"])
    assert j.shape == (r.size, x.size)
    # color residuals come in robust RGB triples; the rest are plain
    n_color_groups = int(groups.robust.sum())
    assert np.all(np.bincount(groups.ids[: 3 * n_color_groups]) == 3)
    assert not groups.robust[-1]


def test_joint_energy_matches_total_energy(toy_model):
    # robust group energy of the residual vector equals the E_c + E_lan + E_reg blocks
    sc = small_scene(toy_model)
    truth = sc["truth"]
    x = pack_params(truth)
    from texface.gauss_newton import irls_energy

    from texface.fitting import W_COLOR

    r, _, groups = joint_residuals(x, truth, toy_model, sc["image"], sc["landmarks"], sc["mask"])
    e, blocks = total_energy(truth, toy_model, sc["image"], sc["landmarks"], sc["mask"])
    assert irls_energy(r, groups) == pytest.approx(e, rel=1e-10)
    weighted = W_COLOR * blocks["color"] + W_LANDMARK * blocks["landmark"] + W_REG * blocks["reg"]
    assert e == pytest.approx(weighted, rel=1e-12)


def test_downscale_projection_consistency(scene):
    truth = scene["truth"]
    factor = 4
    _, _, _, tpl = _downscale_for_level(scene["image"], scene["landmarks"], scene["mask"], truth, factor)
    pts = np.array([[0.1, -0.05, 2.4], [0.0, 0.2, 2.8]])
    full, _ = project_points(truth.focal, truth.principal, np.eye(3), np.zeros(3), pts)
    small, _ = project_points(tpl.focal, tpl.principal, np.eye(3), np.zeros(3), pts)
    shift = (factor - 1) / 2.0
    assert np.allclose(small, (full - shift) / factor, atol=1e-10)


def test_fit_round_trip_image_rmse(toy_model, scene, fit_report):
    refit, vis = render_synth(toy_model, fit_report.params, scene["image"].width, scene["image"].height)
    both = scene["vis"].coverage & vis.coverage
    rmse = np.sqrt(np.mean((refit.pixels[both] - scene["image"].pixels[both]) ** 2))
    assert rmse < 2.0 / 255.0


def test_fit_round_trip_landmark_rmse(toy_model, scene, fit_report):
    p = fit_report.params
    idx = scene["landmarks"].vertex_indices
    verts, _ = evaluate_pca(toy_model, p.alpha_id, p.alpha_exp, p.alpha_albedo)
    cam = verts @ quat_to_matrix(p.quat).T + p.translation
    pts, _ = project_points(p.focal, p.principal, np.eye(3), np.zeros(3), cam[idx])
    rmse = np.sqrt(np.mean(np.sum((pts - scene["landmarks"].points) ** 2, axis=1)))
    assert rmse < 1.0


def test_fit_uses_pyramid_schedule(fit_report):
    assert tuple(fit_report.schedule) == tuple(steps for _, steps in PYRAMID_SCHEDULE)
    assert len(fit_report.energies) == len(PYRAMID_SCHEDULE)


def test_shading_factorization(toy_model, scene):
    """Albedo recovered from a noise-free render matches the PCA albedo."""
    truth = scene["truth"]
    partial = extract_partial_albedo(scene["image"], truth, scene["mask"], toy_model, 128)
    assert partial.validity.any()
    _, albedo = evaluate_pca(toy_model, truth.alpha_id, truth.alpha_exp, truth.alpha_albedo)
    uv_vis = rasterize_uv(toy_model, 128)
    expect = np.zeros((128, 128, 3))
    cov = uv_vis.coverage
    tri = toy_model.triangles[uv_vis.tri[cov]]
    expect[cov] = np.einsum("pk,pkc->pc", uv_vis.bary[cov], albedo[tri])
    err = np.abs(partial.image.pixels - expect)[partial.validity]
    assert err.max() < 1e-3


def test_invalid_texels_hold_sentinel(toy_model, scene):
    truth = scene["truth"]
    partial = extract_partial_albedo(scene["image"], truth, scene["mask"], toy_model, 64)
    invalid = ~partial.validity
    assert invalid.any()
    assert np.all(partial.image.pixels[invalid] == 0.5)


def test_fill_partial_texture(toy_model, scene):
    truth = scene["truth"]
    partial = extract_partial_albedo(scene["image"], truth, scene["mask"], toy_model, 64)
    fill = bake_lowfreq_texture(toy_model, truth.alpha_albedo, 64)
    merged = fill_partial_texture(partial, fill)
    assert np.array_equal(merged.pixels[partial.validity], partial.image.pixels[partial.validity])
    assert np.array_equal(merged.pixels[~partial.validity], fill.pixels[~partial.validity])


def test_bake_lowfreq_has_no_holes(toy_model, scene):
    tex = bake_lowfreq_texture(toy_model, scene["truth"].alpha_albedo, 64)
    assert np.all(np.isfinite(tex.pixels))
    # nearest-fill means no texel should remain at exactly zero everywhere
    assert tex.pixels.std() > 0
