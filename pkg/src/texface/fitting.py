"""Analysis-by-synthesis fitting and shading-free albedo extraction.

The fitting energy is E = w_c E_c + w_lan E_lan + w_reg E_reg with
w_c = 1, w_lan = 10, w_reg = 2.5e-5.  E_c averages unsquared per-pixel RGB
l2 distances over the segmentation-valid rendered area (handled by IRLS),
E_lan averages squared landmark distances, E_reg sums (alpha/sigma)^2.

Gauss-Newton runs over a three-level image pyramid (x4, x2, x1) with
30/10/3 steps.  Each step freezes the rasterized pixel/surface
correspondence and differentiates the residuals analytically through
albedo, lighting and the flat face normals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .gauss_newton import ResidualGroups, gauss_newton_irls, irls_energy
from .image import ImageBuffer, downscale_block
from .morphable import Landmarks, ModelError, MorphableModel, SceneParams, evaluate_pca
from .render import (
    face_normals,
    front_facing,
    project_points,
    quat_to_matrix,
    rasterize,
    render_synth,
    rotate_quat_jacobian,
    sh_basis,
    sh_basis_jacobian,
)

W_COLOR = 1.0
W_LANDMARK = 10.0
W_REG = 2.5e-5
PYRAMID_SCHEDULE = ((4, 30), (2, 10), (1, 3))
SHADING_FLOOR = 1e-3
INVALID_TEXEL = 0.5


class FittingError(RuntimeError):
    pass


@dataclass
class PartialTexture:
    """UV-space albedo with a per-texel validity mask; invalid texels hold 0.5."""

    image: ImageBuffer
    validity: np.ndarray

    def __post_init__(self):
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.validity.shape != (self.image.height, self.image.width):
            raise FittingError("validity mask does not match the texture size")


@dataclass
class FitReport:
    params: SceneParams
    schedule: tuple
    energies: list = field(default_factory=list)  # accepted energy per level


# ---------------------------------------------------------------------------
# parameter packing


def pack_params(params: SceneParams) -> np.ndarray:
    return np.concatenate(
        [
            params.quat,
            params.translation,
            [params.focal],
            params.light.ravel(),
            params.alpha_id,
            params.alpha_exp,
            params.alpha_albedo,
        ]
    )


def unpack_params(x: np.ndarray, template: SceneParams) -> SceneParams:
    d_id = template.alpha_id.size
    d_exp = template.alpha_exp.size
    d_al = template.alpha_albedo.size
    off = 0

    def take(k):
        nonlocal off
        out = x[off : off + k]
        off += k
        return out

    quat = take(4)
    quat = quat / np.linalg.norm(quat)
    t = take(3)
    focal = float(take(1)[0])
    light = take(27).reshape(3, 9)
    a_id = take(d_id)
    a_exp = take(d_exp)
    a_al = take(d_al)
    return SceneParams(
        alpha_id=a_id,
        alpha_exp=a_exp,
        alpha_albedo=a_al,
        quat=quat,
        translation=t,
        focal=max(focal, 1e-6),
        principal=template.principal.copy(),
        light=light,
    )


def _retract(x):
    x = x.copy()
    x[:4] = x[:4] / np.linalg.norm(x[:4])
    return x


# ---------------------------------------------------------------------------
# energy


def total_energy(params: SceneParams, model: MorphableModel, image: ImageBuffer, landmarks: Landmarks, mask: np.ndarray):
    """(E, blocks) for the three-term fitting energy at the given parameters."""
    if mask.shape != (image.height, image.width):
        raise FittingError("mask size does not match the image")
    synth, vis = render_synth(model, params, image.width, image.height)
    cov = vis.coverage & mask
    if not cov.any():
        raise FittingError("empty intersection of mask and rendered coverage")
    diff = image.pixels[cov] - synth.pixels[cov]
    e_color = float(np.mean(np.linalg.norm(diff, axis=1)))

    rot = quat_to_matrix(params.quat)
    verts, _ = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    proj, _ = project_points(params.focal, params.principal, rot, params.translation, verts[landmarks.vertex_indices])
    e_lan = float(np.mean(np.sum((landmarks.points - proj) ** 2, axis=1))) if len(landmarks) else 0.0

    e_reg = float(
        np.sum((params.alpha_id / model.sigma_id) ** 2)
        + np.sum((params.alpha_exp / model.sigma_exp) ** 2)
        + np.sum((params.alpha_albedo / model.sigma_albedo) ** 2)
    )
    blocks = {"color": e_color, "landmark": e_lan, "reg": e_reg}
    return W_COLOR * e_color + W_LANDMARK * e_lan + W_REG * e_reg, blocks


# ---------------------------------------------------------------------------
# frozen-correspondence residuals with analytic Jacobians


def _param_layout(template: SceneParams):
    d_id = template.alpha_id.size
    d_exp = template.alpha_exp.size
    d_al = template.alpha_albedo.size
    n = 4 + 3 + 1 + 27 + d_id + d_exp + d_al
    sl = {}
    off = 0
    for name, k in (("quat", 4), ("t", 3), ("f", 1), ("light", 27), ("a_id", d_id), ("a_exp", d_exp), ("a_al", d_al)):
        sl[name] = slice(off, off + k)
        off += k
    return n, sl


def landmark_residuals(x, template, model, landmarks, scale):
    """Scaled landmark residuals and Jacobian w.r.t. the packed parameters."""
    params = unpack_params(x, template)
    n_par, sl = _param_layout(template)
    rot = quat_to_matrix(params.quat)
    idx = landmarks.vertex_indices
    verts, _ = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    v = verts[idx]
    p = v @ rot.T + params.translation
    z = np.maximum(p[:, 2], 1e-6)
    f = params.focal
    proj = np.stack([f * p[:, 0] / z + params.principal[0], f * p[:, 1] / z + params.principal[1]], axis=1)
    r = (landmarks.points - proj).ravel() * scale

    m = idx.size
    dproj_dp = np.zeros((m, 2, 3))
    dproj_dp[:, 0, 0] = f / z
    dproj_dp[:, 0, 2] = -f * p[:, 0] / z**2
    dproj_dp[:, 1, 1] = f / z
    dproj_dp[:, 1, 2] = -f * p[:, 1] / z**2

    j = np.zeros((m, 2, n_par))
    j[:, :, sl["quat"]] = np.einsum("mij,mjk->mik", dproj_dp, rotate_quat_jacobian(params.quat, v))
    j[:, :, sl["t"]] = dproj_dp
    j[:, 0, sl["f"]] = (p[:, 0] / z)[:, None]
    j[:, 1, sl["f"]] = (p[:, 1] / z)[:, None]
    rows = np.stack([3 * idx, 3 * idx + 1, 3 * idx + 2], axis=1)  # (m, 3)
    for name, basis in (("a_id", model.basis_id), ("a_exp", model.basis_exp)):
        dv = basis[rows]  # (m, 3, d)
        j[:, :, sl[name]] = np.einsum("mij,mjd->mid", dproj_dp @ rot, dv)
    return r, -j.reshape(2 * m, n_par) * scale


def reg_residuals(x, template, model, scale):
    n_par, sl = _param_layout(template)
    sigmas = np.concatenate([model.sigma_id, model.sigma_exp, model.sigma_albedo])
    vals = np.concatenate([x[sl["a_id"]], x[sl["a_exp"]], x[sl["a_al"]]])
    r = vals / sigmas * scale
    j = np.zeros((vals.size, n_par))
    start = sl["a_id"].start
    j[np.arange(vals.size), start + np.arange(vals.size)] = scale / sigmas
    return r, j


def color_residuals(x, template, model, image, mask, vis=None):
    """Frozen-correspondence photo-consistency residuals.

    Rasterizes at x (or uses the supplied visibility buffer), freezes the
    per-pixel triangle/barycentrics, and differentiates
    C_in - albedo * shading analytically through the albedo coefficients,
    the SH light, and the flat normals (shape + rotation).  The residual is
    scaled by w_c/|M| so robust group norms sum to E_c.
    """
    params = unpack_params(x, template)
    n_par, sl = _param_layout(template)
    if vis is None:
        _, vis = render_synth(model, params, image.width, image.height)
    cov = vis.coverage & mask
    if not cov.any():
        raise FittingError("empty intersection of mask and rendered coverage")
    m = int(cov.sum())
    scale = W_COLOR / m

    tids = vis.tri[cov]
    bary = vis.bary[cov]
    tri_v = model.triangles[tids]

    verts, albedo = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    rot = quat_to_matrix(params.quat)
    verts_cam = verts @ rot.T + params.translation

    pix_albedo = np.einsum("pk,pkc->pc", bary, albedo[tri_v])  # (m, 3)
    used = np.unique(tids)
    normals_all = face_normals(verts_cam, model.triangles)
    basis_all = sh_basis(normals_all[used])  # (u, 9)
    local = {t: i for i, t in enumerate(used)}
    loc = np.array([local[t] for t in tids])
    shade = basis_all[loc] @ params.light.T  # (m, 3)

    r = (image.pixels[cov] - pix_albedo * shade) * scale  # (m, 3)

    j = np.zeros((m, 3, n_par))
    # albedo coefficients: d albedo_c/d a_al = sum_k bary_k A_al[3 v_k + c]
    rows = np.stack([3 * tri_v, 3 * tri_v + 1, 3 * tri_v + 2], axis=2)  # (m, 3verts, 3ch)
    dalbedo = np.einsum("pk,pkcd->pcd", bary, model.basis_albedo[rows])  # (m, 3, d_al)
    j[:, :, sl["a_al"]] = -dalbedo * shade[:, :, None]
    # light: d shade_c / d L[c, b] = Y_b(n)
    base = sl["light"].start
    for c in range(3):
        j[:, c, base + 9 * c : base + 9 * (c + 1)] = -pix_albedo[:, c : c + 1] * basis_all[loc]
    # geometry through the flat normal n = R m/|m| with m the model-space cross product
    tri_used = model.triangles[used]
    p0 = verts[tri_used[:, 0]]
    e1 = verts[tri_used[:, 1]] - p0
    e2 = verts[tri_used[:, 2]] - p0
    m_vec = np.cross(e1, e2)
    m_norm = np.linalg.norm(m_vec, axis=1, keepdims=True)
    m_hat = m_vec / np.maximum(m_norm, 1e-14)
    proj_perp = np.eye(3)[None] - m_hat[:, :, None] * m_hat[:, None, :]  # (u, 3, 3)
    dbasis = sh_basis_jacobian(normals_all[used])  # (u, 9, 3)
    dshade_dn = np.einsum("cb,ubk->uck", params.light, dbasis)  # (u, 3ch, 3)

    # rotation: n = R m_hat, so dn/dq = d(R m_hat)/dq
    dn_dq = rotate_quat_jacobian(params.quat, m_hat)  # (u, 3, 4)
    dshade_dq = np.einsum("uck,ukq->ucq", dshade_dn, dn_dq)
    j[:, :, sl["quat"]] = -pix_albedo[:, :, None] * dshade_dq[loc]

    # shape: dm/d e1 = -[e2]x, dm/d e2 = [e1]x ; dn/dm = R (I - m_hat m_hat^T)/|m|
    dn_dm = np.einsum("ij,ujk->uik", rot, proj_perp) / np.maximum(m_norm, 1e-14)[:, :, None]
    dshade_dm = np.einsum("uck,ukl->ucl", dshade_dn, dn_dm)  # (u, 3ch, 3)
    rows_used = np.stack([3 * tri_used, 3 * tri_used + 1, 3 * tri_used + 2], axis=2)  # (u, 3verts, 3xyz)
    for name, basis in (("a_id", model.basis_id), ("a_exp", model.basis_exp)):
        dv = basis[rows_used]  # (u, 3verts, 3xyz, d)
        de1 = dv[:, 1] - dv[:, 0]  # (u, 3, d)
        de2 = dv[:, 2] - dv[:, 0]
        dm = np.cross(de1, e2[:, :, None], axisa=1, axisb=1, axisc=1) + np.cross(e1[:, :, None], de2, axisa=1, axisb=1, axisc=1)
        dshade = np.einsum("ucl,uld->ucd", dshade_dm, dm)
        j[:, :, sl[name]] = -pix_albedo[:, :, None] * dshade[loc]

    return r.ravel(), j.reshape(3 * m, n_par) * scale


def joint_residuals(x, template, model, image, landmarks, mask):
    r_c, j_c = color_residuals(x, template, model, image, mask)
    lan_scale = np.sqrt(W_LANDMARK / max(len(landmarks), 1))
    r_l, j_l = landmark_residuals(x, template, model, landmarks, lan_scale)
    r_r, j_r = reg_residuals(x, template, model, np.sqrt(W_REG))
    r = np.concatenate([r_c, r_l, r_r])
    j = np.vstack([j_c, j_l, j_r])
    n_color_groups = r_c.size // 3
    ids = np.concatenate(
        [
            np.arange(r_c.size) // 3,
            n_color_groups + np.arange(r_l.size + r_r.size),
        ]
    )
    robust = np.zeros(n_color_groups + r_l.size + r_r.size, dtype=bool)
    robust[:n_color_groups] = True
    return r, j, ResidualGroups(ids=ids, robust=robust)


# ---------------------------------------------------------------------------
# pyramid helpers


def _downscale_for_level(image, landmarks, mask, template, factor):
    if factor == 1:
        return image, landmarks, mask, template
    img = downscale_block(image, factor)
    mask_small = mask.reshape(mask.shape[0] // factor, factor, mask.shape[1] // factor, factor).sum(axis=(1, 3)) > (factor * factor) // 2
    shift = (factor - 1) / 2.0
    lms = Landmarks(vertex_indices=landmarks.vertex_indices, points=(landmarks.points - shift) / factor)
    tpl = template.copy()
    tpl.focal = template.focal / factor
    tpl.principal = (template.principal - shift) / factor
    return img, lms, mask_small, tpl


def fit_model(
    image: ImageBuffer,
    landmarks: Landmarks,
    mask: np.ndarray,
    model: MorphableModel,
    init: SceneParams,
    schedule=PYRAMID_SCHEDULE,
    pose_init_steps: int = 15,
    fixed_light: bool = False,
) -> FitReport:
    """Coarse-to-fine Gauss-Newton/IRLS fit of all scene parameters.

    A landmark-only solve first initializes pose and focal length, then each
    pyramid level jointly refines every parameter block.  Deterministic.
    """
    if len(landmarks) == 0:
        raise FittingError("landmarks required")
    if mask.shape != (image.height, image.width):
        raise FittingError("mask size does not match the image")
    template = init.copy()
    x = pack_params(template)

    # stage 1: landmark-only pose/focal initialization (shape held fixed)
    n_par, sl = _param_layout(template)
    lan_scale = np.sqrt(W_LANDMARK / len(landmarks))
    pose_cols = np.zeros(n_par, dtype=bool)
    pose_cols[sl["quat"]] = True
    pose_cols[sl["t"]] = True
    pose_cols[sl["f"]] = True

    def pose_fun(x_full):
        r, j = landmark_residuals(x_full, template, model, landmarks, lan_scale)
        j = j.copy()
        j[:, ~pose_cols] = 0.0
        return r, j

    x, _ = gauss_newton_irls(pose_fun, x, steps=pose_init_steps, groups=None, retract=_retract)

    fixed_cols = None
    if fixed_light:
        fixed_cols = np.zeros(n_par, dtype=bool)
        fixed_cols[sl["light"]] = True

    energies = []
    for factor, steps in schedule:
        img_l, lms_l, mask_l, tpl_l = _downscale_for_level(image, landmarks, mask, template, factor)
        x_l = x.copy()
        x_l[sl["f"]] = x[sl["f"]] / factor

        x_l, hist = _run_level(x_l, steps, tpl_l, model, img_l, lms_l, mask_l, fixed_cols=fixed_cols)
        energies.append(hist)
        x = x_l.copy()
        x[sl["f"]] = x_l[sl["f"]] * factor

    return FitReport(params=unpack_params(x, template), schedule=tuple(s for _, s in schedule), energies=energies)


def _run_level(x0, steps, template, model, image, landmarks, mask, fixed_cols=None):
    """GN/IRLS steps at one pyramid level; rebuilds groups per call since
    rendered coverage (and with it the residual length) changes with x.

    Columns flagged in fixed_cols are held at their current values."""
    x = _retract(x0)
    r, j, groups = joint_residuals(x, template, model, image, landmarks, mask)
    energy = irls_energy(r, groups)
    history = [energy]
    from .gauss_newton import LM_LAMBDA0, LM_MAX_ESCALATIONS, irls_weights, solve_damped_normal_equations

    for _ in range(steps):
        weights = irls_weights(r, groups)
        j_eff = j
        if fixed_cols is not None:
            j_eff = j.copy()
            j_eff[:, fixed_cols] = 0.0
        lam = LM_LAMBDA0
        accepted = False
        for _ in range(LM_MAX_ESCALATIONS):
            delta = solve_damped_normal_equations(j_eff, r, weights, lam)
            if fixed_cols is not None:
                delta[fixed_cols] = 0.0
            x_try = _retract(x + delta)
            try:
                r_try, j_try, groups_try = joint_residuals(x_try, template, model, image, landmarks, mask)
            except FittingError:
                lam *= 10.0
                continue
            e_try = irls_energy(r_try, groups_try)
            if np.isfinite(e_try) and e_try <= energy:
                x, r, j, groups, energy = x_try, r_try, j_try, groups_try, e_try
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
        history.append(energy)
    return x, history


# ---------------------------------------------------------------------------
# UV-space rasterization, albedo extraction, low-frequency baking


def rasterize_uv(model: MorphableModel, size: int):
    """Per-texel (triangle, barycentric) over the UV layout.

    Texel (row y, col x) samples UV ((x + .5)/size, (y + .5)/size).
    """
    pts = model.uv * size - 0.5
    depths = np.ones(model.num_vertices)
    front = np.ones(model.triangles.shape[0], dtype=bool)
    # UV triangles may have either orientation; rasterize accepts both since
    # barycentrics are normalized by the signed area.
    return rasterize(pts, depths, model.triangles, front, size, size)


def extract_partial_albedo(
    image: ImageBuffer,
    params: SceneParams,
    mask: np.ndarray,
    model: MorphableModel,
    texture_size: int = 512,
) -> PartialTexture:
    """Shading-free albedo for every texel visible in the masked input.

    A texel is valid when its surface point projects inside the image with a
    bilinear footprint that lies entirely on mask-valid pixels owned by the
    texel's own triangle in the z-buffer; its albedo is the bilinear image
    sample divided by the SH shading (floored at 1e-3 per channel).
    """
    verts, _ = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    rot = quat_to_matrix(params.quat)
    verts_cam = verts @ rot.T + params.translation
    _, vis = render_synth(model, params, image.width, image.height)

    uv_vis = rasterize_uv(model, texture_size)
    tex = np.full((texture_size, texture_size, 3), INVALID_TEXEL)
    validity = np.zeros((texture_size, texture_size), dtype=bool)

    cov = uv_vis.coverage
    if not cov.any():
        return PartialTexture(image=ImageBuffer(tex), validity=validity)
    tids = uv_vis.tri[cov]
    bary = uv_vis.bary[cov]
    tri_v = model.triangles[tids]
    pts_cam = np.einsum("pk,pkc->pc", bary, verts_cam[tri_v])
    z = pts_cam[:, 2]
    ok = z > 1e-6
    px = params.focal * pts_cam[:, 0] / np.maximum(z, 1e-6) + params.principal[0]
    py = params.focal * pts_cam[:, 1] / np.maximum(z, 1e-6) + params.principal[1]
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    ok &= (x0 >= 0) & (y0 >= 0) & (x0 + 1 < image.width) & (y0 + 1 < image.height)
    x0c = np.clip(x0, 0, image.width - 2)
    y0c = np.clip(y0, 0, image.height - 2)

    same_tri = np.ones(tids.size, dtype=bool)
    masked = np.ones(tids.size, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            same_tri &= vis.tri[y0c + dy, x0c + dx] == tids
            masked &= mask[y0c + dy, x0c + dx]
    ok &= same_tri & masked

    fx = px - x0c
    fy = py - y0c
    img = image.pixels
    sample = (
        img[y0c, x0c] * ((1 - fx) * (1 - fy))[:, None]
        + img[y0c, x0c + 1] * (fx * (1 - fy))[:, None]
        + img[y0c + 1, x0c] * ((1 - fx) * fy)[:, None]
        + img[y0c + 1, x0c + 1] * (fx * fy)[:, None]
    )
    normals = face_normals(verts_cam, model.triangles)
    shade = sh_basis(normals[tids]) @ params.light.T
    shade = np.maximum(shade, SHADING_FLOOR)
    albedo = sample / shade

    out_vals = np.full((tids.size, 3), INVALID_TEXEL)
    out_vals[ok] = albedo[ok]
    tex[cov] = out_vals
    valid_flat = np.zeros(tids.size, dtype=bool)
    valid_flat[ok] = True
    validity[cov] = valid_flat
    tex[~validity] = INVALID_TEXEL
    return PartialTexture(image=ImageBuffer(tex), validity=validity)


def bake_lowfreq_texture(model: MorphableModel, alpha_albedo, texture_size: int = 512) -> ImageBuffer:
    """UV-space render of the PCA albedo; texels outside the layout take the
    value of the nearest covered texel."""
    _, albedo = evaluate_pca(
        model,
        np.zeros(model.sigma_id.size),
        np.zeros(model.sigma_exp.size),
        np.asarray(alpha_albedo, dtype=np.float64),
    )
    uv_vis = rasterize_uv(model, texture_size)
    tex = np.zeros((texture_size, texture_size, 3))
    cov = uv_vis.coverage
    if not cov.any():
        raise FittingError("model UV layout covers no texels")
    tids = uv_vis.tri[cov]
    bary = uv_vis.bary[cov]
    tex[cov] = np.einsum("pk,pkc->pc", bary, albedo[model.triangles[tids]])
    if not cov.all():
        _, (iy, ix) = ndimage.distance_transform_edt(~cov, return_indices=True)
        tex = tex[iy, ix]
    return ImageBuffer(tex)


def fill_partial_texture(partial: PartialTexture, fill: ImageBuffer) -> ImageBuffer:
    """Replace invalid texels with the corresponding fill-texture values."""
    if (fill.height, fill.width) != (partial.image.height, partial.image.width):
        raise FittingError("fill texture size mismatch")
    out = partial.image.pixels.copy()
    out[~partial.validity] = fill.pixels[~partial.validity]
    return ImageBuffer(out)
