"""Texture database construction: shared-lighting fits, SUV despecularization,
full-coverage texture baking and correlation persistence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import CorrelationDatabase, build_correlation_db, save_correlations
from .fitting import (
    FittingError,
    PYRAMID_SCHEDULE,
    W_COLOR,
    bake_lowfreq_texture,
    extract_partial_albedo,
    fill_partial_texture,
    fit_model,
    total_energy,
)
from .image import ImageBuffer
from .morphable import Landmarks, MorphableModel, SceneParams, evaluate_pca
from .render import SH_C0, face_normals, quat_to_matrix, render_synth, sh_basis

SPECULAR_PERCENTILE = 95.0
GLOBAL_LIGHT_ROUNDS = 5


class DbToolError(RuntimeError):
    pass


@dataclass
class SubjectInput:
    subject_id: str
    photo: ImageBuffer
    landmarks: Landmarks
    mask: np.ndarray


@dataclass
class TextureDatabase:
    entries: list  # (subject_id, ImageBuffer) with full validity coverage

    def __post_init__(self):
        ids = [sid for sid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DbToolError("duplicate subject ids")


@dataclass
class BuildReport:
    shared_light: np.ndarray
    round_energies: list
    skipped: list = field(default_factory=list)  # (subject_id, reason)
    fits: dict = field(default_factory=dict)  # subject_id -> SceneParams


def _suv_rotation(light_color: np.ndarray) -> np.ndarray:
    """Orthonormal basis whose first row (S) is the light-color direction."""
    l = np.asarray(light_color, dtype=np.float64)
    norm = np.linalg.norm(l)
    if norm < 1e-12:
        raise DbToolError("light color must be nonzero")
    s = l / norm
    helper = np.array([0.0, 1.0, 0.0]) if abs(s[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(s, helper)
    u /= np.linalg.norm(u)
    v = np.cross(s, u)
    return np.stack([s, u, v])


def remove_specular_suv(image: ImageBuffer, light_color=(1.0, 1.0, 1.0), percentile: float = SPECULAR_PERCENTILE) -> ImageBuffer:
    """Suppress the specular peak in SUV space.

    RGB is rotated so the S axis aligns with the light color; S values above
    their `percentile`-th percentile are clamped to that percentile and the
    image is rotated back.  The U and V chroma channels are untouched, so
    the operation is idempotent and chroma-preserving.
    """
    if image.channels != 3:
        raise DbToolError("SUV despecularization needs a 3-channel image")
    rot = _suv_rotation(light_color)
    suv = image.pixels @ rot.T
    s = suv[:, :, 0]
    # "lower" keeps the threshold an actual data value, which makes the
    # clamp idempotent (the threshold is unchanged by its own clamping).
    threshold = float(np.percentile(s, percentile, method="lower"))
    s_clamped = np.minimum(s, threshold)
    delta = s_clamped - s
    out = image.pixels + delta[:, :, None] * rot[0]
    return ImageBuffer(out)


def _solve_shared_light(model: MorphableModel, fits: dict, subjects: dict, current_light: np.ndarray) -> np.ndarray:
    """One IRLS-weighted linear solve for the shared SH light across subjects.

    Per channel c the covered pixels give albedo_c * Y(n) . L_c = C_in_c;
    pixels are weighted by the robust 1/||r_p|| factor of the current
    residuals and 1/|M_s| per subject.
    """
    ata = np.zeros((3, 9, 9))
    atb = np.zeros((3, 9))
    for sid, params in fits.items():
        subject = subjects[sid]
        image = subject.photo
        synth, vis = render_synth(model, params, image.width, image.height)
        cov = vis.coverage & subject.mask
        if not cov.any():
            continue
        m = int(cov.sum())
        tids = vis.tri[cov]
        bary = vis.bary[cov]
        tri_v = model.triangles[tids]
        verts, albedo = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
        rot = quat_to_matrix(params.quat)
        verts_cam = verts @ rot.T + params.translation
        pix_albedo = np.einsum("pk,pkc->pc", bary, albedo[tri_v])
        basis = sh_basis(face_normals(verts_cam, model.triangles)[tids])  # (m, 9)
        target = image.pixels[cov]
        resid = target - pix_albedo * (basis @ params.light.T)
        w_robust = 1.0 / np.maximum(np.linalg.norm(resid, axis=1), 1e-6)
        w = (W_COLOR / m) * w_robust
        for c in range(3):
            a = pix_albedo[:, c : c + 1] * basis
            ata[c] += (a * w[:, None]).T @ a
            atb[c] += (a * w[:, None]).T @ target[:, c]
    light = current_light.copy()
    for c in range(3):
        try:
            light[c] = np.linalg.solve(ata[c] + 1e-9 * np.eye(9), atb[c])
        except np.linalg.LinAlgError:
            pass
    return light


def dc_only_light(scale: float = 1.0) -> np.ndarray:
    """SH light whose shading is the constant `scale` for every normal."""
    light = np.zeros((3, 9))
    light[:, 0] = scale / SH_C0
    return light


def build_texture_database(
    subjects,
    model: MorphableModel,
    init: SceneParams,
    texture_size: int = 256,
    rounds: int = GLOBAL_LIGHT_ROUNDS,
    schedule=PYRAMID_SCHEDULE,
    light_color=(1.0, 1.0, 1.0),
    despecularize: bool = True,
):
    """Alternating per-subject fits and a shared-light solve, then bake
    full-coverage shading-free textures.

    Subjects whose fit raises are reported in the build record and skipped.
    """
    subjects = sorted(subjects, key=lambda s: s.subject_id)
    if not subjects:
        raise DbToolError("need at least one subject")
    prepared = {}
    for s in subjects:
        photo = remove_specular_suv(s.photo, light_color) if despecularize else s.photo
        prepared[s.subject_id] = SubjectInput(s.subject_id, photo, s.landmarks, s.mask)

    shared_light = init.light.copy()
    fits = {}
    skipped = []
    round_energies = []
    active = list(prepared)
    for rnd in range(rounds):
        for sid in list(active):
            subject = prepared[sid]
            start = fits.get(sid, None)
            p0 = (start or init).copy()
            p0.light = shared_light.copy()
            try:
                fits[sid] = fit_model(
                    subject.photo,
                    subject.landmarks,
                    subject.mask,
                    model,
                    p0,
                    schedule=schedule,
                    fixed_light=True,
                ).params
            except (FittingError, np.linalg.LinAlgError) as exc:
                skipped.append((sid, str(exc)))
                active.remove(sid)
                fits.pop(sid, None)
        if not fits:
            raise DbToolError("every subject fit diverged")

        def summed_energy(light):
            total = 0.0
            for sid, params in fits.items():
                p = params.copy()
                p.light = light.copy()
                e, _ = total_energy(p, model, prepared[sid].photo, prepared[sid].landmarks, prepared[sid].mask)
                total += e
            return total

        e_before = summed_energy(shared_light)
        new_light = _solve_shared_light(model, fits, prepared, shared_light)
        e_after = summed_energy(new_light)
        if np.isfinite(e_after) and e_after <= e_before:
            shared_light = new_light
            round_energies.append(e_after)
        else:
            round_energies.append(e_before)
        for params in fits.values():
            params.light = shared_light.copy()

    entries = []
    for sid in sorted(fits):
        params = fits[sid]
        partial = extract_partial_albedo(prepared[sid].photo, params, prepared[sid].mask, model, texture_size)
        lowfreq = bake_lowfreq_texture(model, params.alpha_albedo, texture_size)
        entries.append((sid, fill_partial_texture(partial, lowfreq)))
    db = TextureDatabase(entries=entries)
    report = BuildReport(shared_light=shared_light, round_energies=round_energies, skipped=skipped, fits=fits)
    return db, report


def persist_correlations(db: TextureDatabase, net, layers, path) -> CorrelationDatabase:
    """Compute full Gram stacks for all database textures and write GRDB."""
    textures = [tex for _, tex in db.entries]
    ids = [sid for sid, _ in db.entries]
    cdb = build_correlation_db(textures, ids, net, layers)
    save_correlations(cdb, path)
    return cdb
