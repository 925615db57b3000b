"""Spherical-harmonics shading, pinhole projection and a z-buffer rasterizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import ImageBuffer
from .morphable import MorphableModel, SceneParams, evaluate_pca

SH_C0 = 0.28209479177387814  # 1/2 sqrt(1/pi)
SH_C1 = 0.4886025119029199  # sqrt(3/(4 pi))
SH_C2a = 1.0925484305920792  # sqrt(15/(4 pi))
SH_C2b = 0.31539156525252005  # 1/4 sqrt(5/pi)
SH_C2c = 0.5462742152960396  # 1/4 sqrt(15/pi)


class RenderError(ValueError):
    pass


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotate_quat_jacobian(q: np.ndarray, u: np.ndarray) -> np.ndarray:
    """d(R(q/|q|) u)/dq at a unit quaternion; u is (m, 3), out (m, 3, 4).

    The homogeneous (degree-2) rotation form satisfies R_h(q) = |q|^2 R(q/|q|),
    so at |q| = 1 the normalized derivative is dR_h - 2 (R u) q^T."""
    w, x, y, z = q
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    j = np.empty((u.shape[0], 3, 4))
    j[:, 0, 0] = 2 * (w * ux - z * uy + y * uz)
    j[:, 0, 1] = 2 * (x * ux + y * uy + z * uz)
    j[:, 0, 2] = 2 * (-y * ux + x * uy + w * uz)
    j[:, 0, 3] = 2 * (-z * ux - w * uy + x * uz)
    j[:, 1, 0] = 2 * (z * ux + w * uy - x * uz)
    j[:, 1, 1] = 2 * (y * ux - x * uy - w * uz)
    j[:, 1, 2] = 2 * (x * ux + y * uy + z * uz)
    j[:, 1, 3] = 2 * (w * ux - z * uy + y * uz)
    j[:, 2, 0] = 2 * (-y * ux + x * uy + w * uz)
    j[:, 2, 1] = 2 * (z * ux + w * uy - x * uz)
    j[:, 2, 2] = 2 * (-w * ux + z * uy - y * uz)
    j[:, 2, 3] = 2 * (x * ux + y * uy + z * uz)
    ru = u @ quat_to_matrix(q).T
    j -= 2.0 * ru[:, :, None] * np.asarray(q)[None, None, :]
    return j


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """The 9 real SH basis values (bands 0-2) for unit normals, (m, 9)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    b = np.empty((n.shape[0], 9))
    b[:, 0] = SH_C0
    b[:, 1] = SH_C1 * y
    b[:, 2] = SH_C1 * z
    b[:, 3] = SH_C1 * x
    b[:, 4] = SH_C2a * x * y
    b[:, 5] = SH_C2a * y * z
    b[:, 6] = SH_C2b * (3.0 * z * z - 1.0)
    b[:, 7] = SH_C2a * x * z
    b[:, 8] = SH_C2c * (x * x - y * y)
    return b


def sh_basis_jacobian(normals: np.ndarray) -> np.ndarray:
    """d(basis)/d(normal), shape (m, 9, 3)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    zeros = np.zeros_like(x)
    j = np.zeros((n.shape[0], 9, 3))
    j[:, 1, 1] = SH_C1
    j[:, 2, 2] = SH_C1
    j[:, 3, 0] = SH_C1
    j[:, 4, 0] = SH_C2a * y
    j[:, 4, 1] = SH_C2a * x
    j[:, 5, 1] = SH_C2a * z
    j[:, 5, 2] = SH_C2a * y
    j[:, 6, 2] = SH_C2b * 6.0 * z
    j[:, 7, 0] = SH_C2a * z
    j[:, 7, 2] = SH_C2a * x
    j[:, 8, 0] = SH_C2c * 2.0 * x
    j[:, 8, 1] = -SH_C2c * 2.0 * y
    del zeros
    return j


def sh_shade(normals: np.ndarray, albedo: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Per-vertex color albedo_c * sum_b L[c, b] Y_b(n)."""
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    norms = np.linalg.norm(n, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise RenderError("normals must be unit length")
    light = np.asarray(light, dtype=np.float64).reshape(3, 9)
    shading = sh_basis(n) @ light.T  # (m, 3)
    return np.atleast_2d(albedo) * shading


def project_points(focal: float, principal: np.ndarray, rotation: np.ndarray, translation: np.ndarray, points: np.ndarray):
    """Pinhole projection; returns (m, 2) pixel coords and a positive-depth flag."""
    p = np.atleast_2d(points) @ rotation.T + translation
    z = p[:, 2]
    valid = z > 0.0
    safe_z = np.where(valid, z, 1.0)
    xy = np.empty((p.shape[0], 2))
    xy[:, 0] = focal * p[:, 0] / safe_z + principal[0]
    xy[:, 1] = focal * p[:, 1] / safe_z + principal[1]
    return xy, valid


@dataclass
class VisibilityBuffer:
    depth: np.ndarray  # (h, w) float, inf where empty
    tri: np.ndarray  # (h, w) int32, -1 where empty
    bary: np.ndarray  # (h, w, 3)

    @property
    def coverage(self) -> np.ndarray:
        return self.tri >= 0


def rasterize(points2d: np.ndarray, depths: np.ndarray, triangles: np.ndarray, front: np.ndarray, width: int, height: int) -> VisibilityBuffer:
    """Z-buffered scanline-free rasterization with affine screen barycentrics.

    Pixel (row y, col x) is sampled at continuous coordinates (x, y).
    """
    depth = np.full((height, width), np.inf)
    tri_buf = np.full((height, width), -1, dtype=np.int32)
    bary_buf = np.zeros((height, width, 3))
    for t in np.nonzero(front)[0]:
        i0, i1, i2 = triangles[t]
        p0, p1, p2 = points2d[i0], points2d[i1], points2d[i2]
        xmin = max(int(np.ceil(min(p0[0], p1[0], p2[0]))), 0)
        xmax = min(int(np.floor(max(p0[0], p1[0], p2[0]))), width - 1)
        ymin = max(int(np.ceil(min(p0[1], p1[1], p2[1]))), 0)
        ymax = min(int(np.floor(max(p0[1], p1[1], p2[1]))), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        xs = np.arange(xmin, xmax + 1)
        ys = np.arange(ymin, ymax + 1)
        gx, gy = np.meshgrid(xs, ys)
        w0 = ((p1[0] - gx) * (p2[1] - gy) - (p1[1] - gy) * (p2[0] - gx)) / area
        w1 = ((p2[0] - gx) * (p0[1] - gy) - (p2[1] - gy) * (p0[0] - gx)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        z = w0 * depths[i0] + w1 * depths[i1] + w2 * depths[i2]
        sub_depth = depth[ymin : ymax + 1, xmin : xmax + 1]
        win = inside & (z > 0.0) & (z < sub_depth)
        if not win.any():
            continue
        sub_depth[win] = z[win]
        tri_buf[ymin : ymax + 1, xmin : xmax + 1][win] = t
        sub_bary = bary_buf[ymin : ymax + 1, xmin : xmax + 1]
        sub_bary[win, 0] = w0[win]
        sub_bary[win, 1] = w1[win]
        sub_bary[win, 2] = w2[win]
    return VisibilityBuffer(depth=depth, tri=tri_buf, bary=bary_buf)


def face_normals(verts: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = verts[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    lengths = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lengths, 1e-14)


def front_facing(verts_cam: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Triangles whose outward normal points toward the camera at the origin."""
    p = verts_cam[triangles]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    centers = p.mean(axis=1)
    return np.einsum("ij,ij->i", n, centers) < 0.0


def render_synth(model: MorphableModel, params: SceneParams, width: int, height: int):
    """SH-shaded Lambertian render; returns (ImageBuffer, VisibilityBuffer).

    Per-pixel albedo is barycentric-interpolated; normals are flat per face.
    Output values are not clamped (clamping happens on PNG export).
    """
    if not np.isfinite(params.focal) or params.focal <= 0.0:
        raise RenderError("degenerate camera")
    verts, albedo = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    rot = quat_to_matrix(params.quat)
    verts_cam = verts @ rot.T + params.translation
    pts2d, pos_depth = project_points(params.focal, params.principal, np.eye(3), np.zeros(3), verts_cam)
    front = front_facing(verts_cam, model.triangles)
    front &= pos_depth[model.triangles].all(axis=1)
    vis = rasterize(pts2d, verts_cam[:, 2], model.triangles, front, width, height)

    image = np.zeros((height, width, 3))
    cov = vis.coverage
    if cov.any():
        tids = vis.tri[cov]
        bary = vis.bary[cov]
        tri_v = model.triangles[tids]
        pix_albedo = np.einsum("pk,pkc->pc", bary, albedo[tri_v])
        normals = face_normals(verts_cam, model.triangles)
        shading = sh_basis(normals[tids]) @ params.light.T
        image[cov] = pix_albedo * shading
    return ImageBuffer(image), vis
