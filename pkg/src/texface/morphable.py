"""PCA morphable face model: types, evaluation, file formats, toy model."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MMDL_MAGIC = b"MMDL"


class ModelError(ValueError):
    pass


@dataclass
class MorphableModel:
    triangles: np.ndarray  # (T, 3) int32
    mean_shape: np.ndarray  # (3n,)
    mean_albedo: np.ndarray  # (3n,)
    basis_id: np.ndarray  # (3n, d_id)
    basis_exp: np.ndarray  # (3n, d_exp)
    basis_albedo: np.ndarray  # (3n, d_al)
    sigma_id: np.ndarray
    sigma_exp: np.ndarray
    sigma_albedo: np.ndarray
    uv: np.ndarray  # (n, 2) in [0, 1]^2

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int32)
        for name in ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_albedo", "sigma_id", "sigma_exp", "sigma_albedo", "uv"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n3 = self.mean_shape.size
        if n3 % 3 or self.mean_albedo.size != n3:
            raise ModelError("mean shape/albedo sizes inconsistent")
        for basis, sigma in (
            (self.basis_id, self.sigma_id),
            (self.basis_exp, self.sigma_exp),
            (self.basis_albedo, self.sigma_albedo),
        ):
            if basis.shape[0] != n3 or basis.shape[1] != sigma.size:
                raise ModelError("basis columns do not match sigma length")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= self.num_vertices):
            raise ModelError("triangle indices out of range")
        if self.uv.shape != (self.num_vertices, 2) or self.uv.min() < 0.0 or self.uv.max() > 1.0:
            raise ModelError("UV coordinates must be (n, 2) in [0, 1]^2")

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def dims(self):
        return (self.sigma_id.size, self.sigma_exp.size, self.sigma_albedo.size)


@dataclass
class SceneParams:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray
    alpha_albedo: np.ndarray
    quat: np.ndarray  # (w, x, y, z), unit norm
    translation: np.ndarray  # (3,)
    focal: float  # pixels
    principal: np.ndarray  # (2,) pixels
    light: np.ndarray  # (3, 9) second-order SH per RGB channel

    def __post_init__(self):
        for name in ("alpha_id", "alpha_exp", "alpha_albedo", "quat", "translation", "principal"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.light = np.asarray(self.light, dtype=np.float64).reshape(3, 9)
        if self.quat.shape != (4,) or abs(np.linalg.norm(self.quat) - 1.0) > 1e-9:
            raise ModelError("quaternion must be unit length")
        if not self.focal > 0.0:
            raise ModelError("focal length must be positive")

    def copy(self) -> "SceneParams":
        return SceneParams(
            alpha_id=self.alpha_id.copy(),
            alpha_exp=self.alpha_exp.copy(),
            alpha_albedo=self.alpha_albedo.copy(),
            quat=self.quat.copy(),
            translation=self.translation.copy(),
            focal=float(self.focal),
            principal=self.principal.copy(),
            light=self.light.copy(),
        )


@dataclass
class Landmarks:
    vertex_indices: np.ndarray  # (m,) int32
    points: np.ndarray  # (m, 2) pixel coords

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int32)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (self.vertex_indices.size, 2):
            raise ModelError("landmark points/indices inconsistent")

    def __len__(self):
        return self.vertex_indices.size


def evaluate_pca(model: MorphableModel, alpha_id, alpha_exp, alpha_albedo):
    """Vertices and per-vertex albedo for the given coefficients, as (n, 3)."""
    d_id, d_exp, d_al = model.dims
    alpha_id = np.asarray(alpha_id, dtype=np.float64)
    alpha_exp = np.asarray(alpha_exp, dtype=np.float64)
    alpha_albedo = np.asarray(alpha_albedo, dtype=np.float64)
    if alpha_id.shape != (d_id,) or alpha_exp.shape != (d_exp,) or alpha_albedo.shape != (d_al,):
        raise ModelError("coefficient lengths do not match the model bases")
    v = model.mean_shape + model.basis_id @ alpha_id + model.basis_exp @ alpha_exp
    i = model.mean_albedo + model.basis_albedo @ alpha_albedo
    return v.reshape(-1, 3), i.reshape(-1, 3)


# ---------------------------------------------------------------------------
# file formats


def save_model(model: MorphableModel, path) -> None:
    n = model.num_vertices
    d_id, d_exp, d_al = model.dims
    body = bytearray()
    body += struct.pack("<5I", n, model.triangles.shape[0], d_id, d_exp, d_al)
    body += model.triangles.astype("<u4").tobytes()
    for arr in (
        model.mean_shape,
        model.mean_albedo,
        model.basis_id,
        model.basis_exp,
        model.basis_albedo,
        model.sigma_id,
        model.sigma_exp,
        model.sigma_albedo,
        model.uv,
    ):
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MMDL_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != MMDL_MAGIC:
        raise ModelError("not an MMDL model file (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelError("model file checksum mismatch")
    n, ntri, d_id, d_exp, d_al = struct.unpack_from("<5I", body, 0)
    off = 20
    counts = [
        ("triangles", "<u4", ntri * 3),
        ("mean_shape", "<f4", 3 * n),
        ("mean_albedo", "<f4", 3 * n),
        ("basis_id", "<f4", 3 * n * d_id),
        ("basis_exp", "<f4", 3 * n * d_exp),
        ("basis_albedo", "<f4", 3 * n * d_al),
        ("sigma_id", "<f4", d_id),
        ("sigma_exp", "<f4", d_exp),
        ("sigma_albedo", "<f4", d_al),
        ("uv", "<f4", 2 * n),
    ]
    arrays = {}
    for name, dtype, count in counts:
        size = count * 4
        if off + size > len(body):
            raise ModelError(f"truncated model file while reading {name}")
        arrays[name] = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += size
    if off != len(body):
        raise ModelError("trailing bytes in model file")
    return MorphableModel(
        triangles=arrays["triangles"].reshape(ntri, 3).astype(np.int32),
        mean_shape=arrays["mean_shape"],
        mean_albedo=arrays["mean_albedo"],
        basis_id=arrays["basis_id"].reshape(3 * n, d_id),
        basis_exp=arrays["basis_exp"].reshape(3 * n, d_exp),
        basis_albedo=arrays["basis_albedo"].reshape(3 * n, d_al),
        sigma_id=arrays["sigma_id"],
        sigma_exp=arrays["sigma_exp"],
        sigma_albedo=arrays["sigma_albedo"],
        uv=arrays["uv"].reshape(n, 2),
    )


def save_landmarks(landmarks: Landmarks, path) -> None:
    with open(path, "w") as fh:
        for idx, (x, y) in zip(landmarks.vertex_indices, landmarks.points):
            fh.write(f"{int(idx)} {float(x)!r} {float(y)!r}\n")


def load_landmarks(path) -> Landmarks:
    indices, points = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, x, y = line.split()
            indices.append(int(idx))
            points.append((float(x), float(y)))
    return Landmarks(vertex_indices=np.array(indices, dtype=np.int32), points=np.array(points))


# ---------------------------------------------------------------------------
# procedurally generated toy model (real 3DMM assets are licensed)


def _smooth_field(rng, u, v, n_terms=4):
    out = np.zeros_like(u)
    for _ in range(n_terms):
        ku, kv = rng.integers(1, 4, size=2)
        pu, pv = rng.uniform(0, 2 * np.pi, size=2)
        amp = rng.normal(0.0, 1.0)
        out += amp * np.cos(ku * np.pi * u + pu) * np.cos(kv * np.pi * v + pv)
    return out / np.sqrt(n_terms)


def make_toy_model(seed: int = 7, grid: int = 22, d_id: int = 8, d_exp: int = 4, d_al: int = 8) -> MorphableModel:
    """Ellipsoid "face" patch with smooth random PCA bases; fully deterministic."""
    rng = np.random.default_rng(seed)
    us = np.linspace(-1.0, 1.0, grid)
    vs = np.linspace(-1.0, 1.0, grid)
    uu, vv = np.meshgrid(us, vs, indexing="xy")
    u = uu.ravel()
    v = vv.ravel()
    phi = u * np.deg2rad(58.0)  # azimuth
    psi = v * np.deg2rad(48.0)  # elevation
    # camera looks along +z; the patch faces -z so its normals point at the camera
    dirs = np.stack(
        [np.sin(phi) * np.cos(psi), np.sin(psi), -np.cos(phi) * np.cos(psi)],
        axis=1,
    )
    radii = np.array([0.55, 0.72, 0.50])
    verts = dirs * radii

    n = verts.shape[0]
    tris = []
    for j in range(grid - 1):
        for i in range(grid - 1):
            a = j * grid + i
            b = j * grid + i + 1
            c = (j + 1) * grid + i
            d = (j + 1) * grid + i + 1
            tris.append((a, b, c))
            tris.append((b, d, c))
    tris = np.array(tris, dtype=np.int32)
    # fix winding so cross(e1, e2) points outward (away from the centroid)
    p = verts[tris]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    centers = p.mean(axis=1)
    flip = np.einsum("ij,ij->i", normals, centers) < 0.0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    outward = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def make_basis(cols, scale, along_normal):
        basis = np.zeros((3 * n, cols))
        for c in range(cols):
            if along_normal:
                disp = outward * _smooth_field(rng, u, v)[:, None] * scale
            else:
                disp = np.stack([_smooth_field(rng, u, v) for _ in range(3)], axis=1) * scale
            basis[:, c] = disp.ravel()
        return basis

    basis_id = make_basis(d_id, 0.035, along_normal=True)
    basis_exp = make_basis(d_exp, 0.02, along_normal=True)

    albedo_mean = np.stack(
        [
            0.78 + 0.08 * _smooth_field(rng, u, v),
            0.58 + 0.08 * _smooth_field(rng, u, v),
            0.47 + 0.06 * _smooth_field(rng, u, v),
        ],
        axis=1,
    )
    basis_al = np.zeros((3 * n, d_al))
    for c in range(d_al):
        disp = np.stack([0.08 * _smooth_field(rng, u, v) for _ in range(3)], axis=1)
        basis_al[:, c] = disp.ravel()

    uv = np.stack([(u + 1.0) / 2.0 * 0.9 + 0.05, (v + 1.0) / 2.0 * 0.9 + 0.05], axis=1)
    return MorphableModel(
        triangles=tris,
        mean_shape=verts.ravel(),
        mean_albedo=np.clip(albedo_mean, 0.05, 0.95).ravel(),
        basis_id=basis_id,
        basis_exp=basis_exp,
        basis_albedo=basis_al,
        sigma_id=np.ones(d_id),
        sigma_exp=np.ones(d_exp),
        sigma_albedo=np.ones(d_al),
        uv=uv,
    )


def toy_landmark_indices(model: MorphableModel, count: int = 40) -> np.ndarray:
    """Evenly spread interior vertex indices, deterministic."""
    n = model.num_vertices
    grid = int(round(np.sqrt(n)))
    interior = [j * grid + i for j in range(2, grid - 2) for i in range(2, grid - 2)]
    step = max(1, len(interior) // count)
    return np.array(interior[::step][:count], dtype=np.int32)
