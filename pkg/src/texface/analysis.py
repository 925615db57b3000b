"""Masked Gram correlation analysis and synthesis-target assembly.

All Gram analysis runs on the luma (Y) channel, replicated to the three
network input channels.  Database textures are resampled to the input
texture resolution before masking so feature-map dimensions match.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import simplex
from .featurenet import FeatureMaps, LayerSelection, NetworkSpec, forward, gram_stack
from .image import ImageBuffer, color_convert, resize

GRDB_MAGIC = b"GRDB"
GRDB_VERSION = 1

BLEND_MODES = ("convex", "unconstrained", "nearest")


class AnalysisError(ValueError):
    pass


class CorrelationFormatError(AnalysisError):
    pass


@dataclass
class DbEntry:
    entry_id: str
    grams: dict  # layer name -> (N, N) float32 full-texture Gram


@dataclass
class CorrelationDatabase:
    gram_layers: tuple
    entries: list
    masked_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.entries:
            raise AnalysisError("correlation database needs at least one entry")
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise AnalysisError("duplicate entry ids")
        for e in self.entries:
            if tuple(e.grams) != tuple(self.gram_layers):
                raise AnalysisError(f"entry {e.entry_id}: layer set mismatch")

    def full_stacks(self):
        return [[np.asarray(e.grams[l], dtype=np.float64) for l in self.gram_layers] for e in self.entries]


@dataclass
class TargetSet:
    gram_hat: dict  # layer -> (N, N) blended full-texture Gram
    feat_hat: dict  # layer -> (N, H, W) feature response of the low-frequency albedo
    weights: np.ndarray
    source_size: tuple  # (height, width) of the synthesis resolution


def luma(image: ImageBuffer) -> ImageBuffer:
    """Single-channel Y plane (identity for single-channel input)."""
    if image.channels == 1:
        return image
    return ImageBuffer(color_convert(image, "rgb-to-yiq").pixels[:, :, :1])


def mask_out(texture: ImageBuffer, mask: np.ndarray) -> ImageBuffer:
    """Set invalid pixels to the constant 0.5; valid pixels unchanged."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (texture.height, texture.width):
        raise AnalysisError("mask size does not match the texture")
    px = texture.pixels.copy()
    px[~mask] = 0.5
    return ImageBuffer(px)


def mask_hash(mask: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(mask.shape).encode())
    h.update(np.packbits(np.asarray(mask, dtype=bool)).tobytes())
    return h.hexdigest()


def masked_gram_database(textures, mask: np.ndarray, net: NetworkSpec, layers, cache: dict | None = None):
    """Masked Gram stacks G_M for every database texture under a shared mask.

    Textures are resampled to the mask resolution, converted to luma,
    masked out, and passed through the network.  Results are cached by
    (mask hash, layer set).
    """
    layers = tuple(layers)
    key = (mask_hash(mask), layers)
    if cache is not None and key in cache:
        return cache[key]
    h, w = mask.shape
    stacks = []
    for tex in textures:
        if (tex.height, tex.width) != (h, w):
            tex = resize(tex, w, h)
        masked = mask_out(luma(tex), mask)
        fm = forward(net, masked, layers=layers)
        stacks.append(gram_stack(fm, layers))
    if cache is not None:
        cache[key] = stacks
    return stacks


def input_masked_stack(partial_texture: ImageBuffer, validity: np.ndarray, net: NetworkSpec, layers):
    masked = mask_out(luma(partial_texture), validity)
    return gram_stack(forward(net, masked, layers=tuple(layers)), tuple(layers))


def fit_convex_weights(input_stack, masked_stacks, mode: str = "convex", squared: bool = True, normalize_layers: bool = False):
    """Blend weights for the input stack over the masked database stacks.

    Returns (weights, per-layer residual norms at the solution).
    """
    if mode not in BLEND_MODES:
        raise AnalysisError(f"unknown blend mode {mode!r}")
    if mode == "convex":
        w = simplex.solve_simplex_lsq(input_stack, masked_stacks, squared=squared, normalize_layers=normalize_layers)
    elif mode == "unconstrained":
        w = simplex.solve_affine_lsq(input_stack, masked_stacks, normalize_layers=normalize_layers)
    else:
        w = simplex.solve_nearest(input_stack, masked_stacks)
    residuals = []
    for l, target in enumerate(input_stack):
        blended = sum(wk * np.asarray(s[l], dtype=np.float64) for wk, s in zip(w, masked_stacks))
        residuals.append(float(np.linalg.norm(blended - np.asarray(target, dtype=np.float64))))
    return w, residuals


def assemble_targets(weights, db: CorrelationDatabase, lowfreq_albedo: ImageBuffer, net: NetworkSpec, layers: LayerSelection) -> TargetSet:
    """Blend FULL database Grams with w and take the low-frequency albedo's
    feature response as the content target."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != len(db.entries):
        raise AnalysisError("weight length does not match the database")
    if tuple(layers.gram_layers) != tuple(db.gram_layers):
        raise AnalysisError("layer selection does not match the database layers")
    gram_hat = {}
    for i, name in enumerate(db.gram_layers):
        acc = np.zeros_like(np.asarray(db.entries[0].grams[name], dtype=np.float64))
        for wk, entry in zip(weights, db.entries):
            acc += wk * np.asarray(entry.grams[name], dtype=np.float64)
        gram_hat[name] = acc
    fm = forward(net, luma(lowfreq_albedo), layers=tuple(layers.feature_layers))
    feat_hat = {name: fm[name].copy() for name in layers.feature_layers}
    return TargetSet(
        gram_hat=gram_hat,
        feat_hat=feat_hat,
        weights=weights,
        source_size=(lowfreq_albedo.height, lowfreq_albedo.width),
    )


def build_correlation_db(textures, ids, net: NetworkSpec, gram_layers) -> CorrelationDatabase:
    """Full (unmasked) Gram stacks for a set of full-coverage textures."""
    gram_layers = tuple(gram_layers)
    entries = []
    for tex, entry_id in zip(textures, ids):
        fm = forward(net, luma(tex), layers=gram_layers)
        grams = {l: gram_stack(fm, [l])[0].astype(np.float32) for l in gram_layers}
        entries.append(DbEntry(entry_id=str(entry_id), grams=grams))
    return CorrelationDatabase(gram_layers=gram_layers, entries=entries)


# ---------------------------------------------------------------------------
# GRDB persistence (lower triangles, float32, CRC-checked)


def save_correlations(db: CorrelationDatabase, path) -> None:
    dims = {l: np.asarray(db.entries[0].grams[l]).shape[0] for l in db.gram_layers}
    body = bytearray()
    body += struct.pack("<I", GRDB_VERSION)
    body += struct.pack("<I", len(db.gram_layers))
    for name in db.gram_layers:
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<I", dims[name])
    body += struct.pack("<I", len(db.entries))
    for e in db.entries:
        ib = e.entry_id.encode()
        body += struct.pack("<H", len(ib)) + ib
        for name in db.gram_layers:
            g = np.asarray(e.grams[name], dtype="<f4")
            tril = g[np.tril_indices(g.shape[0])]
            body += tril.tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(GRDB_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_correlations(path) -> CorrelationDatabase:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != GRDB_MAGIC:
        raise CorrelationFormatError("not a GRDB file (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorrelationFormatError("GRDB checksum mismatch")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise CorrelationFormatError("truncated GRDB file")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    (version,) = take("<I")
    if version != GRDB_VERSION:
        raise CorrelationFormatError(f"unsupported GRDB version {version}")
    (n_layers,) = take("<I")
    layers = []
    dims = {}
    for _ in range(n_layers):
        (ln,) = take("<H")
        name = body[off : off + ln].decode()
        off += ln
        (dim,) = take("<I")
        layers.append(name)
        dims[name] = dim
    (k,) = take("<I")
    entries = []
    for _ in range(k):
        (ln,) = take("<H")
        entry_id = body[off : off + ln].decode()
        off += ln
        grams = {}
        for name in layers:
            n = dims[name]
            count = n * (n + 1) // 2
            if off + 4 * count > len(body):
                raise CorrelationFormatError(f"truncated GRDB file in entry {entry_id!r}")
            tril = np.frombuffer(body, dtype="<f4", count=count, offset=off)
            off += 4 * count
            g = np.zeros((n, n), dtype=np.float32)
            g[np.tril_indices(n)] = tril
            g = g + np.tril(g, -1).T
            grams[name] = g
        entries.append(DbEntry(entry_id=entry_id, grams=grams))
    if off != len(body):
        raise CorrelationFormatError("trailing bytes in GRDB file")
    return CorrelationDatabase(gram_layers=tuple(layers), entries=entries)
