"""Stage functions behind the CLI: each one reads and writes files, so
running the stages separately or through `pipeline` produces identical bytes."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, synthesis
from .analysis import (
    CorrelationDatabase,
    assemble_targets,
    fit_convex_weights,
    input_masked_stack,
    load_correlations,
    luma,
    masked_gram_database,
)
from .featurenet import LayerSelection, NetworkSpec, load_weights
from .fitting import PartialTexture, bake_lowfreq_texture, extract_partial_albedo, fit_model
from .image import ImageBuffer, load_mask, load_png, resize, resize_mask, save_mask, save_png
from .morphable import Landmarks, MorphableModel, SceneParams, evaluate_pca, load_landmarks, load_model
from .render import face_normals, front_facing, project_points, quat_to_matrix, rasterize, render_synth, sh_basis
from .synthesis import SynthesisConfig, SynthesisResult, laplacian_variance, synthesize


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


DEFAULT_GRAM_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")


@dataclass
class PipelineConfig:
    weights: Path
    model: Path
    grdb: Path
    db_textures: Path  # directory of full-coverage texture PNGs named <id>.png
    image: Path
    landmarks: Path
    mask: Path
    out: Path
    gram_layers: tuple = DEFAULT_GRAM_LAYERS
    feature_layers: tuple = ("conv4_2",)
    blend_mode: str = "convex"
    texture_size: int = 256
    detail_weight: float = 2000.0
    iterations: int = 200
    history: int = 10

    @staticmethod
    def from_file(path, overrides=None) -> "PipelineConfig":
        values = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"bad config line: {line!r}")
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(values, base=Path(path).parent)

    @staticmethod
    def from_dict(values: dict, base: Path | None = None) -> "PipelineConfig":
        def path_of(key):
            if key not in values:
                raise ConfigError(f"missing config key {key!r}")
            p = Path(values[key])
            if base is not None and not p.is_absolute():
                p = base / p
            return p

        cfg = PipelineConfig(
            weights=path_of("weights"),
            model=path_of("model"),
            grdb=path_of("grdb"),
            db_textures=path_of("db_textures"),
            image=path_of("image"),
            landmarks=path_of("landmarks"),
            mask=path_of("mask"),
            out=path_of("out"),
        )
        if "gram_layers" in values:
            cfg.gram_layers = tuple(s.strip() for s in str(values["gram_layers"]).split(",") if s.strip())
        if "feature_layers" in values:
            cfg.feature_layers = tuple(s.strip() for s in str(values["feature_layers"]).split(",") if s.strip())
        if "blend_mode" in values:
            cfg.blend_mode = str(values["blend_mode"])
        for key, cast in (("texture_size", int), ("detail_weight", float), ("iterations", int), ("history", int)):
            if key in values:
                setattr(cfg, key, cast(values[key]))
        return cfg

    def validate_inputs(self, need=("weights", "model", "grdb", "db_textures", "image", "landmarks", "mask")):
        for key in need:
            p = getattr(self, key)
            if not Path(p).exists():
                raise ConfigError(f"{key} file not found: {p}")
        if self.blend_mode not in analysis.BLEND_MODES:
            raise ConfigError(f"unknown blend mode {self.blend_mode!r}")

    @property
    def layer_selection(self) -> LayerSelection:
        return LayerSelection(gram_layers=self.gram_layers, feature_layers=self.feature_layers)


# ---------------------------------------------------------------------------
# SceneParams as line-oriented text


def save_scene_params(params: SceneParams, path) -> None:
    with open(path, "w") as fh:
        def line(name, vals):
            fh.write(name + " " + " ".join(repr(float(v)) for v in np.atleast_1d(vals)) + "\n")

        line("quat", params.quat)
        line("translation", params.translation)
        line("focal", [params.focal])
        line("principal", params.principal)
        line("light", params.light.ravel())
        line("alpha_id", params.alpha_id)
        line("alpha_exp", params.alpha_exp)
        line("alpha_albedo", params.alpha_albedo)


def load_scene_params(path) -> SceneParams:
    fields = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                fields[parts[0]] = np.array([float(v) for v in parts[1:]])
    return SceneParams(
        alpha_id=fields["alpha_id"],
        alpha_exp=fields["alpha_exp"],
        alpha_albedo=fields["alpha_albedo"],
        quat=fields["quat"] / np.linalg.norm(fields["quat"]),
        translation=fields["translation"],
        focal=float(fields["focal"][0]),
        principal=fields["principal"],
        light=fields["light"].reshape(3, 9),
    )


def save_weights_csv(weights, residuals, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "weight"])
        for i, w in enumerate(weights):
            writer.writerow([i, repr(float(w))])
        for l, r in enumerate(residuals):
            writer.writerow([f"layer_residual_{l}", repr(float(r))])


def load_weights_csv(path) -> np.ndarray:
    weights = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and row[0].isdigit():
                weights.append(float(row[1]))
    return np.array(weights)


def save_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "total", "feature_term", "gram_term"])
        for it, total, feat, grm in trace:
            writer.writerow([it, repr(float(total)), repr(float(feat)), repr(float(grm))])


# ---------------------------------------------------------------------------
# stages


def default_init_params(model: MorphableModel, image: ImageBuffer) -> SceneParams:
    d_id, d_exp, d_al = model.dims
    light = np.zeros((3, 9))
    light[:, 0] = 1.0 / 0.28209479177387814
    return SceneParams(
        alpha_id=np.zeros(d_id),
        alpha_exp=np.zeros(d_exp),
        alpha_albedo=np.zeros(d_al),
        quat=np.array([1.0, 0.0, 0.0, 0.0]),
        translation=np.array([0.0, 0.0, 2.5]),
        focal=0.9 * max(image.width, image.height),
        principal=np.array([(image.width - 1) / 2.0, (image.height - 1) / 2.0]),
        light=light,
    )


def stage_fit(cfg: PipelineConfig) -> Path:
    cfg.validate_inputs(need=("model", "image", "landmarks", "mask"))
    model = load_model(cfg.model)
    image = load_png(cfg.image)
    lms = load_landmarks(cfg.landmarks)
    mask = load_mask(cfg.mask)
    init = default_init_params(model, image)
    report = fit_model(image, lms, mask, model, init)
    cfg.out.mkdir(parents=True, exist_ok=True)
    chi_path = cfg.out / "chi.txt"
    save_scene_params(report.params, chi_path)
    return chi_path


def stage_extract(cfg: PipelineConfig) -> tuple:
    cfg.validate_inputs(need=("model", "image", "mask"))
    model = load_model(cfg.model)
    image = load_png(cfg.image)
    mask = load_mask(cfg.mask)
    params = load_scene_params(cfg.out / "chi.txt")
    partial = extract_partial_albedo(image, params, mask, model, cfg.texture_size)
    lowfreq = bake_lowfreq_texture(model, params.alpha_albedo, cfg.texture_size)
    partial_path = cfg.out / "partial.png"
    validity_path = cfg.out / "partial_validity.png"
    lowfreq_path = cfg.out / "lowfreq.png"
    save_png(partial.image, partial_path)
    save_mask(partial.validity, validity_path)
    save_png(lowfreq, lowfreq_path)
    return partial_path, validity_path, lowfreq_path


def _load_db_textures(cfg: PipelineConfig, db: CorrelationDatabase):
    textures = []
    for entry in db.entries:
        p = Path(cfg.db_textures) / f"{entry.entry_id}.png"
        if not p.exists():
            raise StageError(f"database texture missing: {p}")
        textures.append(load_png(p))
    return textures


def stage_analyze(cfg: PipelineConfig) -> Path:
    cfg.validate_inputs(need=("weights", "grdb", "db_textures"))
    net = load_weights(cfg.weights)
    db = load_correlations(cfg.grdb)
    if tuple(db.gram_layers) != tuple(cfg.gram_layers):
        raise StageError(
            f"GRDB layers {db.gram_layers} do not match configured gram layers {cfg.gram_layers}"
        )
    partial = load_png(cfg.out / "partial.png")
    validity = load_mask(cfg.out / "partial_validity.png")
    textures = _load_db_textures(cfg, db)
    input_stack = input_masked_stack(partial, validity, net, cfg.gram_layers)
    masked_stacks = masked_gram_database(textures, validity, net, cfg.gram_layers, cache=db.masked_cache)
    weights, residuals = fit_convex_weights(input_stack, masked_stacks, mode=cfg.blend_mode)
    weights_path = cfg.out / "weights.csv"
    save_weights_csv(weights, residuals, weights_path)
    return weights_path


def stage_synthesize(cfg: PipelineConfig) -> tuple:
    cfg.validate_inputs(need=("weights", "grdb"))
    net = load_weights(cfg.weights)
    db = load_correlations(cfg.grdb)
    lowfreq = load_png(cfg.out / "lowfreq.png")
    weights = load_weights_csv(cfg.out / "weights.csv")
    targets = assemble_targets(weights, db, lowfreq, net, cfg.layer_selection)
    syn_cfg = SynthesisConfig(detail_weight=cfg.detail_weight, max_iterations=cfg.iterations, history=cfg.history)
    result = synthesize(lowfreq, targets, net, syn_cfg)
    final_path = cfg.out / "final_texture.png"
    trace_path = cfg.out / "loss_trace.csv"
    save_png(result.image, final_path)
    save_trace_csv(result.trace, trace_path)
    return final_path, trace_path


def render_textured_preview(model: MorphableModel, params: SceneParams, texture: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """SH-lit render sampling the UV texture instead of the PCA albedo."""
    verts, _ = evaluate_pca(model, params.alpha_id, params.alpha_exp, params.alpha_albedo)
    rot = quat_to_matrix(params.quat)
    verts_cam = verts @ rot.T + params.translation
    pts2d, pos = project_points(params.focal, params.principal, np.eye(3), np.zeros(3), verts_cam)
    front = front_facing(verts_cam, model.triangles) & pos[model.triangles].all(axis=1)
    vis = rasterize(pts2d, verts_cam[:, 2], model.triangles, front, width, height)
    image = np.zeros((height, width, 3))
    cov = vis.coverage
    if cov.any():
        tids = vis.tri[cov]
        bary = vis.bary[cov]
        uv = np.einsum("pk,pkc->pc", bary, model.uv[model.triangles[tids]])
        tx = np.clip(uv[:, 0] * texture.width - 0.5, 0, texture.width - 1)
        ty = np.clip(uv[:, 1] * texture.height - 0.5, 0, texture.height - 1)
        x0 = np.clip(np.floor(tx).astype(int), 0, texture.width - 2)
        y0 = np.clip(np.floor(ty).astype(int), 0, texture.height - 2)
        fx = (tx - x0)[:, None]
        fy = (ty - y0)[:, None]
        px = texture.pixels
        albedo = (
            px[y0, x0] * (1 - fx) * (1 - fy)
            + px[y0, x0 + 1] * fx * (1 - fy)
            + px[y0 + 1, x0] * (1 - fx) * fy
            + px[y0 + 1, x0 + 1] * fx * fy
        )
        shading = sh_basis(face_normals(verts_cam, model.triangles)[tids]) @ params.light.T
        image[cov] = albedo * shading
    return ImageBuffer(image)


def stage_preview(cfg: PipelineConfig) -> Path:
    cfg.validate_inputs(need=("model", "image"))
    model = load_model(cfg.model)
    image = load_png(cfg.image)
    params = load_scene_params(cfg.out / "chi.txt")
    final_path = cfg.out / "final_texture.png"
    if final_path.exists():
        texture = load_png(final_path)
        preview = render_textured_preview(model, params, texture, image.width, image.height)
    else:
        preview, _ = render_synth(model, params, image.width, image.height)
    preview_path = cfg.out / "preview.png"
    save_png(preview, preview_path)
    return preview_path


PIPELINE_ARTIFACTS = (
    "chi.txt",
    "partial.png",
    "lowfreq.png",
    "weights.csv",
    "loss_trace.csv",
    "final_texture.png",
    "preview.png",
)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, names=PIPELINE_ARTIFACTS) -> Path:
    manifest = out_dir / "manifest.txt"
    with open(manifest, "w") as fh:
        for name in names:
            p = out_dir / name
            fh.write(f"{name} {sha256_file(p)}\n")
    return manifest


def run_pipeline(cfg: PipelineConfig) -> Path:
    """fit -> extract -> analyze -> synthesize -> preview, plus a manifest
    with content hashes.  Stage failure preserves prior artifacts."""
    cfg.validate_inputs()
    cfg.out.mkdir(parents=True, exist_ok=True)
    stages = (
        ("fit", stage_fit),
        ("extract", stage_extract),
        ("analyze", stage_analyze),
        ("synthesize", stage_synthesize),
        ("preview", stage_preview),
    )
    for name, fn in stages:
        try:
            fn(cfg)
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(f"stage {name!r} failed: {exc}") from exc
    return write_manifest(cfg.out)


# ---------------------------------------------------------------------------
# evaluation sweeps


def eval_layers(cfg: PipelineConfig, max_layers: int | None = None) -> list:
    """Gram-layer-count ablation: rows of (n_layers, final_loss, detail metric)."""
    cfg.validate_inputs(need=("weights", "grdb"))
    rows = []
    total = len(cfg.gram_layers) if max_layers is None else max_layers
    base_layers = cfg.gram_layers
    for n in range(1, total + 1):
        sub = PipelineConfig(**{**cfg.__dict__})
        sub.gram_layers = base_layers[:n]
        sub.out = cfg.out / f"layers_{n}"
        sub.out.mkdir(parents=True, exist_ok=True)
        net = load_weights(cfg.weights)
        db = load_correlations(cfg.grdb)
        sub_db = CorrelationDatabase(
            gram_layers=tuple(base_layers[:n]),
            entries=[
                analysis.DbEntry(entry_id=e.entry_id, grams={l: e.grams[l] for l in base_layers[:n]})
                for e in db.entries
            ],
        )
        lowfreq = load_png(cfg.out / "lowfreq.png")
        weights = load_weights_csv(cfg.out / "weights.csv")
        targets = assemble_targets(weights, sub_db, lowfreq, net, sub.layer_selection)
        syn_cfg = SynthesisConfig(detail_weight=cfg.detail_weight, max_iterations=cfg.iterations, history=cfg.history)
        result = synthesize(lowfreq, targets, net, syn_cfg)
        save_png(result.image, sub.out / "final_texture.png")
        rows.append((n, result.trace[-1][1], laplacian_variance(result.image)))
    with open(cfg.out / "eval_layers.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gram_layers", "final_loss", "laplacian_variance"])
        for row in rows:
            writer.writerow(row)
    return rows


def eval_lowres(cfg: PipelineConfig, factors=(1.0, 0.5, 0.25)) -> list:
    """Input-resolution robustness sweep.

    Re-runs fit/extract/analyze on downscaled inputs and reports the
    max-abs blend-weight drift from the full-resolution run."""
    cfg.validate_inputs()
    image = load_png(cfg.image)
    mask = load_mask(cfg.mask)
    lms = load_landmarks(cfg.landmarks)
    rows = []
    ref_weights = None
    for factor in factors:
        w = max(32, int(round(image.width * factor)))
        h = max(32, int(round(image.height * factor)))
        sub = PipelineConfig(**{**cfg.__dict__})
        sub.out = cfg.out / f"lowres_{factor:g}"
        sub.out.mkdir(parents=True, exist_ok=True)
        img_s = resize(image, w, h)
        mask_s = resize_mask(mask, w, h)
        sx = w / image.width
        sy = h / image.height
        lms_s = Landmarks(
            vertex_indices=lms.vertex_indices,
            points=np.stack(
                [(lms.points[:, 0] + 0.5) * sx - 0.5, (lms.points[:, 1] + 0.5) * sy - 0.5], axis=1
            ),
        )
        save_png(img_s, sub.out / "input.png")
        save_mask(mask_s, sub.out / "input_mask.png")
        from .morphable import save_landmarks

        save_landmarks(lms_s, sub.out / "input_landmarks.txt")
        sub.image = sub.out / "input.png"
        sub.mask = sub.out / "input_mask.png"
        sub.landmarks = sub.out / "input_landmarks.txt"
        stage_fit(sub)
        stage_extract(sub)
        stage_analyze(sub)
        weights = load_weights_csv(sub.out / "weights.csv")
        if ref_weights is None:
            ref_weights = weights
        drift = float(np.max(np.abs(weights - ref_weights)))
        rows.append((factor, w, h, drift))
    with open(cfg.out / "eval_lowres.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["factor", "width", "height", "weight_drift"])
        for row in rows:
            writer.writerow(row)
    return rows
