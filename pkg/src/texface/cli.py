"""Command-line interface.

Exit codes: 0 on success, 1 on a stage failure, 2 on bad input or
configuration (the message names the offending path or key)."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, pipeline
from .analysis import build_correlation_db, load_correlations, save_correlations
from .dbtool import SubjectInput, build_texture_database, persist_correlations
from .featurenet import load_weights
from .image import load_mask, load_png, save_png
from .morphable import load_landmarks, load_model
from .pipeline import ConfigError, PipelineConfig, StageError


CONFIG_KEYS = (
    "weights", "model", "grdb", "db_textures", "image", "landmarks", "mask", "out",
    "gram_layers", "feature_layers", "blend_mode", "texture_size", "detail_weight",
    "iterations", "history",
)


def _add_config_args(parser):
    parser.add_argument("--config", help="key=value configuration file")
    for key in CONFIG_KEYS:
        parser.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def _build_config(args) -> PipelineConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None}
    if args.config:
        if not Path(args.config).exists():
            raise ConfigError(f"config file not found: {args.config}")
        return PipelineConfig.from_file(args.config, overrides=overrides)
    return PipelineConfig.from_dict(overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="texface",
        description="Reconstruct complete high-frequency facial albedo textures from partial input.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("fit", "fit scene parameters to a photograph"),
        ("extract", "bake the partial and low-frequency albedo textures"),
        ("analyze", "solve blend weights against the correlation database"),
        ("synthesize", "optimize the final texture against the blended targets"),
        ("pipeline", "run fit, extract, analyze, synthesize and preview end to end"),
        ("preview", "render the fitted head with the final texture"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_args(p)

    p = sub.add_parser("build-db", help="build fits, textures and correlations from photographs")
    _add_config_args(p)
    p.add_argument("--subjects", required=True, help="directory with <id>.png, <id>_landmarks.txt, <id>_mask.png")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--no-despecularize", action="store_true")

    p = sub.add_parser("gram-dump", help="write a single-texture correlation database")
    _add_config_args(p)
    p.add_argument("--texture", required=True)
    p.add_argument("--entry-id", default="input")

    p = sub.add_parser("eval", help="evaluation sweeps")
    eval_sub = p.add_subparsers(dest="eval_command", required=True)
    p_layers = eval_sub.add_parser("layers", help="gram-layer-count ablation")
    _add_config_args(p_layers)
    p_layers.add_argument("--max-layers", type=int, default=None)
    p_low = eval_sub.add_parser("lowres", help="input-resolution robustness sweep")
    _add_config_args(p_low)
    p_low.add_argument("--factors", default="1,0.5,0.25")
    return parser


def _cmd_build_db(args, cfg: PipelineConfig) -> None:
    cfg.validate_inputs(need=("weights", "model"))
    subjects_dir = Path(args.subjects)
    if not subjects_dir.is_dir():
        raise ConfigError(f"subjects directory not found: {subjects_dir}")
    subjects = []
    for photo in sorted(subjects_dir.glob("*.png")):
        if photo.stem.endswith("_mask"):
            continue
        lms = subjects_dir / f"{photo.stem}_landmarks.txt"
        msk = subjects_dir / f"{photo.stem}_mask.png"
        if not lms.exists():
            raise ConfigError(f"landmarks file not found: {lms}")
        if not msk.exists():
            raise ConfigError(f"mask file not found: {msk}")
        subjects.append(
            SubjectInput(
                subject_id=photo.stem,
                photo=load_png(photo),
                landmarks=load_landmarks(lms),
                mask=load_mask(msk),
            )
        )
    if not subjects:
        raise ConfigError(f"no subject photographs in {subjects_dir}")
    model = load_model(cfg.model)
    first = subjects[0].photo
    init = pipeline.default_init_params(model, first)
    db, report = build_texture_database(
        subjects, model, init,
        texture_size=cfg.texture_size,
        rounds=args.rounds,
        despecularize=not args.no_despecularize,
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    tex_dir = Path(cfg.db_textures)
    tex_dir.mkdir(parents=True, exist_ok=True)
    for sid, tex in db.entries:
        save_png(tex, tex_dir / f"{sid}.png")
    net = load_weights(cfg.weights)
    persist_correlations(db, net, cfg.gram_layers, cfg.grdb)
    print(f"built {len(db.entries)} textures; skipped {len(report.skipped)}")
    print(f"shared light energies per round: {['%.6g' % e for e in report.round_energies]}")


def _cmd_gram_dump(args, cfg: PipelineConfig) -> None:
    cfg.validate_inputs(need=("weights",))
    tex_path = Path(args.texture)
    if not tex_path.exists():
        raise ConfigError(f"texture file not found: {tex_path}")
    net = load_weights(cfg.weights)
    db = build_correlation_db([load_png(tex_path)], [args.entry_id], net, cfg.gram_layers)
    cfg.grdb.parent.mkdir(parents=True, exist_ok=True)
    save_correlations(db, cfg.grdb)
    print(f"wrote {cfg.grdb}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.command == "fit":
            print(pipeline.stage_fit(cfg))
        elif args.command == "extract":
            for p in pipeline.stage_extract(cfg):
                print(p)
        elif args.command == "analyze":
            print(pipeline.stage_analyze(cfg))
        elif args.command == "synthesize":
            for p in pipeline.stage_synthesize(cfg):
                print(p)
        elif args.command == "preview":
            print(pipeline.stage_preview(cfg))
        elif args.command == "pipeline":
            print(pipeline.run_pipeline(cfg))
        elif args.command == "build-db":
            _cmd_build_db(args, cfg)
        elif args.command == "gram-dump":
            _cmd_gram_dump(args, cfg)
        elif args.command == "eval":
            if args.eval_command == "layers":
                for row in pipeline.eval_layers(cfg, max_layers=args.max_layers):
                    print("layers=%d loss=%.6g laplacian_variance=%.6g" % row)
            else:
                factors = tuple(float(f) for f in args.factors.split(","))
                for factor, w, h, drift in pipeline.eval_lowres(cfg, factors=factors):
                    print(f"factor={factor:g} size={w}x{h} weight_drift={drift:.6g}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, analysis.AnalysisError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
