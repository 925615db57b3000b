#!/usr/bin/env python3
"""Generate a self-contained working set for manual CLI runs.

Writes a toy morphable model, toy network weights, a synthetic input
photograph with landmarks and mask, a small texture database with its
correlation file, and a matching pipeline config under the given directory.
"""

import argparse
from pathlib import Path

import numpy as np

from texface.analysis import build_correlation_db, save_correlations
from texface.featurenet import make_toy_net, save_weights
from texface.fitting import bake_lowfreq_texture
from texface.image import ImageBuffer, save_mask, save_png
from texface.morphable import Landmarks, SceneParams, evaluate_pca, make_toy_model, save_landmarks, save_model, toy_landmark_indices
from texface.render import project_points, quat_to_matrix, render_synth

GRAM_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")


def scene_params(model, rng, width, height):
    d_id, d_exp, d_al = model.dims
    quat = np.array([1.0, 0.05, -0.03, 0.02])
    quat /= np.linalg.norm(quat)
    light = np.concatenate(
        [np.array([[1.1], [1.05], [1.0]]) / 0.28209479177387814, 0.15 * rng.standard_normal((3, 8))],
        axis=1,
    )
    return SceneParams(
        alpha_id=0.5 * rng.standard_normal(d_id),
        alpha_exp=0.5 * rng.standard_normal(d_exp),
        alpha_albedo=0.5 * rng.standard_normal(d_al),
        quat=quat,
        translation=np.array([0.02, -0.01, 2.6]),
        focal=1.65 * width,
        principal=np.array([(width - 1) / 2.0, (height - 1) / 2.0]),
        light=light,
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="fixtures")
    parser.add_argument("--size", type=int, default=256)
    parser.add_argument("--texture-size", type=int, default=128)
    parser.add_argument("--db-size", type=int, default=6)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)

    model = make_toy_model()
    save_model(model, out / "model.mmdl")
    net = make_toy_net(seed=0)
    save_weights(net, out / "weights.vggw")

    truth = scene_params(model, rng, args.size, args.size)
    image, vis = render_synth(model, truth, args.size, args.size)
    save_png(image, out / "input.png")
    save_mask(vis.coverage, out / "input_mask.png")

    idx = toy_landmark_indices(model)
    verts, _ = evaluate_pca(model, truth.alpha_id, truth.alpha_exp, truth.alpha_albedo)
    cam = verts @ quat_to_matrix(truth.quat).T + truth.translation
    pts, _ = project_points(truth.focal, truth.principal, np.eye(3), np.zeros(3), cam[idx])
    save_landmarks(Landmarks(vertex_indices=idx, points=pts), out / "input_landmarks.txt")

    tex_dir = out / "db_textures"
    tex_dir.mkdir(exist_ok=True)
    textures, ids = [], []
    d_al = model.dims[2]
    for i in range(args.db_size):
        alb = bake_lowfreq_texture(model, 0.8 * rng.standard_normal(d_al), args.texture_size)
        y, x = np.mgrid[0 : args.texture_size, 0 : args.texture_size] / args.texture_size
        detail = 0.08 * np.sin(2 * np.pi * (4 + i) * (x * np.cos(i) + y * np.sin(i)))
        px = np.clip(alb.pixels + detail[:, :, None], 0.0, 1.0)
        tex = ImageBuffer(px)
        sid = f"subject{i:02d}"
        save_png(tex, tex_dir / f"{sid}.png")
        textures.append(tex)
        ids.append(sid)
    db = build_correlation_db(textures, ids, net, GRAM_LAYERS)
    save_correlations(db, out / "db.grdb")

    with open(out / "pipeline.cfg", "w") as fh:
        fh.write(
            "\n".join(
                [
                    "weights = weights.vggw",
                    "model = model.mmdl",
                    "grdb = db.grdb",
                    "db_textures = db_textures",
                    "image = input.png",
                    "landmarks = input_landmarks.txt",
                    "mask = input_mask.png",
                    "out = run",
                    "gram_layers = " + ",".join(GRAM_LAYERS),
                    "feature_layers = conv4_1",
                    f"texture_size = {args.texture_size}",
                    "iterations = 200",
                    "",
                ]
            )
        )
    print(f"fixtures written to {out}")


if __name__ == "__main__":
    main()
