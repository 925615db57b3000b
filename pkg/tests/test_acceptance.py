"""End-to-end acceptance gate.

Each test checks one headline criterion at its stated tolerance and prints a
single PASS/FAIL line so the whole gate is readable from the test log
(run with -s or -rA to see the lines).
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from texface.analysis import (
    CorrelationFormatError,
    TargetSet,
    input_masked_stack,
    load_correlations,
    masked_gram_database,
    fit_convex_weights,
    save_correlations,
)
from texface.featurenet import (
    WeightFormatError,
    backward_to_input,
    forward,
    gram_stack,
    load_weights,
    make_toy_net,
    save_weights,
)
from texface.fitting import extract_partial_albedo, fit_model, rasterize_uv
from texface.image import ImageBuffer, color_convert, downscale_block, resize
from texface.morphable import evaluate_pca
from texface.pipeline import default_init_params
from texface.render import quat_to_matrix
from texface.simplex import solve_simplex_lsq
from texface.synthesis import SynthesisConfig, laplacian_variance, synthesis_loss_grad, synthesize

from conftest import GRAM_LAYERS, make_scene, pattern_texture

REPO = Path(__file__).resolve().parents[1]


def report(name, ok, detail=""):
    print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def center_mask(size=64):
    m = np.zeros((size, size), bool)
    m[10:50, 14:52] = True
    return m


def test_gradient_suite():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    worst = 0.0
    cases = 0
    for case in range(16):
        net = make_toy_net(seed=case, blocks=(2 + case % 3, 3), convs_per_block=1 + case % 2)
        channels = 1 if case % 2 else 3
        img = ImageBuffer(rng.uniform(0.1, 0.9, (11, 13, channels)))
        layers = net.layer_names[: 2 + case % 3]
        fm = forward(net, img, layers=layers)
        cot = {name: rng.standard_normal(fm.matrix(name).shape) for name in layers}
        grad = backward_to_input(net, img, cot)

        def loss_of(px):
            fm2 = forward(net, ImageBuffer(px), layers=layers)
            return sum(float(np.sum(cot[n] * fm2.matrix(n))) for n in layers)

        eps = 1e-6
        for _ in range(3):
            i, j, c = rng.integers(0, 11), rng.integers(0, 13), rng.integers(0, channels)
            p = img.pixels.copy()
            p[i, j, c] += eps
            fp = loss_of(p)
            p[i, j, c] -= 2 * eps
            fmv = loss_of(p)
            fd = (fp - fmv) / (2 * eps)
            rel = abs(fd - grad[i, j, c]) / max(abs(fd), abs(grad[i, j, c]), 1e-10)
            worst = max(worst, rel)
        cases += 1
    # synthesis objective gradient on top of the raw network pullback
    net = make_toy_net(seed=1, blocks=(3, 4), convs_per_block=2)
    for case in range(6):
        img = ImageBuffer(rng.uniform(0.2, 0.8, (12, 12, 1)))
        other = ImageBuffer(rng.uniform(0.2, 0.8, (12, 12, 1)))
        layers = ("conv1_1", "conv2_1")
        fm = forward(net, other, layers=layers)
        targets = TargetSet(
            gram_hat=dict(zip(layers, gram_stack(fm, layers))),
            feat_hat={"conv2_1": fm["conv2_1"].copy()},
            weights=np.array([1.0]),
            source_size=(12, 12),
        )
        cfg = SynthesisConfig(detail_weight=7.0)
        _, grad, _ = synthesis_loss_grad(img, targets, net, cfg)
        eps = 1e-6
        for _ in range(2):
            i, j = rng.integers(0, 12, size=2)
            p = img.pixels.copy()
            p[i, j, 0] += eps
            fp, _, _ = synthesis_loss_grad(ImageBuffer(p), targets, net, cfg)
            p[i, j, 0] -= 2 * eps
            fmv, _, _ = synthesis_loss_grad(ImageBuffer(p), targets, net, cfg)
            fd = (fp - fmv) / (2 * eps)
            rel = abs(fd - grad[i, j, 0]) / max(abs(fd), abs(grad[i, j, 0]), 1e-10)
            worst = max(worst, rel)
        cases += 1
    elapsed = time.monotonic() - start
    report(
        "gradient suite (conv/relu/pool/Gram + synthesis loss vs central differences)",
        cases >= 20 and worst < 1e-4 and elapsed < 60,
        f"{cases} cases, worst rel {worst:.2e}, {elapsed:.1f}s",
    )


def test_planted_convex_recovery(toy_net, pattern_db_textures):
    start = time.monotonic()
    mask = center_mask()
    stacks = masked_gram_database(pattern_db_textures, mask, toy_net, GRAM_LAYERS)
    w_true = np.array([0.55, 0.25, 0.2, 0, 0, 0, 0, 0])
    target = [sum(w_true[k] * stacks[k][l] for k in range(8)) for l in range(len(GRAM_LAYERS))]
    w8 = solve_simplex_lsq(target, stacks)
    err8 = float(np.max(np.abs(w8 - w_true)))

    # K=3 cross-check against an exhaustive 1e-3-step grid on the simplex
    stacks3 = stacks[:3]
    w3_true = np.array([0.613, 0.204, 0.183])
    target3 = [sum(w3_true[k] * stacks3[k][l] for k in range(3)) for l in range(len(GRAM_LAYERS))]
    w3 = solve_simplex_lsq(target3, stacks3)

    a = np.stack([np.concatenate([s[l].ravel() for l in range(len(GRAM_LAYERS))]) for s in stacks3], axis=1)
    b = np.concatenate([t.ravel() for t in target3])
    step = 1e-3
    g1 = np.arange(0.0, 1.0 + step / 2, step)
    best_val, best_w = np.inf, None
    chunk = 2000
    for lo in range(0, g1.size, chunk):
        w1 = g1[lo : lo + chunk]
        for v2 in g1:
            pairs = w1[w1 + v2 <= 1.0 + 1e-12]
            if pairs.size == 0:
                continue
            ws = np.stack([pairs, np.full(pairs.size, v2), 1.0 - pairs - v2], axis=1)
            vals = np.sum((ws @ a.T - b) ** 2, axis=1)
            k = int(np.argmin(vals))
            if vals[k] < best_val:
                best_val, best_w = float(vals[k]), ws[k]
    err3 = float(np.max(np.abs(w3 - w3_true)))
    obj3 = float(np.sum((a @ w3 - b) ** 2))
    elapsed = time.monotonic() - start
    report(
        "planted convex recovery (K=8 direct, K=3 vs grid oracle)",
        err8 < 1e-3 and err3 < 1e-3 and obj3 <= best_val + 1e-12 and np.max(np.abs(w3 - best_w)) <= 2e-3 and elapsed < 60,
        f"K=8 linf {err8:.1e}, K=3 linf {err3:.1e}, grid gap {best_val - obj3:.1e}, {elapsed:.1f}s",
    )


def test_self_identification_and_constraint_behavior(toy_net, pattern_db_textures):
    mask = center_mask()
    stacks = masked_gram_database(pattern_db_textures, mask, toy_net, GRAM_LAYERS)
    me = input_masked_stack(pattern_db_textures[2], mask, toy_net, GRAM_LAYERS)
    w, _ = fit_convex_weights(me, stacks, mode="convex")
    corrupt = [1.6 * stacks[0][l] - 0.6 * stacks[1][l] for l in range(len(GRAM_LAYERS))]
    w_un, _ = fit_convex_weights(corrupt, stacks, mode="unconstrained")
    ok = (
        w[2] >= 0.95
        and np.all(w >= 0.0)
        and abs(float(w.sum()) - 1.0) < 1e-9
        and float(w_un.min()) < 0.0
    )
    report(
        "self-identification and convex/unconstrained contrast",
        ok,
        f"self weight {w[2]:.4f}, min unconstrained {w_un.min():.3f}",
    )


def test_fitting_round_trip(toy_model):
    start = time.monotonic()
    sc = make_scene(toy_model, size=256, seed=3)
    init = default_init_params(toy_model, sc["image"])
    rep = fit_model(sc["image"], sc["landmarks"], sc["mask"], toy_model, init)
    elapsed = time.monotonic() - start
    from texface.render import project_points, render_synth

    refit, _ = render_synth(toy_model, rep.params, 256, 256)
    m = sc["mask"]
    rmse = float(np.sqrt(np.mean((refit.pixels[m] - sc["image"].pixels[m]) ** 2)))
    p = rep.params
    verts, _ = evaluate_pca(toy_model, p.alpha_id, p.alpha_exp, p.alpha_albedo)
    cam = verts @ quat_to_matrix(p.quat).T + p.translation
    pts, _ = project_points(p.focal, p.principal, np.eye(3), np.zeros(3), cam[sc["landmarks"].vertex_indices])
    lan = float(np.sqrt(np.mean(np.sum((pts - sc["landmarks"].points) ** 2, axis=1))))
    report(
        "fitting round trip at 256^2",
        rmse < 2.0 / 255.0 and lan < 1.0 and elapsed < 120,
        f"image RMSE {rmse:.2e}, landmark RMSE {lan:.2e}px, {elapsed:.1f}s",
    )


def test_shading_factorization(toy_model, scene):
    truth = scene["truth"]
    partial = extract_partial_albedo(scene["image"], truth, scene["mask"], toy_model, 128)
    _, albedo = evaluate_pca(toy_model, truth.alpha_id, truth.alpha_exp, truth.alpha_albedo)
    uv = rasterize_uv(toy_model, 128)
    ref = np.zeros((128, 128, 3))
    cov = uv.coverage
    tris = toy_model.triangles[uv.tri[cov]]
    ref[cov] = np.einsum("pk,pkc->pc", uv.bary[cov], albedo[tris])
    valid = partial.validity & cov
    err = float(np.max(np.abs(partial.image.pixels[valid] - ref[valid])))
    report("shading factorization on noise-free input", err < 1e-3, f"max albedo error {err:.1e}")


def test_synthesis_fixed_point_and_convergence(toy_net):
    start = time.monotonic()
    sharp = pattern_texture(3, size=128)

    layers = tuple(dict.fromkeys(GRAM_LAYERS + ("conv4_1",)))
    sharp_luma = ImageBuffer(color_convert(sharp, "rgb-to-yiq").pixels[:, :, :1])
    fm = forward(toy_net, sharp_luma, layers=layers)
    targets = TargetSet(
        gram_hat=dict(zip(GRAM_LAYERS, gram_stack(fm, GRAM_LAYERS))),
        feat_hat={"conv4_1": fm["conv4_1"].copy()},
        weights=np.array([1.0]),
        source_size=(128, 128),
    )

    # fixed point: start at the global minimum, stay there
    fixed = synthesize(sharp, targets, toy_net, SynthesisConfig(max_iterations=200))
    y_sharp = color_convert(sharp, "rgb-to-yiq").pixels[:, :, 0]
    fp_err = float(np.max(np.abs(fixed.yiq[:, :, 0] - y_sharp)))

    # blurred init toward the sharp target
    blurred = resize(downscale_block(sharp, 4), 128, 128)
    res = synthesize(blurred, targets, toy_net, SynthesisConfig(max_iterations=200))
    first, last = res.trace[0][1], res.trace[-1][1]
    reduction = 1.0 - last / first
    yiq0 = color_convert(blurred, "rgb-to-yiq").pixels
    chroma_ok = np.array_equal(res.yiq[:, :, 1], yiq0[:, :, 1]) and np.array_equal(res.yiq[:, :, 2], yiq0[:, :, 2])
    elapsed = time.monotonic() - start
    report(
        "synthesis fixed point and 128^2 convergence",
        fp_err <= 1e-6 and reduction >= 0.99 and chroma_ok and elapsed < 1800,
        f"fixed-point drift {fp_err:.1e}, loss reduction {100 * reduction:.2f}%, chroma bit-equal {chroma_ok}, {elapsed:.0f}s",
    )


def test_layer_count_ablation(toy_net, pattern_db, pattern_db_textures):
    from texface.analysis import CorrelationDatabase, DbEntry, assemble_targets
    from texface.featurenet import LayerSelection

    w = np.zeros(8)
    w[3] = 1.0
    lowfreq = resize(downscale_block(pattern_db_textures[3], 4), 64, 64)
    detail = {}
    for layers in (GRAM_LAYERS, GRAM_LAYERS[:1]):
        sub = CorrelationDatabase(
            gram_layers=layers,
            entries=[DbEntry(e.entry_id, {l: e.grams[l] for l in layers}) for e in pattern_db.entries],
        )
        sel = LayerSelection(gram_layers=layers, feature_layers=("conv4_1",))
        targets = assemble_targets(w, sub, lowfreq, toy_net, sel)
        res = synthesize(lowfreq, targets, toy_net, SynthesisConfig(max_iterations=120))
        detail[len(layers)] = laplacian_variance(res.image)
    report(
        "layer-count ablation (5 Gram layers vs 1)",
        detail[5] >= detail[1],
        f"5-layer {detail[5]:.2e} vs 1-layer {detail[1]:.2e}",
    )


def test_persistence_bit_exact_and_crc(tmp_path, toy_net, pattern_db):
    g1, g2 = tmp_path / "a.grdb", tmp_path / "b.grdb"
    save_correlations(pattern_db, g1)
    save_correlations(load_correlations(g1), g2)
    grdb_ok = g1.read_bytes() == g2.read_bytes()

    v1, v2 = tmp_path / "a.vggw", tmp_path / "b.vggw"
    save_weights(toy_net, v1)
    save_weights(load_weights(v1), v2)
    vggw_ok = v1.read_bytes() == v2.read_bytes()

    blob = bytearray(g1.read_bytes())
    blob[len(blob) // 2] ^= 1
    g1.write_bytes(bytes(blob))
    try:
        load_correlations(g1)
        grdb_reject = False
    except CorrelationFormatError:
        grdb_reject = True
    blob = bytearray(v1.read_bytes())
    blob[len(blob) // 2] ^= 1
    v1.write_bytes(bytes(blob))
    try:
        load_weights(v1)
        vggw_reject = False
    except WeightFormatError:
        vggw_reject = True
    report(
        "persistence round trips and CRC rejection",
        grdb_ok and vggw_ok and grdb_reject and vggw_reject,
        f"grdb bit-exact {grdb_ok}, vggw bit-exact {vggw_ok}, rejection {grdb_reject and vggw_reject}",
    )


def test_pipeline_determinism(tmp_path):
    from texface.cli import main

    subprocess.run(
        [
            sys.executable,
            str(REPO / "scripts" / "make_fixtures.py"),
            "--out", str(tmp_path),
            "--size", "96",
            "--texture-size", "64",
            "--db-size", "4",
        ],
        check=True,
    )
    cfg = str(tmp_path / "pipeline.cfg")
    codes = []
    for out in ("runA", "runB"):
        codes.append(main(["pipeline", "--config", cfg, "--out", str(tmp_path / out), "--iterations", "60"]))
    mA = (tmp_path / "runA" / "manifest.txt").read_text()
    mB = (tmp_path / "runB" / "manifest.txt").read_text()
    report(
        "pipeline determinism (bit-identical manifests)",
        codes == [0, 0] and mA == mB,
        f"exit codes {codes}, manifests equal {mA == mB}",
    )
