import numpy as np
import pytest

from texface.analysis import build_correlation_db
from texface.featurenet import make_toy_net
from texface.fitting import fit_model
from texface.image import ImageBuffer
from texface.morphable import Landmarks, SceneParams, evaluate_pca, make_toy_model, toy_landmark_indices
from texface.render import project_points, quat_to_matrix, render_synth

GRAM_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")


def pattern_texture(i, size=64):
    """Strongly distinguishable striped texture; index selects frequency,
    orientation and base color."""
    y, x = np.mgrid[0:size, 0:size] / size
    rng = np.random.default_rng(100 + i)
    v = 0.5 + 0.3 * np.sin(2 * np.pi * (2 + i) * (x * np.cos(i * 0.7) + y * np.sin(i * 0.7)) + rng.uniform(0, 2 * np.pi))
    base = rng.uniform(0.3, 0.7, size=3)
    px = base[None, None, :] * 0.5 + v[:, :, None] * 0.5 + 0.02 * rng.standard_normal((size, size, 3))
    return ImageBuffer(np.clip(px, 0.0, 1.0))


def make_scene(model, size=256, seed=3):
    """Ground-truth parameters plus a noise-free render with landmarks."""
    rng = np.random.default_rng(seed)
    d_id, d_exp, d_al = model.dims
    quat = np.array([1.0, 0.05, -0.03, 0.02])
    quat /= np.linalg.norm(quat)
    truth = SceneParams(
        alpha_id=0.5 * rng.standard_normal(d_id),
        alpha_exp=0.5 * rng.standard_normal(d_exp),
        alpha_albedo=0.5 * rng.standard_normal(d_al),
        quat=quat,
        translation=np.array([0.02, -0.01, 2.6]),
        focal=1.65 * size,
        principal=np.array([(size - 1) / 2.0, (size - 1) / 2.0]),
        light=np.concatenate(
            [np.array([[1.1], [1.05], [1.0]]) / 0.28209479177387814, 0.15 * rng.standard_normal((3, 8))],
            axis=1,
        ),
    )
    image, vis = render_synth(model, truth, size, size)
    idx = toy_landmark_indices(model)
    verts, _ = evaluate_pca(model, truth.alpha_id, truth.alpha_exp, truth.alpha_albedo)
    cam = verts @ quat_to_matrix(truth.quat).T + truth.translation
    pts, _ = project_points(truth.focal, truth.principal, np.eye(3), np.zeros(3), cam[idx])
    return {
        "truth": truth,
        "image": image,
        "vis": vis,
        "mask": vis.coverage.copy(),
        "landmarks": Landmarks(vertex_indices=idx, points=pts),
    }


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model()


@pytest.fixture(scope="session")
def toy_net():
    return make_toy_net(seed=0)


@pytest.fixture(scope="session")
def tiny_net():
    return make_toy_net(seed=1, blocks=(3, 4), convs_per_block=2)


@pytest.fixture(scope="session")
def pattern_db_textures():
    return [pattern_texture(i) for i in range(8)]


@pytest.fixture(scope="session")
def pattern_db(pattern_db_textures, toy_net):
    return build_correlation_db(pattern_db_textures, [f"s{i}" for i in range(8)], toy_net, GRAM_LAYERS)


@pytest.fixture(scope="session")
def scene(toy_model):
    return make_scene(toy_model)


@pytest.fixture(scope="session")
def fit_report(toy_model, scene):
    """One full fit shared between the fitting tests and the acceptance run."""
    from texface.pipeline import default_init_params

    init = default_init_params(toy_model, scene["image"])
    return fit_model(scene["image"], scene["landmarks"], scene["mask"], toy_model, init)
