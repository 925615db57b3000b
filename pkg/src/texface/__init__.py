"""Complete high-frequency facial albedo textures from a single photograph.

The library fits a PCA morphable face model with spherical-harmonic
lighting to a masked photograph, lifts the visible region into UV space,
matches its feature correlations against a texture database under convex
constraints, and synthesizes the missing detail by quasi-Newton descent
on the luma channel."""

from .analysis import (
    CorrelationDatabase,
    TargetSet,
    assemble_targets,
    build_correlation_db,
    fit_convex_weights,
    input_masked_stack,
    load_correlations,
    mask_out,
    masked_gram_database,
    save_correlations,
)
from .dbtool import SubjectInput, TextureDatabase, build_texture_database, remove_specular_suv
from .featurenet import (
    LayerSelection,
    NetworkSpec,
    backward_to_input,
    default_layer_selection,
    forward,
    gram,
    gram_stack,
    load_weights,
    make_toy_net,
    save_weights,
)
from .fitting import (
    FitReport,
    PartialTexture,
    bake_lowfreq_texture,
    extract_partial_albedo,
    fit_model,
)
from .image import ImageBuffer, color_convert, load_mask, load_png, resize, save_mask, save_png
from .lbfgs import LbfgsResult, lbfgs_minimize
from .morphable import (
    Landmarks,
    MorphableModel,
    SceneParams,
    evaluate_pca,
    load_landmarks,
    load_model,
    make_toy_model,
    save_landmarks,
    save_model,
    toy_landmark_indices,
)
from .pipeline import PipelineConfig, run_pipeline
from .render import render_synth
from .simplex import project_to_simplex, solve_simplex_lsq
from .synthesis import (
    SynthesisConfig,
    SynthesisResult,
    laplacian_variance,
    synthesis_loss_grad,
    synthesize,
)

__version__ = "0.1.0"
