"""Texture synthesis: match target features and Grams by L-BFGS on the luma channel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import TargetSet
from .featurenet import LayerSelection, NetworkSpec, backward_to_input, forward, gram
from .image import ImageBuffer, color_convert
from .lbfgs import lbfgs_minimize

DEFAULT_DETAIL_WEIGHT = 2000.0


class SynthesisError(RuntimeError):
    pass


@dataclass
class SynthesisConfig:
    detail_weight: float = DEFAULT_DETAIL_WEIGHT  # weight on the Gram term
    max_iterations: int = 1000
    history: int = 10
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.detail_weight < 0.0:
            raise SynthesisError("detail weight must be nonnegative")
        if self.max_iterations < 1:
            raise SynthesisError("need at least one iteration")


@dataclass
class SynthesisResult:
    image: ImageBuffer  # RGB, luma optimized, chroma untouched
    yiq: np.ndarray  # (h, w, 3); planes 1 and 2 are the init's chroma arrays
    trace: list = field(default_factory=list)  # (iteration, total, feature term, gram term)
    status: str = ""


def synthesis_loss_grad(image: ImageBuffer, targets: TargetSet, net: NetworkSpec, cfg: SynthesisConfig):
    """Loss and input-pixel gradient of the feature/Gram matching objective.

    loss = sum_{l in L_F} ||F^l - Fhat^l||_F^2
         + alpha * sum_{l in L_G} ||G^l - Ghat^l||_F^2
    Cotangents are 2(F - Fhat) on feature layers and (4 alpha / M)(G - Ghat) F
    on Gram layers; the gradient is the exact reverse-mode pullback.
    Returns (loss, gradient image array, term dict).
    """
    if (image.height, image.width) != targets.source_size:
        raise SynthesisError(
            f"image size {(image.height, image.width)} does not match targets {targets.source_size}"
        )
    feat_layers = tuple(targets.feat_hat)
    gram_layers = tuple(targets.gram_hat)
    all_layers = tuple(dict.fromkeys(feat_layers + gram_layers))
    fm = forward(net, image, layers=all_layers)

    loss_feat = 0.0
    loss_gram = 0.0
    cotangents = {}
    for name in all_layers:
        f = fm.matrix(name)
        cot = np.zeros_like(f)
        if name in targets.feat_hat:
            fhat = np.asarray(targets.feat_hat[name], dtype=np.float64).reshape(f.shape)
            d = f - fhat
            loss_feat += float(np.sum(d * d))
            cot += 2.0 * d
        if name in targets.gram_hat:
            ghat = np.asarray(targets.gram_hat[name], dtype=np.float64)
            g = gram(f)
            dg = g - ghat
            loss_gram += float(np.sum(dg * dg))
            cot += (4.0 * cfg.detail_weight / f.shape[1]) * (dg @ f)
        cotangents[name] = cot
    grad = backward_to_input(net, image, cotangents)
    total = loss_feat + cfg.detail_weight * loss_gram
    return total, grad, {"feature": loss_feat, "gram": cfg.detail_weight * loss_gram}


def synthesize(init: ImageBuffer, targets: TargetSet, net: NetworkSpec, cfg: SynthesisConfig | None = None) -> SynthesisResult:
    """L-BFGS synthesis starting from the low-frequency albedo.

    Only the Y channel of the YIQ decomposition is optimized; the I and Q
    planes of the result are the initialization's, bit for bit.  The final
    luma is clamped to [0, 1]; the best iterate is returned together with a
    per-iteration loss trace.
    """
    cfg = cfg or SynthesisConfig()
    if init.channels == 3:
        yiq0 = color_convert(init, "rgb-to-yiq").pixels
    else:
        yiq0 = np.concatenate([init.pixels, np.zeros_like(init.pixels), np.zeros_like(init.pixels)], axis=2)
    h, w = init.height, init.width
    y0 = yiq0[:, :, 0].copy()

    term_log = {}

    def objective(x):
        img = ImageBuffer(x.reshape(h, w, 1))
        loss, grad, terms = synthesis_loss_grad(img, targets, net, cfg)
        if not np.isfinite(loss):
            raise SynthesisError("non-finite synthesis loss")
        term_log[float(loss)] = (terms["feature"], terms["gram"])
        return loss, grad.ravel()

    f0, _ = objective(y0.ravel())
    feat0, gram0 = term_log[float(f0)]
    trace = [(0, float(f0), feat0, gram0)]

    def callback(it, x, f):
        feat, grm = term_log.get(float(f), (np.nan, np.nan))
        trace.append((it, float(f), feat, grm))

    result = lbfgs_minimize(
        objective,
        y0.ravel(),
        history=cfg.history,
        max_iter=cfg.max_iterations,
        tol=cfg.tolerance,
        callback=callback,
    )

    y_final = np.clip(result.x.reshape(h, w), 0.0, 1.0)
    yiq = np.stack([y_final, yiq0[:, :, 1], yiq0[:, :, 2]], axis=2)
    rgb = color_convert(ImageBuffer(yiq), "yiq-to-rgb")
    return SynthesisResult(image=rgb, yiq=yiq, trace=trace, status=result.status)


def laplacian_variance(image: ImageBuffer) -> float:
    """Variance of the 4-neighbor Laplacian of the luma plane; a simple
    high-frequency detail metric."""
    from .analysis import luma

    y = luma(image).pixels[:, :, 0]
    lap = -4.0 * y
    lap += np.roll(y, 1, axis=0) + np.roll(y, -1, axis=0) + np.roll(y, 1, axis=1) + np.roll(y, -1, axis=1)
    lap = lap[1:-1, 1:-1]
    return float(np.var(lap))
