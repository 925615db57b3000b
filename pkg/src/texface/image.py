"""Image buffers, PNG I/O and YIQ color conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

# NTSC RGB -> YIQ matrix; rows are Y, I, Q.
YIQ_MATRIX = np.array(
    [
        [0.299, 0.587, 0.114],
        [0.595716, -0.274453, -0.321263],
        [0.211456, -0.522591, 0.311135],
    ]
)
YIQ_MATRIX_INV = np.linalg.inv(YIQ_MATRIX)


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    """A (height, width, channels) float image, channels 1 or 3.

    Values are normalized intensities; they are clamped to [0, 1] when
    reading from or writing to PNG, but intermediate buffers (YIQ planes,
    unclamped renders) may hold values outside that range.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageError(f"expected (h, w, 1|3) pixels, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise ImageError("non-finite pixel values")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def clamped(self) -> "ImageBuffer":
        return ImageBuffer(np.clip(self.pixels, 0.0, 1.0))


def load_png(path) -> ImageBuffer:
    img = PILImage.open(path)
    if img.mode in ("I", "I;16", "I;16B"):
        arr = np.asarray(img, dtype=np.float64) / 65535.0
    else:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if len(img.getbands()) >= 3 else "L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return ImageBuffer(np.clip(arr, 0.0, 1.0))


def save_png(image: ImageBuffer, path, bitdepth: int = 8) -> None:
    arr = np.clip(image.pixels, 0.0, 1.0)
    if bitdepth == 16:
        if image.channels != 1:
            raise ImageError("16-bit export supported for single-channel only")
        data = np.round(arr[:, :, 0] * 65535.0).astype(np.uint16)
        PILImage.fromarray(data).save(path)
        return
    data = np.round(arr * 255.0).astype(np.uint8)
    if image.channels == 1:
        PILImage.fromarray(data[:, :, 0], mode="L").save(path)
    else:
        PILImage.fromarray(data, mode="RGB").save(path)


def load_mask(path) -> np.ndarray:
    """Single-channel PNG, nonzero = valid."""
    arr = np.asarray(PILImage.open(path).convert("L"))
    return arr > 0


def save_mask(mask: np.ndarray, path) -> None:
    PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def color_convert(image: ImageBuffer, direction: str) -> ImageBuffer:
    """Convert between RGB and YIQ with the fixed NTSC matrix."""
    if image.channels != 3:
        raise ImageError("color conversion requires a 3-channel image")
    if direction == "rgb-to-yiq":
        m = YIQ_MATRIX
    elif direction == "yiq-to-rgb":
        m = YIQ_MATRIX_INV
    else:
        raise ImageError(f"unknown direction {direction!r}")
    return ImageBuffer(image.pixels @ m.T)


def resize(image: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """Deterministic area/bilinear resample (PIL backed)."""
    px = np.clip(image.pixels, 0.0, 1.0)
    planes = []
    for c in range(px.shape[2]):
        pil = PILImage.fromarray(px[:, :, c].astype(np.float32), mode="F")
        method = (
            PILImage.Resampling.BOX
            if width < image.width or height < image.height
            else PILImage.Resampling.BILINEAR
        )
        planes.append(np.asarray(pil.resize((width, height), method), dtype=np.float64))
    return ImageBuffer(np.clip(np.stack(planes, axis=2), 0.0, 1.0))


def downscale_block(image: ImageBuffer, factor: int) -> ImageBuffer:
    """Exact block-average downscale; dimensions must divide by factor."""
    h, w = image.height, image.width
    if h % factor or w % factor:
        raise ImageError(f"size {w}x{h} not divisible by {factor}")
    px = image.pixels.reshape(h // factor, factor, w // factor, factor, image.channels)
    return ImageBuffer(px.mean(axis=(1, 3)))


def resize_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    pil = PILImage.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L")
    out = np.asarray(pil.resize((width, height), PILImage.Resampling.NEAREST))
    return out > 127
