"""VGG-19 checkpoint conversion to the VGGW binary weight format.

The VGGW layout (little-endian): magic "VGGW", version u32, preprocessing
means 3xf32, layer count u32, then per conv layer {name length u16, name,
out_ch u32, in_ch u32, kh u32, kw u32, weights f32 row-major
(out, in, kh, kw), bias f32[out]}, and a trailing CRC32 over everything
between the magic and the checksum.

The consumer subtracts the stored means from [0, 1] RGB input but does not
divide by the channel standard deviations, so the source model's std is
folded into the first conv layer's weights here.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

VGGW_MAGIC = b"VGGW"
VGGW_VERSION = 1

# torchvision ImageNet preprocessing constants for [0, 1] RGB input.
PREPROCESS_MEAN = (0.485, 0.456, 0.406)
PREPROCESS_STD = (0.229, 0.224, 0.225)

# torchvision vgg19 `features` indices of the 16 conv layers, in order.
LAYER_MAP = {
    0: "conv1_1", 2: "conv1_2",
    5: "conv2_1", 7: "conv2_2",
    10: "conv3_1", 12: "conv3_2", 14: "conv3_3", 16: "conv3_4",
    19: "conv4_1", 21: "conv4_2", 23: "conv4_3", 25: "conv4_4",
    28: "conv5_1", 30: "conv5_2", 32: "conv5_3", 34: "conv5_4",
}

# output-channel width per block of the VGG-19 architecture
BLOCK_WIDTHS = {1: 64, 2: 128, 3: 256, 4: 512, 5: 512}

PROBE_VALUES = 16


class ExportError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    source_sha256: str
    layer_map: dict  # source key -> canonical conv name
    means: tuple
    output_crc32: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "source_sha256": self.source_sha256,
                "layer_map": self.layer_map,
                "means": list(self.means),
                "output_crc32": self.output_crc32,
            },
            indent=2,
            sort_keys=True,
        )


def probe_image() -> np.ndarray:
    """The fixed 64x64 RGB probe, values in [0, 1]; fully procedural so
    every toolchain can regenerate the identical array."""
    y, x = np.mgrid[0:64, 0:64] / 63.0
    r = 0.5 + 0.35 * np.sin(2 * np.pi * (3 * x + y))
    g = 0.5 + 0.35 * np.cos(2 * np.pi * (x - 2 * y))
    b = 0.2 + 0.6 * x * y + 0.15 * np.sin(2 * np.pi * 5 * x)
    img = np.stack([r, g, b], axis=2)
    return np.clip(img, 0.0, 1.0)


def load_source(path) -> dict:
    """Conv tensors of a VGG-19 checkpoint keyed by canonical layer name."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"source checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    convs = {}
    seen = set()
    for key, tensor in state.items():
        if not key.startswith("features."):
            continue  # classifier weights are not part of the feature extractor
        parts = key.split(".")
        idx = int(parts[1])
        kind = parts[2]
        if kind not in ("weight", "bias"):
            raise ExportError(f"unmapped layer parameter: {key}")
        if idx not in LAYER_MAP:
            raise ExportError(f"unmapped layer: {key}")
        name = LAYER_MAP[idx]
        convs.setdefault(name, {})[kind] = tensor.detach().cpu().numpy()
        seen.add(name)
    missing = [name for name in LAYER_MAP.values() if name not in seen]
    if missing:
        raise ExportError(f"missing conv layers: {missing}")
    for name, pair in convs.items():
        if "weight" not in pair or "bias" not in pair:
            raise ExportError(f"layer {name}: weight/bias pair incomplete")
        w, b = pair["weight"], pair["bias"]
        block = int(name[4])
        width = BLOCK_WIDTHS[block]
        if w.ndim != 4 or w.shape[2:] != (3, 3):
            raise ExportError(f"layer {name}: expected 3x3 conv weights, got {w.shape}")
        if w.shape[0] != width or b.shape != (width,):
            raise ExportError(f"layer {name}: dimension mismatch {w.shape} / {b.shape}")
    return convs


def folded_weights(convs: dict) -> dict:
    """Fold the preprocessing std into conv1_1 so consumers only subtract means."""
    out = {name: (pair["weight"].copy(), pair["bias"].copy()) for name, pair in convs.items()}
    w1, b1 = out["conv1_1"]
    std = np.asarray(PREPROCESS_STD, dtype=w1.dtype)
    out["conv1_1"] = ((w1 / std[None, :, None, None]).astype(w1.dtype), b1)
    return out


def write_vggw(convs: dict, path) -> int:
    """Serialize folded conv layers; returns the CRC32 of the body."""
    body = bytearray()
    body += struct.pack("<I", VGGW_VERSION)
    body += struct.pack("<3f", *PREPROCESS_MEAN)
    body += struct.pack("<I", len(LAYER_MAP))
    for name in LAYER_MAP.values():
        weight, bias = convs[name]
        encoded = name.encode()
        out_ch, in_ch, kh, kw = weight.shape
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<4I", out_ch, in_ch, kh, kw)
        body += np.ascontiguousarray(weight, dtype="<f4").tobytes()
        body += np.ascontiguousarray(bias, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(VGGW_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))
    return crc


def reference_activations(convs: dict, image: np.ndarray) -> dict:
    """Post-ReLU activations of every conv layer on a [0, 1] HWC image,
    computed with torch in double precision from the folded weights."""
    mean = np.asarray(PREPROCESS_MEAN, dtype=np.float64)
    x = (image.astype(np.float64) - mean).transpose(2, 0, 1)[None]
    x = torch.from_numpy(np.ascontiguousarray(x))
    acts = {}
    prev_block = None
    for name in LAYER_MAP.values():
        block = int(name[4])
        if prev_block is not None and block != prev_block:
            x = torch.nn.functional.max_pool2d(x, 2)
        weight, bias = convs[name]
        # f32 storage precision of the VGGW file, accumulated in f64
        w = torch.from_numpy(weight.astype(np.float32).astype(np.float64))
        b = torch.from_numpy(bias.astype(np.float32).astype(np.float64))
        x = torch.nn.functional.relu(torch.nn.functional.conv2d(x, w, b, padding=1))
        acts[name] = x[0].numpy()
        prev_block = block
    return acts


def activation_summary(act: np.ndarray) -> dict:
    flat = act.ravel()
    idx = np.linspace(0, flat.size - 1, PROBE_VALUES).round().astype(int)
    return {
        "shape": list(act.shape),
        "mean": float(flat.mean()),
        "max": float(flat.max()),
        "probe_indices": idx.tolist(),
        "probe_values": flat[idx].tolist(),
    }


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def export_weights(source, out, fixtures_dir) -> ExportManifest:
    """Convert `source` (torch VGG-19 checkpoint) to a VGGW file at `out`
    and write golden activation fixtures for the probe image."""
    source, out, fixtures_dir = Path(source), Path(out), Path(fixtures_dir)
    convs = load_source(source)
    folded = folded_weights(convs)
    out.parent.mkdir(parents=True, exist_ok=True)
    crc = write_vggw(folded, out)

    fixtures_dir.mkdir(parents=True, exist_ok=True)
    image = probe_image()
    from PIL import Image

    Image.fromarray((image * 255.0 + 0.5).astype(np.uint8)).save(fixtures_dir / "probe.png")
    acts = reference_activations(folded, image)
    golden = {name: activation_summary(act) for name, act in acts.items()}
    with open(fixtures_dir / "golden_activations.json", "w") as fh:
        json.dump(golden, fh, indent=2, sort_keys=True)

    manifest = ExportManifest(
        source_sha256=sha256_file(source),
        layer_map={f"features.{idx}": name for idx, name in LAYER_MAP.items()},
        means=PREPROCESS_MEAN,
        output_crc32=crc,
    )
    with open(fixtures_dir / "manifest.json", "w") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest
