"""Sequential conv/relu/maxpool feature extractor with exact reverse-mode gradients.

The network is VGG-shaped: 3x3 (or any odd-size) stride-1 convolutions with
same-padding, ReLU after every convolution, and a 2x2 stride-2 max pool at
each block boundary.  Activations are recorded post-ReLU under the canonical
conv layer names (conv1_1 ... conv5_4).  All arithmetic is float64.
"""

from __future__ import annotations

import re
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .image import ImageBuffer

_CONV_NAME = re.compile(r"^conv(\d+)_(\d+)$")

VGGW_MAGIC = b"VGGW"
VGGW_VERSION = 1


class NetworkError(ValueError):
    pass


class WeightFormatError(NetworkError):
    pass


@dataclass
class ConvLayer:
    name: str
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or b.shape != (w.shape[0],):
            raise NetworkError(f"{self.name}: weight/bias dims inconsistent")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise NetworkError(f"{self.name}: kernel extents must be odd")
        if not _CONV_NAME.match(self.name):
            raise NetworkError(f"bad conv layer name {self.name!r}")
        self.weight = w
        self.bias = b

    @property
    def block(self) -> int:
        return int(_CONV_NAME.match(self.name).group(1))


@dataclass
class NetworkSpec:
    convs: list  # ConvLayer, in forward order
    mean: np.ndarray  # per-channel value subtracted from the input

    def __post_init__(self):
        names = [c.name for c in self.convs]
        if len(set(names)) != len(names):
            raise NetworkError("duplicate conv layer names")
        in_ch = self.convs[0].weight.shape[1]
        if in_ch != 3:
            raise NetworkError("first conv must take 3 input channels")
        prev_out = in_ch
        prev_block = self.convs[0].block
        for c in self.convs:
            if c.block < prev_block:
                raise NetworkError("conv blocks out of order")
            if c.weight.shape[1] != prev_out:
                raise NetworkError(f"{c.name}: expects {c.weight.shape[1]} input channels, got {prev_out}")
            prev_out = c.weight.shape[0]
            prev_block = c.block
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)

    @property
    def layer_names(self) -> list:
        return [c.name for c in self.convs]

    @property
    def num_pools(self) -> int:
        return len({c.block for c in self.convs})

    def sequence(self):
        """Forward plan: ('conv', layer) / ('pool',) items; pool closes each block."""
        plan = []
        prev_block = None
        for c in self.convs:
            if prev_block is not None and c.block != prev_block:
                plan.append(("pool",))
            plan.append(("conv", c))
            prev_block = c.block
        plan.append(("pool",))
        return plan


@dataclass
class FeatureMaps:
    """Post-ReLU activations keyed by conv layer name, stored (N, H, W)."""

    maps: dict

    def matrix(self, name) -> np.ndarray:
        a = self.maps[name]
        return a.reshape(a.shape[0], -1)

    def __contains__(self, name):
        return name in self.maps

    def __getitem__(self, name):
        return self.maps[name]


@dataclass(frozen=True)
class LayerSelection:
    gram_layers: tuple
    feature_layers: tuple

    def validate(self, net: NetworkSpec):
        known = set(net.layer_names)
        for name in (*self.gram_layers, *self.feature_layers):
            if name not in known:
                raise NetworkError(f"unknown layer {name!r}")

    @property
    def all_layers(self) -> tuple:
        seen = []
        for name in (*self.gram_layers, *self.feature_layers):
            if name not in seen:
                seen.append(name)
        return tuple(seen)


def default_layer_selection(net: NetworkSpec) -> LayerSelection:
    """First conv of every block for Grams; conv4_2 (or the deepest conv) for features."""
    gram = []
    seen_blocks = set()
    for c in net.convs:
        if c.block not in seen_blocks:
            gram.append(c.name)
            seen_blocks.add(c.block)
    feature = "conv4_2" if "conv4_2" in net.layer_names else net.convs[-1].name
    return LayerSelection(gram_layers=tuple(gram), feature_layers=(feature,))


# ---------------------------------------------------------------------------
# forward / backward primitives


def _conv_forward(x, layer: ConvLayer):
    cin, h, w = x.shape
    kh, kw = layer.weight.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(cin * kh * kw, h * w)
    wmat = layer.weight.reshape(layer.weight.shape[0], -1)
    y = wmat @ cols + layer.bias[:, None]
    return y.reshape(-1, h, w)


def _conv_backward(dy, layer: ConvLayer, in_shape):
    cin, h, w = in_shape
    cout, _, kh, kw = layer.weight.shape
    ph, pw = kh // 2, kw // 2
    wmat = layer.weight.reshape(cout, -1)
    dcols = wmat.T @ dy.reshape(cout, h * w)
    dcols = dcols.reshape(cin, kh, kw, h, w)
    dxp = np.zeros((cin, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + h, j : j + w] += dcols[:, i, j]
    if ph or pw:
        return dxp[:, ph : h + ph, pw : w + pw]
    return dxp


def _pool_forward(x):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise NetworkError("pool input extents must be even")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=3)  # first-index tie break
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, arg


def _pool_backward(dy, arg, in_shape):
    c, h, w = in_shape
    dwin = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=3)
    return dwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


# ---------------------------------------------------------------------------
# network-level passes


def _prepare_input(net: NetworkSpec, image: ImageBuffer):
    """Replicate single-channel input, subtract means, pad to a pool-friendly size."""
    px = image.pixels
    x = np.repeat(px, 3, axis=2) if px.shape[2] == 1 else px
    x = x.transpose(2, 0, 1).astype(np.float64)
    unit = 2 ** net.num_pools
    _, h, w = x.shape
    if h < unit or w < unit:
        raise NetworkError(f"image {w}x{h} too small for {net.num_pools} pooling stages")
    pad_h = (-h) % unit
    pad_w = (-w) % unit
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    x = x - net.mean[:, None, None]
    return x, (h, w), (pad_h, pad_w)


def _run_forward(net: NetworkSpec, x, record, keep_cache):
    maps = {}
    cache = [] if keep_cache else None
    for item in net.sequence():
        if item[0] == "conv":
            layer = item[1]
            in_shape = x.shape
            y = _conv_forward(x, layer)
            mask = y > 0.0
            x = y * mask
            if keep_cache:
                cache.append(("conv", layer, in_shape, mask))
            if record is None or layer.name in record:
                maps[layer.name] = x.copy()
        else:
            if min(x.shape[1], x.shape[2]) < 2:
                break  # deepest resolution reached; nothing records below
            x, arg = _pool_forward(x)
            if keep_cache:
                cache.append(("pool", arg, None, None))
    return maps, cache


def forward(net: NetworkSpec, image: ImageBuffer, layers=None) -> FeatureMaps:
    """Post-ReLU activations at the requested conv layers (all convs if None)."""
    x, _, _ = _prepare_input(net, image)
    record = set(layers) if layers is not None else None
    if record is not None:
        unknown = record - set(net.layer_names)
        if unknown:
            raise NetworkError(f"unknown layers {sorted(unknown)}")
    maps, _ = _run_forward(net, x, record, keep_cache=False)
    return FeatureMaps(maps=maps)


def gram(feature_matrix: np.ndarray) -> np.ndarray:
    """Normalized Gram matrix F F^T / M for a (N, M) response matrix."""
    f = np.asarray(feature_matrix, dtype=np.float64)
    if f.ndim == 3:
        f = f.reshape(f.shape[0], -1)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise NetworkError(f"bad feature matrix shape {f.shape}")
    return (f @ f.T) / f.shape[1]


def gram_stack(fm: FeatureMaps, layers) -> list:
    return [gram(fm.matrix(name)) for name in layers]


def backward_to_input(net: NetworkSpec, image: ImageBuffer, cotangents: dict) -> np.ndarray:
    """Gradient of sum_l <cotangent_l, F^l> with respect to the input pixels.

    Cotangents are given per recorded (post-ReLU) layer as (N, M) or
    (N, H, W) arrays.  Returns an (h, w, channels) gradient matching the
    input image layout.
    """
    x, (h0, w0), (pad_h, pad_w) = _prepare_input(net, image)
    maps, cache = _run_forward(net, x, record=set(cotangents), keep_cache=True)
    for name, cot in cotangents.items():
        if name not in maps:
            raise NetworkError(f"layer {name!r} not reached by the forward pass")
        if np.asarray(cot).size != maps[name].size:
            raise NetworkError(f"cotangent for {name!r} has wrong size")

    g = None
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "conv":
            _, layer, in_shape, mask = entry
            if g is None:
                g = np.zeros(mask.shape)
            if layer.name in cotangents:
                g = g + np.asarray(cotangents[layer.name], dtype=np.float64).reshape(mask.shape)
            g = _conv_backward(g * mask, layer, in_shape)
        else:
            _, arg, _, _ = entry
            if g is None:
                continue
            out_shape = (g.shape[0], g.shape[1] * 2, g.shape[2] * 2)
            g = _pool_backward(g, arg, out_shape)
    if g is None:
        g = np.zeros_like(x)
    # fold replicate padding back onto the edge pixels
    if pad_h:
        g[:, h0 - 1, :] += g[:, h0:, :].sum(axis=1)
        g = g[:, :h0, :]
    if pad_w:
        g[:, :, w0 - 1] += g[:, :, w0:].sum(axis=2)
        g = g[:, :, :w0]
    g = g.transpose(1, 2, 0)
    if image.channels == 1:
        g = g.sum(axis=2, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# VGGW weight file format


def save_weights(net: NetworkSpec, path) -> None:
    body = bytearray()
    body += struct.pack("<I", VGGW_VERSION)
    body += struct.pack("<3f", *net.mean.astype(np.float32))
    body += struct.pack("<I", len(net.convs))
    for c in net.convs:
        name = c.name.encode()
        out_ch, in_ch, kh, kw = c.weight.shape
        body += struct.pack("<H", len(name)) + name
        body += struct.pack("<4I", out_ch, in_ch, kh, kw)
        body += c.weight.astype("<f4").tobytes()
        body += c.bias.astype("<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(VGGW_MAGIC)
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_weights(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != VGGW_MAGIC:
        raise WeightFormatError("not a VGGW weight file (bad magic)")
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WeightFormatError("checksum mismatch")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(body):
            raise WeightFormatError(f"truncated file while reading layer {current!r}")
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals

    current = "<header>"
    (version,) = take("<I")
    if version != VGGW_VERSION:
        raise WeightFormatError(f"unsupported VGGW version {version}")
    mean = np.array(take("<3f"), dtype=np.float64)
    (count,) = take("<I")
    convs = []
    for i in range(count):
        current = f"<layer {i}>"
        (name_len,) = take("<H")
        if off + name_len > len(body):
            raise WeightFormatError(f"truncated file while reading layer {current!r}")
        name = body[off : off + name_len].decode()
        off += name_len
        current = name
        out_ch, in_ch, kh, kw = take("<4I")
        n_w = out_ch * in_ch * kh * kw
        if off + 4 * (n_w + out_ch) > len(body):
            raise WeightFormatError(f"truncated file while reading layer {name!r}")
        weight = np.frombuffer(body, dtype="<f4", count=n_w, offset=off)
        off += 4 * n_w
        bias = np.frombuffer(body, dtype="<f4", count=out_ch, offset=off)
        off += 4 * out_ch
        try:
            convs.append(
                ConvLayer(name=name, weight=weight.reshape(out_ch, in_ch, kh, kw).astype(np.float64), bias=bias.astype(np.float64))
            )
        except ValueError as exc:
            raise WeightFormatError(f"layer {name!r}: declared dims mismatch") from exc
    if off != len(body):
        raise WeightFormatError("trailing bytes after the last layer record")
    return NetworkSpec(convs=convs, mean=mean)


# ---------------------------------------------------------------------------
# deterministic toy networks for tests and desk-scale runs


def make_toy_net(seed: int = 0, blocks=(4, 6, 8, 8, 8), convs_per_block=1, kernel: int = 3) -> NetworkSpec:
    """Small VGG-shaped network with smooth random weights (fixed seed)."""
    rng = np.random.default_rng(seed)
    convs = []
    in_ch = 3
    for b, out_ch in enumerate(blocks, start=1):
        for i in range(1, convs_per_block + 1):
            w = rng.normal(0.0, 1.0, size=(out_ch, in_ch, kernel, kernel))
            w /= np.sqrt(in_ch * kernel * kernel)
            bias = rng.normal(0.0, 0.05, size=out_ch)
            # float32-representable values so VGGW round trips are bit-exact
            w = w.astype(np.float32).astype(np.float64)
            bias = bias.astype(np.float32).astype(np.float64)
            convs.append(ConvLayer(name=f"conv{b}_{i}", weight=w, bias=bias))
            in_ch = out_ch
    return NetworkSpec(convs=convs, mean=np.zeros(3))
