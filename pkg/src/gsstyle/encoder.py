"""Convolutional feature extractor with loadable weights.

A small VGG-style stack: conv3x3 (stride 1, zero pad 1), relu, and 2x2
stride-2 max pooling, with per-channel input normalization. Weights live in
a JSON manifest plus a raw little-endian float32 blob; the manifest carries
a sha256 of the blob and per-conv element offsets.

Forward captures activations at named layers; backward pushes feature-space
gradients back to image space (conv transpose, relu gating by forward sign,
maxpool routed to the first-index argmax). Evaluation is pure: identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scene import ImageBuffer

_KINDS = ("conv3x3", "relu", "maxpool2")


class EncoderFormatError(ValueError):
    pass


@dataclass
class FeatureMap:
    """H x W x C float activation raster."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"feature map must be HxWxC, got {self.data.shape}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass
class LayerSpec:
    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0


@dataclass
class EncoderSpec:
    layers: list[LayerSpec]
    mean: np.ndarray  # (3,) input normalization
    std: np.ndarray   # (3,)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise EncoderFormatError("layer names must be unique")
        channels = 3
        for layer in self.layers:
            if layer.kind not in _KINDS:
                raise EncoderFormatError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.kind == "conv3x3":
                if layer.in_channels != channels:
                    raise EncoderFormatError(
                        f"layer {layer.name!r}: expects {layer.in_channels} input "
                        f"channels but receives {channels}"
                    )
                channels = layer.out_channels


class Encoder:
    """Immutable after load; forward/backward are safe to call concurrently."""

    def __init__(self, spec: EncoderSpec, weights: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.spec = spec
        self.weights = weights
        for layer in spec.layers:
            if layer.kind == "conv3x3":
                kernel, bias = weights[layer.name]
                expect = (layer.out_channels, layer.in_channels, 3, 3)
                if kernel.shape != expect or bias.shape != (layer.out_channels,):
                    raise EncoderFormatError(
                        f"layer {layer.name!r}: weight shape {kernel.shape} does not match {expect}"
                    )

    @property
    def layer_names(self) -> list[str]:
        return [l.name for l in self.spec.layers]

    def __len__(self):
        return len(self.spec.layers)


def _conv_size(layer: LayerSpec) -> int:
    return layer.out_channels * layer.in_channels * 9 + layer.out_channels


def load_encoder(manifest_path) -> Encoder:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())

    blob_path = manifest_path.parent / manifest["blob"]
    blob_bytes = blob_path.read_bytes()
    digest = hashlib.sha256(blob_bytes).hexdigest()
    if digest != manifest["sha256"]:
        raise EncoderFormatError(
            f"{blob_path}: checksum mismatch (manifest {manifest['sha256'][:12]}…, blob {digest[:12]}…)"
        )
    blob = np.frombuffer(blob_bytes, dtype="<f4")

    layers = []
    weights = {}
    for entry in manifest["layers"]:
        layer = LayerSpec(
            name=entry["name"],
            kind=entry["kind"],
            in_channels=entry.get("in_channels", 0),
            out_channels=entry.get("out_channels", 0),
        )
        layers.append(layer)
        if layer.kind == "conv3x3":
            offset = entry["offset"]
            size = _conv_size(layer)
            if offset + size > blob.size:
                raise EncoderFormatError(
                    f"layer {layer.name!r}: needs {size} floats at offset {offset}, "
                    f"blob has {blob.size}"
                )
            chunk = blob[offset:offset + size].astype(np.float64)
            ksize = layer.out_channels * layer.in_channels * 9
            kernel = chunk[:ksize].reshape(layer.out_channels, layer.in_channels, 3, 3)
            bias = chunk[ksize:]
            weights[layer.name] = (kernel, bias)

    norm = manifest.get("normalization", {})
    spec = EncoderSpec(
        layers=layers,
        mean=norm.get("mean", (0.0, 0.0, 0.0)),
        std=norm.get("std", (1.0, 1.0, 1.0)),
    )
    return Encoder(spec, weights)


def save_encoder(encoder: Encoder, manifest_path) -> None:
    """Write manifest + blob (fixture/asset preparation helper)."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    parts = []
    entries = []
    offset = 0
    for layer in encoder.spec.layers:
        entry = {"name": layer.name, "kind": layer.kind}
        if layer.kind == "conv3x3":
            kernel, bias = encoder.weights[layer.name]
            entry.update(in_channels=layer.in_channels, out_channels=layer.out_channels,
                         offset=offset)
            parts.append(kernel.astype("<f4").ravel())
            parts.append(bias.astype("<f4").ravel())
            offset += _conv_size(layer)
        entries.append(entry)
    blob = np.concatenate(parts) if parts else np.zeros(0, dtype="<f4")
    blob_bytes = blob.tobytes()
    blob_path.write_bytes(blob_bytes)
    manifest = {
        "blob": blob_path.name,
        "sha256": hashlib.sha256(blob_bytes).hexdigest(),
        "normalization": {"mean": list(encoder.spec.mean), "std": list(encoder.spec.std)},
        "layers": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _conv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, cin = x.shape
    padded = np.zeros((h + 2, w + 2, cin))
    padded[1:-1, 1:-1] = x
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    return np.einsum("hwcij,ocij->hwo", windows, kernel, optimize=True) + bias


def _conv_input_grad(grad_out: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w, cout = grad_out.shape
    padded = np.zeros((h + 2, w + 2, cout))
    padded[1:-1, 1:-1] = grad_out
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))
    flipped = kernel[:, :, ::-1, ::-1]
    return np.einsum("hwopq,ocpq->hwc", windows, flipped, optimize=True)


def _pool_forward(x: np.ndarray):
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    cropped = x[:h2 * 2, :w2 * 2]
    # window axis flattened row-major: (0,0), (0,1), (1,0), (1,1) — argmax
    # picks the first index, making backward routing deterministic.
    win = cropped.reshape(h2, 2, w2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2, w2, 4, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return out, arg, (h, w, c)


def _pool_backward(grad_out: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    h, w, c = in_shape
    h2, w2, _ = grad_out.shape
    grad_win = np.zeros((h2, w2, 4, c))
    np.put_along_axis(grad_win, arg[:, :, None, :], grad_out[:, :, None, :], axis=2)
    grad = np.zeros((h, w, c))
    grad[:h2 * 2, :w2 * 2] = (
        grad_win.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * 2, w2 * 2, c)
    )
    return grad


def forward(encoder: Encoder, image: ImageBuffer, capture) -> dict[str, FeatureMap]:
    """Run the stack, returning activations at the named layers."""
    capture = set(capture)
    unknown = capture - set(encoder.layer_names)
    if unknown:
        raise KeyError(f"unknown capture layer(s): {sorted(unknown)}")

    x = (image.data - encoder.spec.mean) / encoder.spec.std
    captured = {}
    for layer in encoder.spec.layers:
        if layer.kind == "conv3x3":
            kernel, bias = encoder.weights[layer.name]
            x = _conv_forward(x, kernel, bias)
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        else:
            x, _, _ = _pool_forward(x)
        if layer.name in capture:
            captured[layer.name] = FeatureMap(x.copy())
    return captured


def backward(encoder: Encoder, image: ImageBuffer,
             grad_maps: dict[str, FeatureMap]) -> ImageBuffer:
    """Propagate feature-space gradients down to dLoss/dPixel.

    grad_maps holds gradients w.r.t. the *outputs* of the named layers, as
    captured by a matching forward; a shape that no longer matches this
    image means the capture is stale.
    """
    unknown = set(grad_maps) - set(encoder.layer_names)
    if unknown:
        raise KeyError(f"unknown gradient layer(s): {sorted(unknown)}")

    if image.channels != 3:
        raise ValueError(f"encoder input must be 3-channel, got {image.channels}")
    x = (image.data - encoder.spec.mean) / encoder.spec.std
    stash = []
    for layer in encoder.spec.layers:
        if layer.kind == "conv3x3":
            kernel, bias = encoder.weights[layer.name]
            x = _conv_forward(x, kernel, bias)
            stash.append(None)
        elif layer.kind == "relu":
            stash.append(x > 0.0)
            x = np.maximum(x, 0.0)
        else:
            x, arg, in_shape = _pool_forward(x)
            stash.append((arg, in_shape))
        if layer.name in grad_maps:
            expect = x.shape
            got = grad_maps[layer.name].data.shape
            if got != expect:
                raise ValueError(
                    f"stale capture for layer {layer.name!r}: gradient shape {got} "
                    f"does not match activation shape {expect}"
                )

    grad = np.zeros_like(x)
    for i in range(len(encoder.spec.layers) - 1, -1, -1):
        layer = encoder.spec.layers[i]
        if layer.name in grad_maps:
            grad = grad + grad_maps[layer.name].data
        if layer.kind == "conv3x3":
            kernel, _ = encoder.weights[layer.name]
            grad = _conv_input_grad(grad, kernel)
        elif layer.kind == "relu":
            grad = grad * stash[i]
        else:
            arg, in_shape = stash[i]
            grad = _pool_backward(grad, arg, in_shape)

    return ImageBuffer(grad / encoder.spec.std)
