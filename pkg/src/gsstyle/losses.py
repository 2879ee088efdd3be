"""Photometric and feature-space losses with analytic image gradients.

Three terms feed the appearance optimizer: mean absolute error against an
edited target, a perceptual distance over unit-normalized encoder features,
and a nearest-neighbor feature-matching term against the style image under
cosine distance (gradient taken with the matches frozen). ``total_loss``
combines them with non-negative weights, skipping zero-weighted terms
entirely.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import Encoder, FeatureMap, backward as encoder_backward, forward as encoder_forward
from .scene import ImageBuffer

NNFM_EPS = 1e-8
_NORM_EPS = 1e-10
_TINY = 1e-12


@dataclass
class LossWeights:
    w_l1: float = 1.0
    w_perceptual: float = 0.2
    w_nnfm: float = 0.5

    def __post_init__(self):
        if self.w_l1 < 0 or self.w_perceptual < 0 or self.w_nnfm < 0:
            raise ValueError("loss weights must be non-negative")
        if self.w_l1 == 0 and self.w_perceptual == 0 and self.w_nnfm == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    total: float
    l1: float
    perceptual: float
    nnfm: float
    grad_image: ImageBuffer = field(repr=False)


def l1_loss(render: ImageBuffer, target: ImageBuffer) -> tuple[float, ImageBuffer]:
    """Mean absolute error over all pixel-channels; subgradient sign(0) = 0."""
    if render.data.shape != target.data.shape:
        raise ValueError(f"shape mismatch {render.data.shape} vs {target.data.shape}")
    diff = render.data - target.data
    count = diff.size
    loss = float(np.abs(diff).sum() / count)
    grad = np.sign(diff) / count
    return loss, ImageBuffer(grad)


def _unit_normalize(feat: np.ndarray):
    norm = np.sqrt((feat * feat).sum(axis=-1, keepdims=True))
    return feat / (norm + _NORM_EPS), norm


def _unit_normalize_backward(feat, norm, grad_unit):
    # u = f / (n + eps); du/df = I/(n+eps) - f f^T / (n (n+eps)^2)
    dot = (feat * grad_unit).sum(axis=-1, keepdims=True)
    n_safe = np.maximum(norm, _TINY)
    return grad_unit / (norm + _NORM_EPS) - feat * dot / (n_safe * (norm + _NORM_EPS) ** 2)


def load_layer_weights(manifest_path) -> dict[str, np.ndarray]:
    """Per-channel linear weights for the perceptual distance, stored in the
    same manifest-plus-blob shape as encoder weights: a checksummed float32
    blob and entries {"name": <layer>, "channels": n, "offset": k}."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    blob_path = manifest_path.parent / manifest["blob"]
    blob_bytes = blob_path.read_bytes()
    digest = hashlib.sha256(blob_bytes).hexdigest()
    if digest != manifest["sha256"]:
        raise ValueError(f"{blob_path}: checksum mismatch")
    blob = np.frombuffer(blob_bytes, dtype="<f4")
    weights = {}
    for entry in manifest["layers"]:
        n, offset = entry["channels"], entry["offset"]
        if offset + n > blob.size:
            raise ValueError(f"layer {entry['name']!r}: blob too small")
        vec = blob[offset:offset + n].astype(np.float64)
        if np.any(vec < 0):
            raise ValueError(f"layer {entry['name']!r}: weights must be non-negative")
        weights[entry["name"]] = vec
    return weights


def save_layer_weights(weights: dict[str, np.ndarray], manifest_path) -> None:
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    entries, parts, offset = [], [], 0
    for name in sorted(weights):
        vec = np.asarray(weights[name], dtype="<f4").ravel()
        entries.append({"name": name, "channels": int(vec.size), "offset": offset})
        parts.append(vec)
        offset += vec.size
    blob_bytes = (np.concatenate(parts) if parts else np.zeros(0, "<f4")).tobytes()
    blob_path.write_bytes(blob_bytes)
    manifest_path.write_text(json.dumps({
        "blob": blob_path.name,
        "sha256": hashlib.sha256(blob_bytes).hexdigest(),
        "layers": entries,
    }, indent=1, sort_keys=True))


def perceptual_loss(
    encoder: Encoder,
    render: ImageBuffer,
    target: ImageBuffer,
    layer_weights: dict[str, np.ndarray | None],
) -> tuple[float, ImageBuffer]:
    """Sum over layers of the spatial mean of weighted squared differences
    between unit-normalized feature vectors. layer_weights maps layer name to
    a per-channel weight vector (None = all ones)."""
    if not layer_weights:
        raise ValueError("perceptual_loss needs at least one layer")
    layers = sorted(layer_weights)
    feats_r = encoder_forward(encoder, render, layers)
    feats_t = encoder_forward(encoder, target, layers)

    total = 0.0
    grad_maps = {}
    for name in layers:
        fr = feats_r[name].data
        ft = feats_t[name].data
        w = layer_weights[name]
        w = np.ones(fr.shape[-1]) if w is None else np.asarray(w, dtype=np.float64)
        ur, nr = _unit_normalize(fr)
        ut, _ = _unit_normalize(ft)
        delta = ur - ut
        spatial = fr.shape[0] * fr.shape[1]
        total += float((w * delta * delta).sum() / spatial)
        grad_unit = 2.0 * w * delta / spatial
        grad_maps[name] = FeatureMap(_unit_normalize_backward(fr, nr, grad_unit))

    grad_image = encoder_backward(encoder, render, grad_maps)
    return total, grad_image


def nnfm_match(feat_render: np.ndarray, feat_style: np.ndarray,
               eps: float = NNFM_EPS, block_rows: int = 128):
    """Nearest style feature per rendered feature under cosine distance.

    Row-blocked exhaustive search; per-pair arithmetic is identical to a
    plain double loop, so argmin ties resolve to the lowest linear index and
    results match an unblocked search bit for bit.
    """
    fr = feat_render.reshape(-1, feat_render.shape[-1])
    fs = feat_style.reshape(-1, feat_style.shape[-1])
    norm_r = np.sqrt((fr * fr).sum(axis=-1))
    norm_s = np.sqrt((fs * fs).sum(axis=-1))
    matches = np.empty(len(fr), dtype=np.int64)
    dists = np.empty(len(fr))
    for i0 in range(0, len(fr), block_rows):
        i1 = min(i0 + block_rows, len(fr))
        sims = (fr[i0:i1, None, :] * fs[None, :, :]).sum(axis=-1)
        d = 1.0 - sims / (norm_r[i0:i1, None] * norm_s[None, :] + eps)
        arg = d.argmin(axis=1)
        matches[i0:i1] = arg
        dists[i0:i1] = np.take_along_axis(d, arg[:, None], axis=1)[:, 0]
    return matches, dists


def compute_style_features(encoder: Encoder, style_image: ImageBuffer,
                           layer: str) -> FeatureMap:
    """Precompute (and cache at the caller) style features for nnfm_loss."""
    return encoder_forward(encoder, style_image, [layer])[layer]


def nnfm_loss(
    encoder: Encoder,
    render: ImageBuffer,
    style_image: ImageBuffer | None,
    layer: str,
    style_features: FeatureMap | None = None,
) -> tuple[float, ImageBuffer]:
    """Mean over rendered feature pixels of the minimum cosine distance to any
    style feature pixel; the gradient flows through the rendered features only,
    with the argmin held fixed."""
    if style_features is None:
        if style_image is None:
            raise ValueError("nnfm_loss needs a style image or precomputed features")
        style_features = compute_style_features(encoder, style_image, layer)

    feat_r = encoder_forward(encoder, render, [layer])[layer]
    fr = feat_r.data.reshape(-1, feat_r.channels)
    fs = style_features.data.reshape(-1, style_features.channels)
    if fr.shape[1] != fs.shape[1]:
        raise ValueError(
            f"feature channel mismatch: render {fr.shape[1]} vs style {fs.shape[1]}"
        )

    matches, dists = nnfm_match(fr, fs)
    n = len(fr)
    loss = float(dists.mean())

    matched = fs[matches]
    norm_r = np.sqrt((fr * fr).sum(axis=-1))
    norm_s = np.sqrt((matched * matched).sum(axis=-1))
    t = norm_r * norm_s + NNFM_EPS
    s = (fr * matched).sum(axis=-1)
    # dD/du = -v/t + (u.v) |v| u / (|u| t^2); zero-norm u gets a zero subgradient
    coeff = np.where(norm_r > _TINY, s * norm_s / (np.maximum(norm_r, _TINY) * t * t), 0.0)
    grad_flat = (-matched / t[:, None] + fr * coeff[:, None]) / n
    grad_flat = np.where(norm_r[:, None] > _TINY, grad_flat, 0.0)

    grad_map = FeatureMap(grad_flat.reshape(feat_r.data.shape))
    grad_image = encoder_backward(encoder, render, {layer: grad_map})
    return loss, grad_image


def total_loss(
    encoder: Encoder | None,
    render: ImageBuffer,
    edited_target: ImageBuffer | None,
    style_image: ImageBuffer | None,
    weights: LossWeights,
    *,
    perceptual_layer_weights: dict[str, np.ndarray | None] | None = None,
    nnfm_layer: str | None = None,
    nnfm_style_features: FeatureMap | None = None,
) -> LossReport:
    """Weighted sum of the three terms; zero-weighted terms are not evaluated."""
    grad = np.zeros_like(render.data)
    l1 = perceptual = nnfm = 0.0

    if weights.w_l1 > 0:
        if edited_target is None:
            raise ValueError("w_l1 > 0 requires a target image")
        l1, g = l1_loss(render, edited_target)
        grad += weights.w_l1 * g.data
    if weights.w_perceptual > 0:
        if encoder is None or edited_target is None:
            raise ValueError("w_perceptual > 0 requires an encoder and a target image")
        if not perceptual_layer_weights:
            raise ValueError("w_perceptual > 0 requires perceptual_layer_weights")
        perceptual, g = perceptual_loss(encoder, render, edited_target, perceptual_layer_weights)
        grad += weights.w_perceptual * g.data
    if weights.w_nnfm > 0:
        if encoder is None:
            raise ValueError("w_nnfm > 0 requires an encoder")
        if nnfm_layer is None:
            raise ValueError("w_nnfm > 0 requires nnfm_layer")
        nnfm, g = nnfm_loss(encoder, render, style_image, nnfm_layer,
                            style_features=nnfm_style_features)
        grad += weights.w_nnfm * g.data

    total = weights.w_l1 * l1 + weights.w_perceptual * perceptual + weights.w_nnfm * nnfm
    return LossReport(total=total, l1=l1, perceptual=perceptual, nnfm=nnfm,
                      grad_image=ImageBuffer(grad))
