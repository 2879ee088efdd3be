"""Differentiable tile-based splat rendering.

Forward: project each Gaussian to an EWA 2D footprint, sort front-to-back
(depth, then primitive index for deterministic ties), alpha-composite per
pixel with a transmittance early-out, and emit color, accumulated alpha,
and alpha-normalized expected depth.

Backward: gradients of a pixel-color loss with respect to appearance only
(SH coefficients, optionally opacity logits). Geometry gradients are
deliberately absent; positions, scales, and rotations are never touched.

All screen-space math uses pixel centers at (col + 0.5, row + 0.5). The
per-Gaussian footprint radius is max(3 sigma-equivalent, the exact radius at
which alpha falls to the skip threshold), so tile culling never drops a
contribution the compositing rule would keep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene import (
    SH_C0,
    CameraView,
    GaussianScene,
    ImageBuffer,
    logistic,
    quaternion_to_matrix,
)

_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


@dataclass
class RenderOptions:
    near_clip: float = 0.01
    tile_size: int = 16
    alpha_clamp: float = 0.999
    alpha_skip: float = 1.0 / 255.0
    transmittance_stop: float = 1e-4
    covariance_dilation: float = 0.3
    trainable: str = "sh_only"  # or "sh_and_opacity"
    background: Sequence[float] | None = None  # overrides scene background

    def __post_init__(self):
        if self.trainable not in ("sh_only", "sh_and_opacity"):
            raise ValueError(f"unknown trainable set {self.trainable!r}")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")


@dataclass
class ProjectedGaussian:
    """Screen-space view of one Gaussian (element of ProjectedGaussians)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray
    source_index: int


class ProjectedGaussians:
    """Struct-of-arrays sequence of screen-space Gaussians, unsorted."""

    def __init__(self, mean2d, cov_a, cov_b, cov_c, depth, opacity, color,
                 source_index, bbox):
        self.mean2d = mean2d            # (M, 2)
        self.cov_a = cov_a              # cov2d = [[a, b], [b, c]]
        self.cov_b = cov_b
        self.cov_c = cov_c
        self.depth = depth              # (M,) camera-space z
        self.opacity = opacity          # (M,) sigma in (0, 1)
        self.color = color              # (M, 3) clamped SH colors
        self.source_index = source_index
        self.bbox = bbox                # (M, 4) inclusive pixel ranges col0, col1, row0, row1

    def __len__(self):
        return len(self.depth)

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            mean2d=self.mean2d[i],
            cov2d=np.array([[self.cov_a[i], self.cov_b[i]],
                            [self.cov_b[i], self.cov_c[i]]]),
            depth=float(self.depth[i]),
            opacity=float(self.opacity[i]),
            color=self.color[i],
            source_index=int(self.source_index[i]),
        )

    @property
    def cov2d(self) -> np.ndarray:
        m = np.empty((len(self), 2, 2))
        m[:, 0, 0] = self.cov_a
        m[:, 0, 1] = m[:, 1, 0] = self.cov_b
        m[:, 1, 1] = self.cov_c
        return m


@dataclass
class RenderOutput:
    color: ImageBuffer
    alpha: ImageBuffer
    depth: ImageBuffer
    per_pixel_contrib_count: np.ndarray = field(repr=False)


@dataclass
class AppearanceGradients:
    d_sh: np.ndarray                      # (N, B, 3)
    d_opacity_logit: np.ndarray | None    # (N,) when trainable includes opacity


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, (N, (degree+1)^2), for unit directions (N, 3)."""
    n = dirs.shape[0]
    basis = np.empty((n, (degree + 1) ** 2), dtype=np.float64)
    basis[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        basis[:, 1] = -_SH_C1 * y
        basis[:, 2] = _SH_C1 * z
        basis[:, 3] = -_SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        basis[:, 4] = _SH_C2[0] * xy
        basis[:, 5] = _SH_C2[1] * yz
        basis[:, 6] = _SH_C2[2] * (2.0 * zz - xx - yy)
        basis[:, 7] = _SH_C2[3] * xz
        basis[:, 8] = _SH_C2[4] * (xx - yy)
    if degree >= 3:
        basis[:, 9] = _SH_C3[0] * y * (3.0 * xx - yy)
        basis[:, 10] = _SH_C3[1] * xy * z
        basis[:, 11] = _SH_C3[2] * y * (4.0 * zz - xx - yy)
        basis[:, 12] = _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        basis[:, 13] = _SH_C3[4] * x * (4.0 * zz - xx - yy)
        basis[:, 14] = _SH_C3[5] * z * (xx - yy)
        basis[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return basis


def _view_directions(scene: GaussianScene, view: CameraView) -> np.ndarray:
    d = scene.positions.astype(np.float64) - view.camera_center
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(norm > 1e-12, norm, 1.0)


def evaluate_sh_colors(scene: GaussianScene, view: CameraView):
    """Per-primitive RGB toward this camera: raw 0.5 + basis @ sh, clamped at 0.

    Returns (clamped colors (N, 3), basis (N, B), raw colors (N, 3)); the raw
    values carry the clamp mask the backward pass needs.
    """
    basis = sh_basis(_view_directions(scene, view), scene.sh_degree)
    raw = 0.5 + np.einsum("nb,nbc->nc", basis, scene.sh_coeffs.astype(np.float64))
    return np.maximum(raw, 0.0), basis, raw


def _footprint_radius_sq(opacity: np.ndarray, alpha_skip: float) -> np.ndarray:
    # Exact alpha-skip cutoff, never below the conventional 3-sigma ellipse.
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = 2.0 * np.log(np.maximum(opacity, 1e-12) / max(alpha_skip, 1e-12))
    return np.maximum(9.0, exact)


def project(scene: GaussianScene, view: CameraView, near_clip: float = 0.01,
            covariance_dilation: float = 0.3,
            alpha_skip: float = 1.0 / 255.0) -> ProjectedGaussians:
    """EWA-project a scene; culls primitives behind near_clip or fully off-screen."""
    n = len(scene)
    rot = view.rotation
    p_cam = scene.positions.astype(np.float64) @ rot.T + view.translation
    z = p_cam[:, 2]
    in_front = z > near_clip

    idx = np.nonzero(in_front)[0]
    if idx.size == 0:
        return _empty_projection()

    p = p_cam[idx]
    z = z[idx]
    x, y = p[:, 0], p[:, 1]

    mean2d = np.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], axis=1)

    rq = quaternion_to_matrix(scene.rotations[idx])
    s = np.exp(scene.log_scales[idx].astype(np.float64))
    m = rq * s[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    cov_cam = np.einsum("ij,njk,lk->nil", rot, cov3d, rot)

    inv_z = 1.0 / z
    j = np.zeros((len(idx), 2, 3))
    j[:, 0, 0] = view.fx * inv_z
    j[:, 0, 2] = -view.fx * x * inv_z * inv_z
    j[:, 1, 1] = view.fy * inv_z
    j[:, 1, 2] = -view.fy * y * inv_z * inv_z
    cov2d = np.einsum("nij,njk,nlk->nil", j, cov_cam, j)
    cov_a = cov2d[:, 0, 0] + covariance_dilation
    cov_b = cov2d[:, 0, 1]
    cov_c = cov2d[:, 1, 1] + covariance_dilation

    opacity = logistic(scene.opacity_logits[idx].astype(np.float64))

    colors, _, _ = evaluate_sh_colors(scene, view)
    colors = colors[idx]

    r_sq = _footprint_radius_sq(opacity, alpha_skip)
    hx = np.sqrt(r_sq * cov_a)
    hy = np.sqrt(r_sq * cov_c)
    col0 = np.ceil(mean2d[:, 0] - hx - 0.5).astype(np.int64)
    col1 = np.floor(mean2d[:, 0] + hx - 0.5).astype(np.int64)
    row0 = np.ceil(mean2d[:, 1] - hy - 0.5).astype(np.int64)
    row1 = np.floor(mean2d[:, 1] + hy - 0.5).astype(np.int64)
    col0 = np.maximum(col0, 0)
    row0 = np.maximum(row0, 0)
    col1 = np.minimum(col1, view.width - 1)
    row1 = np.minimum(row1, view.height - 1)
    on_screen = (col0 <= col1) & (row0 <= row1)

    keep = np.nonzero(on_screen)[0]
    bbox = np.stack([col0, col1, row0, row1], axis=1)[keep]
    return ProjectedGaussians(
        mean2d=mean2d[keep],
        cov_a=cov_a[keep],
        cov_b=cov_b[keep],
        cov_c=cov_c[keep],
        depth=z[keep],
        opacity=opacity[keep],
        color=colors[keep],
        source_index=idx[keep],
        bbox=bbox,
    )


def _empty_projection() -> ProjectedGaussians:
    z = np.zeros(0)
    return ProjectedGaussians(
        mean2d=np.zeros((0, 2)), cov_a=z, cov_b=z, cov_c=z, depth=z,
        opacity=z, color=np.zeros((0, 3)), source_index=np.zeros(0, dtype=np.int64),
        bbox=np.zeros((0, 4), dtype=np.int64),
    )


def _sorted_order(proj: ProjectedGaussians) -> np.ndarray:
    # Front-to-back by depth; ties broken by ascending primitive index so
    # compositing order (and therefore output bytes) never depends on the
    # projection or worker schedule.
    return np.lexsort((proj.source_index, proj.depth))


def _tile_lists(proj: ProjectedGaussians, order: np.ndarray, width: int,
                height: int, tile: int):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    lists: list[list[int]] = [[] for _ in range(tiles_x * tiles_y)]
    bbox = proj.bbox
    for rank, g in enumerate(order):
        c0, c1, r0, r1 = bbox[g]
        for ty in range(r0 // tile, r1 // tile + 1):
            base = ty * tiles_x
            for tx in range(c0 // tile, c1 // tile + 1):
                lists[base + tx].append(rank)
    return tiles_x, tiles_y, lists


def _pixel_centers(px0, px1, py0, py1):
    cols = np.arange(px0, px1, dtype=np.float64) + 0.5
    rows = np.arange(py0, py1, dtype=np.float64) + 0.5
    cx, cy = np.meshgrid(cols, rows)
    return cx.ravel(), cy.ravel()


class _TileData:
    """Per-tile forward quantities shared by the forward and backward passes."""

    __slots__ = ("ranks", "alphabar", "texcl", "active", "weights", "gauss",
                 "clamped", "t_final", "pixel_slice")

    def __init__(self, ranks, alphabar, texcl, active, weights, gauss, clamped,
                 t_final, pixel_slice):
        self.ranks = ranks
        self.alphabar = alphabar
        self.texcl = texcl
        self.active = active
        self.weights = weights
        self.gauss = gauss
        self.clamped = clamped
        self.t_final = t_final
        self.pixel_slice = pixel_slice


def _composite_tile(proj, order, ranks, px0, px1, py0, py1, opts) -> _TileData | None:
    if not ranks:
        return None
    g = order[np.asarray(ranks, dtype=np.int64)]
    cx, cy = _pixel_centers(px0, px1, py0, py1)

    dx = cx[None, :] - proj.mean2d[g, 0][:, None]
    dy = cy[None, :] - proj.mean2d[g, 1][:, None]
    a, b, c = proj.cov_a[g], proj.cov_b[g], proj.cov_c[g]
    det = a * c - b * b
    ia = (c / det)[:, None]
    ib = (-b / det)[:, None]
    ic = (a / det)[:, None]
    q = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
    gauss = np.exp(-0.5 * q)

    alpha_raw = proj.opacity[g][:, None] * gauss
    clamped = alpha_raw > opts.alpha_clamp
    alpha = np.minimum(alpha_raw, opts.alpha_clamp)
    alphabar = np.where(alpha >= opts.alpha_skip, alpha, 0.0)

    t_inc = np.cumprod(1.0 - alphabar, axis=0)
    texcl = np.empty_like(t_inc)
    texcl[0] = 1.0
    texcl[1:] = t_inc[:-1]

    if opts.transmittance_stop > 0.0:
        below = texcl < opts.transmittance_stop
        active = (alphabar > 0.0) & ~below
        any_below = below.any(axis=0)
        first = np.argmax(below, axis=0)
        t_final = np.where(any_below,
                           np.take_along_axis(texcl, first[None, :], axis=0)[0],
                           t_inc[-1])
    else:
        active = alphabar > 0.0
        t_final = t_inc[-1]

    weights = np.where(active, alphabar * texcl, 0.0)
    return _TileData(
        ranks=g, alphabar=alphabar, texcl=texcl, active=active, weights=weights,
        gauss=gauss, clamped=clamped, t_final=t_final,
        pixel_slice=(py0, py1, px0, px1),
    )


def _resolve_background(scene: GaussianScene, opts: RenderOptions) -> np.ndarray:
    if opts.background is not None:
        return np.asarray(opts.background, dtype=np.float64).reshape(3)
    return scene.background_color.astype(np.float64)


def render(scene: GaussianScene, view: CameraView,
           opts: RenderOptions | None = None) -> RenderOutput:
    opts = opts or RenderOptions()
    bg = _resolve_background(scene, opts)
    h, w = view.height, view.width

    color = np.tile(bg, (h, w, 1))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    contrib = np.zeros((h, w), dtype=np.int64)

    proj = project(scene, view, opts.near_clip, opts.covariance_dilation, opts.alpha_skip)
    if len(proj):
        order = _sorted_order(proj)
        tiles_x, tiles_y, lists = _tile_lists(proj, order, w, h, opts.tile_size)
        t = opts.tile_size
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                px0, px1 = tx * t, min((tx + 1) * t, w)
                py0, py1 = ty * t, min((ty + 1) * t, h)
                tile = _composite_tile(proj, order, lists[ty * tiles_x + tx],
                                       px0, px1, py0, py1, opts)
                if tile is None:
                    continue
                g = tile.ranks
                shape = (py1 - py0, px1 - px0)
                tile_color = tile.weights.T @ proj.color[g]
                tile_alpha = tile.weights.sum(axis=0)
                tile_depth = tile.weights.T @ proj.depth[g]
                color[py0:py1, px0:px1] = (
                    tile_color + tile.t_final[:, None] * bg
                ).reshape(shape + (3,))
                alpha[py0:py1, px0:px1] = tile_alpha.reshape(shape)
                depth[py0:py1, px0:px1] = (
                    tile_depth / (tile_alpha + 1e-8)
                ).reshape(shape)
                contrib[py0:py1, px0:px1] = tile.active.sum(axis=0).reshape(shape)

    return RenderOutput(
        color=ImageBuffer(color),
        alpha=ImageBuffer(alpha[:, :, None]),
        depth=ImageBuffer(depth[:, :, None]),
        per_pixel_contrib_count=contrib,
    )


def render_backward(scene: GaussianScene, view: CameraView,
                    grad_color: ImageBuffer,
                    opts: RenderOptions | None = None) -> AppearanceGradients:
    """Gradients of sum(grad_color * rendered_color) w.r.t. appearance parameters."""
    opts = opts or RenderOptions()
    if (grad_color.height, grad_color.width) != (view.height, view.width):
        raise ValueError(
            f"grad_color is {grad_color.height}x{grad_color.width}, "
            f"render is {view.height}x{view.width}"
        )
    bg = _resolve_background(scene, opts)
    h, w = view.height, view.width
    grad = grad_color.data
    if grad.shape[2] == 1:
        grad = np.repeat(grad, 3, axis=2)

    n = len(scene)
    d_color = np.zeros((n, 3))
    want_opacity = opts.trainable == "sh_and_opacity"
    d_sigma = np.zeros(n) if want_opacity else None

    proj = project(scene, view, opts.near_clip, opts.covariance_dilation, opts.alpha_skip)
    if len(proj):
        order = _sorted_order(proj)
        tiles_x, tiles_y, lists = _tile_lists(proj, order, w, h, opts.tile_size)
        t = opts.tile_size
        sources = proj.source_index
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                px0, px1 = tx * t, min((tx + 1) * t, w)
                py0, py1 = ty * t, min((ty + 1) * t, h)
                tile = _composite_tile(proj, order, lists[ty * tiles_x + tx],
                                       px0, px1, py0, py1, opts)
                if tile is None:
                    continue
                g = tile.ranks
                g_pix = grad[py0:py1, px0:px1].reshape(-1, 3)
                colors = proj.color[g]

                np.add.at(d_color, sources[g], tile.weights @ g_pix)

                if want_opacity:
                    contrib_rgb = tile.weights[:, :, None] * colors[:, None, :]
                    suffix = contrib_rgb[::-1].cumsum(axis=0)[::-1] - contrib_rgb
                    suffix += tile.t_final[None, :, None] * bg[None, None, :]

                    term1 = (colors @ g_pix.T) * tile.texcl
                    term2 = np.einsum("gpc,pc->gp", suffix, g_pix)
                    denom = np.maximum(1.0 - tile.alphabar, 1.0 - opts.alpha_clamp)
                    d_alpha = np.where(tile.active, term1 - term2 / denom, 0.0)
                    # Clamped alphas have zero local slope in sigma.
                    d_alpha = np.where(tile.clamped, 0.0, d_alpha)
                    np.add.at(d_sigma, sources[g], (d_alpha * tile.gauss).sum(axis=1))

    _, basis, raw = evaluate_sh_colors(scene, view)
    pass_mask = (raw > 0.0).astype(np.float64)
    d_sh = basis[:, :, None] * (d_color * pass_mask)[:, None, :]

    d_opacity_logit = None
    if want_opacity:
        sigma = logistic(scene.opacity_logits.astype(np.float64))
        d_opacity_logit = d_sigma * sigma * (1.0 - sigma)
    return AppearanceGradients(d_sh=d_sh, d_opacity_logit=d_opacity_logit)


def render_batch(scene: GaussianScene, views: Sequence[CameraView],
                 opts: RenderOptions | None = None) -> list[RenderOutput]:
    """Map render over views; results are independent of evaluation order."""
    return [render(scene, view, opts) for view in views]
