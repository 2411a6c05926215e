"""Patch compositing and full-image rendering in center or stride mode."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ShapeError
from .field import FieldOutput, ModelPair, RadianceSample
from .sampling import (
    Camera,
    SampleSet,
    compositing_weights,
    generate_rays,
    hierarchical_resample,
    stratified_sample,
)


@dataclass
class RenderedPatch:
    rgb: np.ndarray
    center: tuple[int, int] | None = None


def composite_arrays(sigma, color, deltas, white_background: bool = False) -> np.ndarray:
    """Alpha-composite along the sample axis, independently per patch pixel.

    Args:
        sigma: ``[..., N, P]`` densities for ``P`` patch pixels.
        color: ``[..., N, P, 3]``.
        deltas: ``[..., N]``.

    Returns:
        ``[..., P, 3]`` clamped to [0, 1].
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.isnan(sigma).any() or np.isnan(color).any() or np.isnan(deltas).any():
        raise NumericalError("NaN in compositing inputs")
    # move sample axis last so each patch pixel is its own ray
    w = compositing_weights(np.moveaxis(sigma, -2, -1), deltas[..., None, :])
    w = np.moveaxis(w, -1, -2)
    rgb = np.einsum("...np,...npc->...pc", w, color)
    if white_background:
        rgb = rgb + (1.0 - w.sum(axis=-2))[..., None]
    return np.clip(rgb, 0.0, 1.0)


def composite_patch(
    samples: list[RadianceSample], deltas, center=None, white_background: bool = False
) -> RenderedPatch:
    """Render one ray's ``p x p`` patch from its per-sample radiance patches."""
    if not samples:
        raise ShapeError("need at least one sample")
    sigma = np.stack([s.density_patch for s in samples])
    p = sigma.shape[-1]
    color = np.stack([s.color_patch for s in samples])
    rgb = composite_arrays(
        sigma.reshape(len(samples), p * p),
        color.reshape(len(samples), p * p, 3),
        deltas,
        white_background,
    )
    return RenderedPatch(rgb=rgb.reshape(p, p, 3), center=center)


def composite(sigma: Tensor, color: Tensor, deltas, white_background: bool = False) -> Tensor:
    """Differentiable compositing: ``[B, N, p, p]`` and ``[B, N, p, p, 3]`` to ``[B, p, p, 3]``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    extra = (1,) * (sigma.ndim - deltas.ndim)
    tau = sigma * deltas.reshape(deltas.shape + extra)
    alpha = 1.0 - ad.exp(-tau)
    trans = ad.exp(-ad.cumsum(tau, axis=deltas.ndim - 1, exclusive=True))
    w = trans * alpha
    rgb = (w.reshape(w.shape + (1,)) * color).sum(axis=deltas.ndim - 1)
    if white_background:
        rest = 1.0 - w.sum(axis=deltas.ndim - 1)
        rgb = rgb + rest.reshape(rest.shape + (1,))
    return rgb


@dataclass
class RayBatchOutput:
    fine_rgb: Tensor
    coarse_rgb: Tensor | None
    coarse_samples: SampleSet
    fine_samples: SampleSet
    coarse_weights: np.ndarray


def render_rays(
    pair: ModelPair,
    origins,
    directions,
    near: float,
    far: float,
    n_coarse: int,
    n_fine: int,
    train: bool = False,
    rng=None,
    white_background: bool = False,
) -> RayBatchOutput:
    """Two-pass render of a ray batch: coarse densities guide fine resampling.

    In training the sample positions are jittered from ``rng``; otherwise
    they are deterministic.  A trainable coarse network (strategies
    ``separate``/``shared``) also renders colors so it can carry its own loss;
    the synced coarse network only ever emits densities and never records
    onto the tape.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    batch = origins.shape[:-1]
    p = pair.fine.patch_size
    c = p // 2

    coarse_set = stratified_sample(near, far, n_coarse, jitter=train, rng=rng, batch_shape=batch)
    pos = origins[..., None, :] + coarse_set.t[..., None] * directions[..., None, :]
    coarse_rgb = None
    if train and pair.coarse_trainable:
        coarse_out = pair.coarse(coarse_set.t, pos, directions, density_only=False, train=True)
        coarse_rgb = composite(
            coarse_out.sigma, coarse_out.color, coarse_set.deltas, white_background
        )
    else:
        with ad.no_grad():
            coarse_out = pair.coarse(coarse_set.t, pos, directions, density_only=True, train=False)
    center_sigma = coarse_out.sigma.values[..., c, c]
    weights = compositing_weights(center_sigma, coarse_set.deltas)

    fine_set = hierarchical_resample(coarse_set, weights, n_fine, rng=rng, jitter=train)
    pos = origins[..., None, :] + fine_set.t[..., None] * directions[..., None, :]
    fine_out: FieldOutput = pair.fine(fine_set.t, pos, directions, density_only=False, train=train)
    fine_rgb = composite(fine_out.sigma, fine_out.color, fine_set.deltas, white_background)
    return RayBatchOutput(fine_rgb, coarse_rgb, coarse_set, fine_set, weights)


@dataclass
class RenderResult:
    image: np.ndarray
    ray_count: int
    coverage: np.ndarray


def stride_tiles(width: int, height: int, p: int):
    """Patch placements for stride mode.

    Yields ``(center_i, center_j, rows, cols)`` where ``rows``/``cols`` are the
    image slices this tile writes and the patch is placed so it stays inside
    the image; each pixel belongs to exactly one tile.
    """
    if width < p or height < p:
        raise ShapeError(f"image {width}x{height} is smaller than patch size {p}")
    for ty in range(math.ceil(height / p)):
        y0 = min(ty * p, height - p)
        rows = slice(ty * p, min(ty * p + p, height))
        for tx in range(math.ceil(width / p)):
            x0 = min(tx * p, width - p)
            cols = slice(tx * p, min(tx * p + p, width))
            yield x0 + p // 2, y0 + p // 2, rows, cols


def render_image(
    pair: ModelPair,
    camera: Camera,
    mode: str = "center",
    n_coarse: int = 64,
    n_fine: int = 448,
    chunk: int = 256,
    white_background: bool = False,
) -> RenderResult:
    """Render a full view.

    ``center`` casts one ray per pixel and keeps the patch center; ``stride``
    casts one ray per ``p x p`` tile and writes the whole patch.
    """
    p = pair.fine.patch_size
    c = p // 2
    w, h = camera.width, camera.height
    if mode == "center":
        jj, ii = np.mgrid[0:h, 0:w]
        centers_i, centers_j = ii.ravel(), jj.ravel()
    elif mode == "stride":
        tiles = list(stride_tiles(w, h, p))
        centers_i = np.array([t[0] for t in tiles])
        centers_j = np.array([t[1] for t in tiles])
    else:
        raise ValueError(f"unknown render mode {mode!r}")

    origins, dirs = generate_rays(camera, centers_i, centers_j)
    patches = []
    with ad.no_grad():
        for s in range(0, len(centers_i), chunk):
            out = render_rays(
                pair,
                origins[s : s + chunk],
                dirs[s : s + chunk],
                camera.near,
                camera.far,
                n_coarse,
                n_fine,
                train=False,
                white_background=white_background,
            )
            patches.append(np.clip(out.fine_rgb.values, 0.0, 1.0))
    patches = np.concatenate(patches, axis=0)
    if np.isnan(patches).any():
        raise NumericalError("NaN in rendered image")

    image = np.zeros((h, w, 3))
    coverage = np.zeros((h, w), dtype=np.int64)
    if mode == "center":
        image[centers_j, centers_i] = patches[:, c, c]
        np.add.at(coverage, (centers_j, centers_i), 1)
    else:
        for patch, (ci, cj, rows, cols) in zip(patches, tiles):
            y0, x0 = cj - c, ci - c
            image[rows, cols] = patch[rows.start - y0 : rows.stop - y0, cols.start - x0 : cols.stop - x0]
            coverage[rows, cols] += 1
    return RenderResult(image=image, ray_count=len(centers_i), coverage=coverage)
