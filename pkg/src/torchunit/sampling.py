"""Pinhole cameras, ray generation and sample placement along rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError

RESAMPLE_PDF_FLOOR = 1e-5
TIE_PERTURBATION = 1e-9


@dataclass
class Camera:
    """Pinhole camera; ``pose`` is a 3x4 camera-to-world matrix, looking down -z."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        if not 0 < self.near < self.far:
            raise ConfigError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        rot = self.pose[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ConfigError("pose rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:, 3]

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near, self.far)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height, other.near, other.far)
            and np.array_equal(self.pose, other.pose)
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


@dataclass
class SampleSet:
    """Ascending sample distances ``t`` and their interval lengths.

    ``deltas[n] = t[n+1] - t[n]`` and the last interval runs to ``far``.  Both
    arrays may carry leading batch axes.
    """

    t: np.ndarray
    deltas: np.ndarray
    near: float
    far: float

    def __len__(self) -> int:
        return self.t.shape[-1]


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """3x4 camera-to-world pose placing the camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    return np.column_stack([right, true_up, -forward, eye])


def generate_rays(camera: Camera, i, j) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`generate_ray`; returns ``(origins, directions)``."""
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any((i < 0) | (i >= camera.width) | (j < 0) | (j >= camera.height)):
        raise BoundsError(f"pixel outside {camera.width}x{camera.height} image")
    cam_dirs = np.stack(
        [
            (i + 0.5 - camera.cx) / camera.fx,
            -(j + 0.5 - camera.cy) / camera.fy,
            -np.ones(np.shape(i)),
        ],
        axis=-1,
    )
    dirs = cam_dirs @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return origins, dirs


def generate_ray(camera: Camera, i: int, j: int) -> Ray:
    origins, dirs = generate_rays(camera, i, j)
    return Ray(origin=origins, direction=dirs, pixel=(int(i), int(j)))


def deltas_for(t: np.ndarray, far: float) -> np.ndarray:
    far_col = np.full(t.shape[:-1] + (1,), far)
    return np.maximum(np.diff(t, axis=-1, append=far_col), 0.0)


def stratified_sample(
    near: float, far: float, count: int, jitter: bool = False, rng=None, batch_shape=()
) -> SampleSet:
    """One sample per equal-width bin of ``[near, far]``.

    Without jitter each sample sits at its bin midpoint; with jitter the
    offset inside the bin is drawn from ``rng`` (a seed or Generator).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    width = (far - near) / count
    starts = near + width * np.arange(count)
    shape = tuple(batch_shape) + (count,)
    if jitter:
        u = np.random.default_rng(rng).random(shape)
    else:
        u = np.full(shape, 0.5)
    t = starts + u * width
    return SampleSet(t=t, deltas=deltas_for(t, far), near=near, far=far)


def compositing_weights(sigma, deltas) -> np.ndarray:
    """Per-sample contribution ``T_n (1 - exp(-sigma_n delta_n))`` along the last axis."""
    sigma = np.asarray(sigma, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    if np.any(deltas < 0):
        raise ValueError("interval lengths must be non-negative")
    # T_n alpha_n == opacity_n - opacity_{n-1}; differencing the accumulated
    # opacity keeps the exact sum of the weights telescoping to at most 1
    opacity = -np.expm1(-np.cumsum(sigma * deltas, axis=-1))
    return np.diff(opacity, axis=-1, prepend=0.0)


def transmittance(tau: np.ndarray) -> np.ndarray:
    """``exp(-sum_{m<n} tau_m)``; the first entry is always 1."""
    acc = np.cumsum(tau, axis=-1)
    acc = np.concatenate([np.zeros(acc.shape[:-1] + (1,)), acc[..., :-1]], axis=-1)
    return np.exp(-acc)


def _strictly_ascending(t: np.ndarray, step: float) -> np.ndarray:
    ramp = step * np.arange(t.shape[-1])
    return np.maximum.accumulate(t - ramp, axis=-1) + ramp


def hierarchical_resample(
    samples: SampleSet,
    weights,
    count: int,
    rng=None,
    jitter: bool = True,
    pdf_floor: float = RESAMPLE_PDF_FLOOR,
) -> SampleSet:
    """Draw ``count`` extra distances by inverse CDF and merge them with ``samples``.

    Bin ``n`` is the interval ``[t_n, t_n + delta_n)``, drawn with probability
    proportional to ``weights[n] + pdf_floor``.  Rays whose weights are all
    zero fall back to :func:`stratified_sample` over ``[near, far]``.  The
    returned set is the sorted union (size ``N + count``), strictly ascending.
    """
    t = np.asarray(samples.t, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != t.shape:
        raise ValueError(f"weights {w.shape} do not match samples {t.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    rng = np.random.default_rng(rng)
    lead = t.shape[:-1]
    n = t.shape[-1]

    if jitter:
        u = (np.arange(count) + rng.random(lead + (count,))) / count
    else:
        u = np.broadcast_to((np.arange(count) + 0.5) / count, lead + (count,))

    dead = np.all(w == 0, axis=-1)
    pdf = np.where(dead[..., None], 1.0, w + pdf_floor)
    cdf = np.cumsum(pdf, axis=-1)
    total = cdf[..., -1:]
    cdf = cdf / total
    bins = np.minimum((u[..., :, None] >= cdf[..., None, :]).sum(axis=-1), n - 1)
    cdf_hi = np.take_along_axis(cdf, bins, -1)
    cdf_lo = np.where(bins > 0, np.take_along_axis(cdf, np.maximum(bins - 1, 0), -1), 0.0)
    frac = np.clip((u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-300), 0.0, 1.0)
    deltas = np.asarray(samples.deltas, dtype=np.float64)
    new_t = np.take_along_axis(t, bins, -1) + frac * np.take_along_axis(deltas, bins, -1)

    if np.any(dead):
        fallback = stratified_sample(
            samples.near, samples.far, count, jitter=jitter, rng=rng, batch_shape=lead
        ).t
        new_t = np.where(dead[..., None], fallback, new_t)

    merged = np.sort(np.concatenate([t, new_t], axis=-1), axis=-1)
    bin_width = (samples.far - samples.near) / n
    merged = _strictly_ascending(merged, TIE_PERTURBATION * bin_width)
    return SampleSet(
        t=merged, deltas=deltas_for(merged, samples.far), near=samples.near, far=samples.far
    )
