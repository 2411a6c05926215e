"""Patch-emitting radiance network built from distance-aware ray convolutions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (128, 128, 128, 256, 256, 256, 512, 512)
DISTANCE_EPS = 1e-8
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def positional_encode(x, levels: int) -> np.ndarray:
    """Frequency encoding ``[x, sin(2^l pi x), cos(2^l pi x), ...]`` on the last axis."""
    if levels < 0:
        raise ValueError("levels must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for level in range(levels):
        arg = (2.0**level * math.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def distance_weights(t_window, anchor_index: int, eps: float = DISTANCE_EPS) -> np.ndarray:
    """Cosine weights of each window tap relative to the anchor sample.

    Distances ``|t_anchor - t_k|`` are scaled so the farthest tap in the window
    maps to pi/4, then passed through ``cos``; the anchor always gets 1.
    """
    t = np.asarray(t_window, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("sample locations must be finite")
    if not -t.shape[-1] <= anchor_index < t.shape[-1]:
        raise IndexError(f"anchor_index {anchor_index} outside window of {t.shape[-1]}")
    d = np.abs(t[..., anchor_index, None] - t)
    return _cos_weights(d, eps)


def _cos_weights(d: np.ndarray, eps: float) -> np.ndarray:
    d_max = d.max(axis=-1, keepdims=True)
    return np.cos((math.pi / 2) * d / (2.0 * (d_max + eps)))


def tap_scales(t, kernel_size: int, eps: float = DISTANCE_EPS) -> np.ndarray:
    """Per-sample distance weights for every conv tap, ``[..., N] -> [..., N, K]``.

    Windows use the same clamp-to-edge indexing as :func:`autodiff.conv1d`.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise ValueError("sample locations must be finite")
    n = t.shape[-1]
    offsets = np.arange(kernel_size) - kernel_size // 2
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    d = np.abs(t[..., :, None] - t[..., idx])
    return _cos_weights(d, eps)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class DistanceAwareConvLayer:
    """conv1d with distance tap scaling, then batch-wise normalization, then relu."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3, rng=None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be a positive odd integer, got {kernel_size}")
        rng = np.random.default_rng(rng)
        fan_in = kernel_size * c_in
        self.kernel = ad.parameter(_uniform(rng, fan_in, (kernel_size, c_in, c_out)))
        self.bias = ad.parameter(_uniform(rng, fan_in, (c_out,)))
        self.norm_scale = ad.parameter(np.ones(c_out))
        self.norm_shift = ad.parameter(np.zeros(c_out))
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)

    @property
    def kernel_size(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x: Tensor, scales: np.ndarray, train: bool, update_stats: bool) -> Tensor:
        y = ad.conv1d(x, self.kernel, scales) + self.bias
        if train:
            y, mean, var = ad.batch_norm(y, self.norm_scale, self.norm_shift, BN_EPS, relu=True)
            if update_stats:
                self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
                self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
            return y
        inv = 1.0 / np.sqrt(self.running_var + BN_EPS)
        y = (y - self.running_mean) * (self.norm_scale * inv) + self.norm_shift
        return ad.relu(y)


@dataclass(frozen=True)
class FieldConfig:
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    kernel_size: int = 3
    patch_size: int = 5
    pos_levels: int = 10
    dir_levels: int = 4
    zero_init_heads: bool = False

    def __post_init__(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError("channel plan must be a non-empty list of positive ints")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be a positive odd integer, got {self.kernel_size}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be a positive odd integer, got {self.patch_size}")
        if self.pos_levels < 0 or self.dir_levels < 0:
            raise ConfigError("encoding levels must be >= 0")

    @property
    def pos_dim(self) -> int:
        return 3 * (1 + 2 * self.pos_levels)

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.dir_levels)


@dataclass
class FieldOutput:
    """Network output for a batch of rays.

    ``sigma`` is ``[..., N, p, p]``; ``color`` is ``[..., N, p, p, 3]`` or
    None when only densities were requested.
    """

    sigma: Tensor
    color: Tensor | None = None


@dataclass
class RadianceSample:
    color_patch: np.ndarray | None
    density_patch: np.ndarray


class TorchFieldNetwork:
    """Eight (by default) distance-aware conv layers plus density and color heads."""

    def __init__(self, config: FieldConfig = FieldConfig(), rng=None):
        self.config = config
        rng = np.random.default_rng(rng)
        p2 = config.patch_size**2
        self.layers: list[DistanceAwareConvLayer] = []
        c_in = config.pos_dim
        for c_out in config.channels:
            self.layers.append(DistanceAwareConvLayer(c_in, c_out, config.kernel_size, rng))
            c_in = c_out
        color_in = c_in + config.dir_dim
        if config.zero_init_heads:
            self.density_weight = ad.parameter(np.zeros((c_in, p2)))
            self.density_bias = ad.parameter(np.zeros(p2))
            self.color_weight = ad.parameter(np.zeros((color_in, 3 * p2)))
            self.color_bias = ad.parameter(np.zeros(3 * p2))
        else:
            self.density_weight = ad.parameter(_uniform(rng, c_in, (c_in, p2)))
            self.density_bias = ad.parameter(_uniform(rng, c_in, (p2,)))
            self.color_weight = ad.parameter(_uniform(rng, color_in, (color_in, 3 * p2)))
            self.color_bias = ad.parameter(_uniform(rng, color_in, (3 * p2,)))

    @property
    def patch_size(self) -> int:
        return self.config.patch_size

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            params[f"layer{i}.kernel"] = layer.kernel
            params[f"layer{i}.bias"] = layer.bias
            params[f"layer{i}.norm_scale"] = layer.norm_scale
            params[f"layer{i}.norm_shift"] = layer.norm_shift
        params["density.weight"] = self.density_weight
        params["density.bias"] = self.density_bias
        params["color.weight"] = self.color_weight
        params["color.bias"] = self.color_bias
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layer{i}.running_mean"] = layer.running_mean
            out[f"layer{i}.running_var"] = layer.running_var
        return out

    def set_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            layer.running_mean = np.array(buffers[f"layer{i}.running_mean"], dtype=np.float64)
            layer.running_var = np.array(buffers[f"layer{i}.running_var"], dtype=np.float64)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.grad_enabled = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def copy_from(self, other: TorchFieldNetwork) -> None:
        mine, theirs = self.parameters(), other.parameters()
        if mine.keys() != theirs.keys() or any(
            mine[k].shape != theirs[k].shape for k in mine
        ):
            raise ConfigError("cannot copy parameters between networks of different shape")
        for k, p in mine.items():
            p.values = theirs[k].values.copy()
        self.set_buffers({k: v.copy() for k, v in other.buffers().items()})

    def clone(self, trainable: bool = True) -> TorchFieldNetwork:
        twin = TorchFieldNetwork.__new__(TorchFieldNetwork)
        twin.config = self.config
        twin.layers = []
        for layer in self.layers:
            new = DistanceAwareConvLayer.__new__(DistanceAwareConvLayer)
            new.kernel = ad.parameter(layer.kernel.values)
            new.bias = ad.parameter(layer.bias.values)
            new.norm_scale = ad.parameter(layer.norm_scale.values)
            new.norm_shift = ad.parameter(layer.norm_shift.values)
            new.running_mean = layer.running_mean.copy()
            new.running_var = layer.running_var.copy()
            twin.layers.append(new)
        twin.density_weight = ad.parameter(self.density_weight.values)
        twin.density_bias = ad.parameter(self.density_bias.values)
        twin.color_weight = ad.parameter(self.color_weight.values)
        twin.color_bias = ad.parameter(self.color_bias.values)
        twin.set_trainable(trainable)
        return twin

    def forward(
        self,
        t,
        positions,
        direction,
        density_only: bool = False,
        train: bool = False,
        update_stats: bool | None = None,
    ) -> FieldOutput:
        """Evaluate the field on the samples of one ray or a batch of rays.

        Args:
            t: sample distances, ``[N]`` or ``[B, N]``, ascending per ray.
            positions: ``o + t d`` for every sample, ``[..., N, 3]``.
            direction: ray direction, ``[3]`` or ``[B, 3]``.
            density_only: skip the color head entirely.
            train: normalize with batch statistics instead of running ones.
            update_stats: fold batch statistics into the running ones
                (defaults to ``train``).
        """
        t = np.asarray(t, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        if positions.shape != t.shape + (3,):
            raise ShapeError(f"positions {positions.shape} do not match t {t.shape}")
        if direction.shape != t.shape[:-1] + (3,):
            raise ShapeError(f"direction {direction.shape} does not match t {t.shape}")
        norms = np.linalg.norm(direction, axis=-1, keepdims=True)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            logger.warning("non-unit ray direction passed to forward; normalizing")
            direction = direction / norms
        if update_stats is None:
            update_stats = train

        cfg = self.config
        p = cfg.patch_size
        lead = t.shape
        h: Tensor = Tensor(positional_encode(positions, cfg.pos_levels))
        scales = tap_scales(t, cfg.kernel_size)
        for layer in self.layers:
            h = layer(h, scales, train, update_stats)

        sigma = ad.relu(h @ self.density_weight + self.density_bias)
        sigma = sigma.reshape(lead + (p, p))
        if density_only:
            return FieldOutput(sigma=sigma)

        dir_enc = positional_encode(direction, cfg.dir_levels)
        dir_enc = np.broadcast_to(dir_enc[..., None, :], lead + (cfg.dir_dim,))
        feats = ad.concat([h, Tensor(dir_enc)], axis=-1)
        color = ad.sigmoid(feats @ self.color_weight + self.color_bias)
        return FieldOutput(sigma=sigma, color=color.reshape(lead + (p, p, 3)))

    __call__ = forward


def radiance_samples(output: FieldOutput) -> list[RadianceSample]:
    """Split a single-ray :class:`FieldOutput` into per-sample records."""
    sigma = output.sigma.values
    if sigma.ndim != 3:
        raise ShapeError("radiance_samples expects the output of a single ray")
    color = None if output.color is None else output.color.values
    return [
        RadianceSample(
            color_patch=None if color is None else color[n].copy(),
            density_patch=sigma[n].copy(),
        )
        for n in range(sigma.shape[0])
    ]


STRATEGIES = ("synced", "separate", "shared")


@dataclass
class ModelPair:
    """Coarse proposal network plus trainable fine network.

    With ``strategy="synced"`` the coarse network never trains; it is
    overwritten with the fine parameters every ``sync_period`` steps.
    ``separate`` trains two independent networks and ``shared`` uses a
    single network for both passes.
    """

    fine: TorchFieldNetwork
    coarse: TorchFieldNetwork
    sync_period: int = 200
    strategy: str = "synced"
    iterations_since_sync: int = field(default=0)

    @classmethod
    def create(
        cls,
        config: FieldConfig = FieldConfig(),
        sync_period: int = 200,
        strategy: str = "synced",
        rng=None,
    ) -> ModelPair:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        if sync_period < 1:
            raise ConfigError("sync_period must be positive")
        rng = np.random.default_rng(rng)
        fine = TorchFieldNetwork(config, rng)
        if strategy == "synced":
            coarse = fine.clone(trainable=False)
        elif strategy == "separate":
            coarse = TorchFieldNetwork(config, rng)
        else:
            coarse = fine
        return cls(fine=fine, coarse=coarse, sync_period=sync_period, strategy=strategy)

    @property
    def coarse_trainable(self) -> bool:
        return self.strategy != "synced"

    def networks(self) -> dict[str, TorchFieldNetwork]:
        if self.strategy == "shared":
            return {"fine": self.fine}
        return {"fine": self.fine, "coarse": self.coarse}

    def trainable_parameters(self) -> dict[str, Tensor]:
        nets = {"fine": self.fine}
        if self.strategy == "separate":
            nets["coarse"] = self.coarse
        return {f"{name}/{k}": p for name, net in nets.items() for k, p in net.parameters().items()}

    def step(self) -> bool:
        """Advance the sync counter; returns True when a sync happened."""
        if self.strategy != "synced":
            return False
        self.iterations_since_sync += 1
        if self.iterations_since_sync >= self.sync_period:
            sync_coarse_from_fine(self)
            return True
        return False


def sync_coarse_from_fine(pair: ModelPair) -> None:
    pair.coarse.copy_from(pair.fine)
    if pair.strategy == "synced":
        pair.coarse.set_trainable(False)
    pair.iterations_since_sync = 0
