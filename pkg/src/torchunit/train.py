"""Training loop, Adam, checkpoints and evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, FormatError, NumericalError
from .field import DEFAULT_CHANNELS, STRATEGIES, FieldConfig, ModelPair
from .metrics import psnr, ssim, total_loss
from .render import render_image, render_rays
from .sampling import generate_rays
from .scene import Dataset

logger = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "psnr", "ssim", "wall_seconds"]


@dataclass
class TrainConfig:
    strategy: str = "synced"
    patch_size: int = 5
    kernel_size: int = 3
    n_samples: int = 512
    n_coarse: int = 64
    sync_period: int = 200
    batch_rays: int = 64
    lr: float = 5e-4
    lr_decay_steps: int = 0  # 0: decay by 10x over the whole run
    iterations: int = 20000
    seed: int = 0
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    pos_levels: int = 10
    dir_levels: int = 4
    use_ssim: bool = True
    weighted_mse: bool = True
    ssim_weight: float = 1.0
    eval_period: int = 1000
    max_grad_norm: float = 0.0
    white_background: bool = False
    reproducible: bool = True
    render_chunk: int = 256

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("n_samples", "n_coarse", "sync_period", "batch_rays", "iterations",
                     "eval_period", "render_chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_coarse > self.n_samples:
            raise ConfigError("n_coarse cannot exceed n_samples")
        if self.lr <= 0 or self.lr_decay_steps < 0:
            raise ConfigError("lr must be positive and lr_decay_steps non-negative")
        self.field_config()

    @property
    def n_fine(self) -> int:
        return self.n_samples - self.n_coarse

    def field_config(self) -> FieldConfig:
        return FieldConfig(
            channels=self.channels,
            kernel_size=self.kernel_size,
            patch_size=self.patch_size,
            pos_levels=self.pos_levels,
            dir_levels=self.dir_levels,
        )

    def learning_rate(self, iteration: int) -> float:
        steps = self.lr_decay_steps or self.iterations
        return self.lr * 0.1 ** (iteration / steps)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> TrainConfig:
        values = parse_config_text(text, source)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        path = Path(path)
        return cls.from_text(path.read_text(encoding="utf-8"), str(path))

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed TrainConfig fields.

    Raises ConfigError naming the offending key for unknown keys or bad values.
    """
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        kind = types[key]
        try:
            if kind == "int":
                out[key] = int(val)
            elif kind == "float":
                out[key] = float(val)
            elif kind == "bool":
                out[key] = _parse_bool(val)
            elif kind.startswith("tuple"):
                out[key] = tuple(int(v) for v in val.replace(" ", "").split(",") if v)
            else:
                out[key] = val
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {val!r}") from exc
    return out


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor]) -> AdamState:
        return cls(
            m={k: np.zeros(p.shape) for k, p in params.items()},
            v={k: np.zeros(p.shape) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    moments: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of ``params`` in place; ``None`` grads are skipped."""
    moments.t += 1
    t = moments.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = moments.m.setdefault(name, np.zeros(p.shape))
        v = moments.v.setdefault(name, np.zeros(p.shape))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = g * scale
    return total


# ----------------------------------------------------------------------------
# data


class TrainingRays:
    """Every train-split pixel whose full ``p x p`` patch fits inside its image."""

    def __init__(self, dataset: Dataset, patch_size: int, split: str = "train"):
        idx = dataset.indices(split)
        if not idx:
            raise ConfigError(f"dataset has no {split!r} views")
        cams = [dataset.cameras[k] for k in idx]
        if len({(c.near, c.far) for c in cams}) != 1:
            raise ConfigError("all training cameras must share near/far bounds")
        self.near, self.far = cams[0].near, cams[0].far
        self.images = np.stack([dataset.image(k) for k in idx])
        n_img, h, w, _ = self.images.shape
        self.patch_size = patch_size
        m = patch_size // 2
        if h < patch_size or w < patch_size:
            raise ConfigError("images are smaller than the patch size")
        jj, ii = np.mgrid[0:h, 0:w]
        origins, dirs = [], []
        for cam in cams:
            o, d = generate_rays(cam, ii, jj)
            origins.append(o)
            dirs.append(d)
        self.origins = np.stack(origins)
        self.dirs = np.stack(dirs)
        kk, jj, ii = np.meshgrid(
            np.arange(n_img), np.arange(m, h - m), np.arange(m, w - m), indexing="ij"
        )
        self.candidates = np.stack([kk.ravel(), jj.ravel(), ii.ravel()], axis=1)

    def __len__(self) -> int:
        return len(self.candidates)

    def batch(self, picks: np.ndarray):
        """Origins, directions and ground-truth crops for the chosen candidates."""
        k, j, i = self.candidates[picks].T
        offs = np.arange(self.patch_size) - self.patch_size // 2
        rows = (j[:, None] + offs)[:, :, None]
        cols = (i[:, None] + offs)[:, None, :]
        crops = self.images[k[:, None, None], rows, cols]
        return self.origins[k, j, i], self.dirs[k, j, i], crops


# ----------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    config: TrainConfig
    pair: ModelPair
    adam: AdamState
    rng: np.random.Generator
    iteration: int = 0
    data_dir: str = ""

    @classmethod
    def create(cls, config: TrainConfig, data_dir: str = "") -> TrainState:
        rng = np.random.default_rng(config.seed)
        pair = ModelPair.create(
            config.field_config(), config.sync_period, config.strategy, rng=rng
        )
        adam = AdamState.zeros_like(pair.trainable_parameters())
        return cls(config=config, pair=pair, adam=adam, rng=rng, data_dir=str(data_dir))


def train_step(state: TrainState, data: TrainingRays) -> float:
    """One optimizer step on a random batch of patches; returns the loss."""
    cfg = state.config
    pair = state.pair
    rng = state.rng
    picks = rng.integers(0, len(data), size=cfg.batch_rays)
    origins, dirs, gt = data.batch(picks)

    params = pair.trainable_parameters()
    for p in params.values():
        p.grad = None
    with ad.recording():
        out = render_rays(
            pair, origins, dirs, data.near, data.far, cfg.n_coarse, cfg.n_fine,
            train=True, rng=rng, white_background=cfg.white_background,
        )
        loss = total_loss(out.fine_rgb, gt, cfg.use_ssim, cfg.weighted_mse, cfg.ssim_weight)
        if out.coarse_rgb is not None:
            loss = loss + total_loss(
                out.coarse_rgb, gt, cfg.use_ssim, cfg.weighted_mse, cfg.ssim_weight
            )
    value = loss.item()
    if not math.isfinite(value):
        _nan_abort(state, origins, dirs, gt, value)
    ad.backward(loss)
    grads = {k: p.grad for k, p in params.items()}
    if cfg.max_grad_norm > 0:
        clip_grad_norm(grads, cfg.max_grad_norm)
    adam_step(params, grads, state.adam, cfg.learning_rate(state.iteration))
    state.iteration += 1
    pair.step()
    return value


class NaNAbort(NumericalError):
    def __init__(self, message: str, batch: dict):
        super().__init__(message)
        self.batch = batch


def _nan_abort(state, origins, dirs, gt, value):
    raise NaNAbort(
        f"non-finite loss {value} at iteration {state.iteration}",
        {"origins": origins, "directions": dirs, "ground_truth": gt},
    )


# ----------------------------------------------------------------------------
# checkpoints

MAGIC = b"TNRF"
VERSION = 1
_TEXT, _ARRAY = 0, 1


def _pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    head = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _unpack_array(buf: bytes, where: str) -> np.ndarray:
    try:
        (ndim,) = struct.unpack_from("<I", buf, 0)
        shape = struct.unpack_from(f"<{ndim}I", buf, 4)
    except struct.error as exc:
        raise FormatError(f"{where}: truncated array header") from exc
    start = 4 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) - start != 8 * count:
        raise FormatError(f"{where}: array payload has wrong length")
    return np.frombuffer(buf, dtype="<f8", offset=start).astype(np.float64).reshape(shape)


def checkpoint_sections(state: TrainState) -> list[tuple[str, int, bytes]]:
    pair = state.pair
    meta = (
        f"iteration = {state.iteration}\n"
        f"iterations_since_sync = {pair.iterations_since_sync}\n"
        f"adam_t = {state.adam.t}\n"
        f"data = {state.data_dir}\n"
    )
    rng_state = json.dumps(state.rng.bit_generator.state, sort_keys=True)
    sections = [
        ("config", _TEXT, state.config.to_text().encode()),
        ("meta", _TEXT, meta.encode()),
        ("rng", _TEXT, rng_state.encode()),
    ]
    for net_name, net in pair.networks().items():
        for k, p in net.parameters().items():
            sections.append((f"param/{net_name}/{k}", _ARRAY, _pack_array(p.values)))
        for k, b in net.buffers().items():
            sections.append((f"buffer/{net_name}/{k}", _ARRAY, _pack_array(b)))
    for k in pair.trainable_parameters():
        sections.append((f"adam.m/{k}", _ARRAY, _pack_array(state.adam.m[k])))
        sections.append((f"adam.v/{k}", _ARRAY, _pack_array(state.adam.v[k])))
    return sections


def save_checkpoint(path, state: TrainState) -> None:
    sections = checkpoint_sections(state)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, kind, payload in sections:
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BQ", kind, len(payload)) + payload)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint_sections(path) -> dict[str, bytes]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
        pos = 12
        sections = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode()
            pos += n
            kind, length = struct.unpack_from("<BQ", buf, pos)
            pos += 9
            if pos + length > len(buf):
                raise FormatError(f"{path}: truncated in section {name!r}")
            sections[name] = buf[pos : pos + length]
            pos += length
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last section")
    return sections


def _kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> TrainState:
    sections = read_checkpoint_sections(path)
    try:
        config = TrainConfig.from_text(sections["config"].decode(), f"{path}[config]")
        meta = _kv(sections["meta"].decode())
        rng_state = json.loads(sections["rng"].decode())
    except KeyError as exc:
        raise FormatError(f"{path}: missing section {exc}") from exc
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc

    state = TrainState.create(config, meta.get("data", ""))
    state.iteration = int(meta["iteration"])
    state.pair.iterations_since_sync = int(meta["iterations_since_sync"])
    state.adam.t = int(meta["adam_t"])
    state.rng.bit_generator.state = rng_state

    def arr(name, shape):
        if name not in sections:
            raise FormatError(f"{path}: missing section {name!r}")
        a = _unpack_array(sections[name], f"{path}[{name}]")
        if a.shape != tuple(shape):
            raise FormatError(f"{path}: {name} has shape {a.shape}, config implies {shape}")
        return a

    for net_name, net in state.pair.networks().items():
        for k, p in net.parameters().items():
            p.values = arr(f"param/{net_name}/{k}", p.shape)
        net.set_buffers({k: arr(f"buffer/{net_name}/{k}", b.shape) for k, b in net.buffers().items()})
    for k, p in state.pair.trainable_parameters().items():
        state.adam.m[k] = arr(f"adam.m/{k}", p.shape).copy()
        state.adam.v[k] = arr(f"adam.v/{k}", p.shape).copy()
    return state


# ----------------------------------------------------------------------------
# evaluation and the loop


def evaluate(
    state: TrainState,
    dataset: Dataset,
    split: str = "test",
    mode: str = "center",
) -> dict:
    """Render every view of ``split`` and score it against its image."""
    idx = dataset.indices(split)
    if not idx:
        raise ConfigError(f"split {split!r} is empty")
    cfg = state.config
    rows = []
    for k in idx:
        res = render_image(
            state.pair, dataset.cameras[k], mode, cfg.n_coarse, cfg.n_fine,
            chunk=cfg.render_chunk, white_background=cfg.white_background,
        )
        gt = dataset.image(k)
        rows.append({"view": dataset.names[k], "psnr": psnr(res.image, gt), "ssim": ssim(res.image, gt)})
    return {
        "views": rows,
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
    }


def format_metric(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def append_metrics_row(path, iteration: int, psnr_val: float, ssim_val: float, wall) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow([iteration, format_metric(psnr_val), format_metric(ssim_val), wall])


def train(
    config: TrainConfig,
    dataset: Dataset,
    out_dir,
    resume=None,
    log: Callable[[str], None] | None = None,
) -> TrainState:
    """Run (or continue) training, writing checkpoints and CSV logs to ``out_dir``.

    Files: ``metrics.csv`` (one row per evaluation), ``loss.csv`` (one row per
    step), ``timing.csv`` (wall-clock per evaluation), ``ckpt_XXXXXX.tnrf`` and
    ``latest.tnrf``.  With ``config.reproducible`` the ``wall_seconds`` column
    of metrics.csv holds ``nan`` so identical runs write identical files.
    """
    log = log or logger.info
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
        if config is not None:
            # only the run length may change on resume
            state.config = state.config.replace(iterations=config.iterations)
    else:
        state = TrainState.create(config, str(Path(dataset.root).resolve()))
    cfg = state.config
    data = TrainingRays(dataset, cfg.patch_size)
    loss_path = out / "loss.csv"
    if resume is None:
        for name in ("metrics.csv", "loss.csv", "timing.csv"):
            (out / name).unlink(missing_ok=True)
        loss_path.write_text("iter,loss\n")
    start = time.perf_counter()
    with loss_path.open("a") as loss_fh:
        while state.iteration < cfg.iterations:
            try:
                value = train_step(state, data)
            except NaNAbort as exc:
                np.savez(out / f"nan_batch_{state.iteration:06d}.npz", **exc.batch)
                raise
            loss_fh.write(f"{state.iteration},{value!r}\n")
            it = state.iteration
            if it % 100 == 0:
                loss_fh.flush()
                log(f"iter {it}: loss {value:.5f} ({time.perf_counter() - start:.0f}s)")
            if it % cfg.eval_period == 0 or it == cfg.iterations:
                loss_fh.flush()
                metrics = evaluate(state, dataset, "test")
                wall = time.perf_counter() - start
                append_metrics_row(
                    out / "metrics.csv", it, metrics["psnr"], metrics["ssim"],
                    "nan" if cfg.reproducible else f"{wall:.3f}",
                )
                with (out / "timing.csv").open("a") as fh:
                    fh.write(f"{it},{wall:.3f}\n")
                save_checkpoint(out / f"ckpt_{it:06d}.tnrf", state)
                save_checkpoint(out / "latest.tnrf", state)
                log(
                    f"iter {it}: loss {value:.5f} test psnr {metrics['psnr']:.2f} "
                    f"ssim {metrics['ssim']:.4f} ({wall:.0f}s)"
                )
    return state
