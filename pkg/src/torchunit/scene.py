"""Analytic scenes, the dense-quadrature reference renderer, and dataset files.

Dataset directory layout::

    <root>/cameras.txt   one camera per line, 21 fields:
                         name width height fx fy cx cy near far  + 12 pose
                         entries (3x4 camera-to-world, row-major)
    <root>/split.txt     "<name> train|test" per line
    <root>/images/*.png  8-bit RGB
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError
from .render import composite_arrays
from .sampling import Camera, compositing_weights, generate_rays, look_at, stratified_sample

CAMERA_FIELDS = 21


@dataclass
class Sphere:
    center: tuple[float, float, float]
    radius: float
    density: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("sphere radius must be positive")
        _check_material(self.density, self.color)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return np.einsum("...i,...i->...", d, d) <= self.radius**2


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    density: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if not np.all(np.asarray(self.lo) < np.asarray(self.hi)):
            raise ConfigError("box min must be below max in every axis")
        _check_material(self.density, self.color)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= np.asarray(self.lo)) & (pts <= np.asarray(self.hi)), axis=-1)


def _check_material(density, color):
    if density < 0:
        raise ConfigError("density must be non-negative")
    if any(not 0.0 <= c <= 1.0 for c in color):
        raise ConfigError("colors must lie in [0, 1]")


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)

    def field(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Density and color at ``pts[..., 3]``; first containing primitive wins."""
        pts = np.asarray(pts, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        rgb = np.zeros(pts.shape)
        free = np.ones(pts.shape[:-1], dtype=bool)
        for prim in self.primitives:
            hit = free & prim.contains(pts)
            sigma[hit] = prim.density
            rgb[hit] = prim.color
            free &= ~hit
        return sigma, rgb


def scene_field(scene: SyntheticScene, position) -> tuple[float, np.ndarray]:
    sigma, rgb = scene.field(np.asarray(position, dtype=np.float64)[None])
    return float(sigma[0]), rgb[0]


def default_scene() -> SyntheticScene:
    """Red, green and blue spheres on a ring of radius 0.6 about the origin."""
    colors = [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)]
    radii = [0.3, 0.25, 0.2]
    prims = []
    for k, (color, radius) in enumerate(zip(colors, radii)):
        ang = math.pi / 2 + 2 * math.pi * k / 3
        center = (0.6 * math.cos(ang), 0.0, 0.6 * math.sin(ang))
        prims.append(Sphere(center=center, radius=radius, density=20.0, color=color))
    return SyntheticScene(prims)


SCENES = {"default": default_scene, "empty": SyntheticScene}


def parse_scene_file(path) -> SyntheticScene:
    """Read a scene description.

    One primitive per line, ``#`` comments allowed::

        sphere cx cy cz radius density r g b
        box x0 y0 z0 x1 y1 z1 density r g b
    """
    prims = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        try:
            vals = [float(v) for v in rest]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from exc
        try:
            if kind == "sphere" and len(vals) == 8:
                prims.append(Sphere(tuple(vals[0:3]), vals[3], vals[4], tuple(vals[5:8])))
            elif kind == "box" and len(vals) == 10:
                prims.append(Box(tuple(vals[0:3]), tuple(vals[3:6]), vals[6], tuple(vals[7:10])))
            else:
                raise FormatError(f"{path}:{lineno}: cannot parse primitive {line!r}")
        except ConfigError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return SyntheticScene(prims)


def load_scene(name_or_path: str) -> SyntheticScene:
    if name_or_path in SCENES:
        return SCENES[name_or_path]()
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"unknown scene {name_or_path!r}; known: {sorted(SCENES)} or a file path")
    return parse_scene_file(path)


def oracle_render(
    scene: SyntheticScene, camera: Camera, steps: int = 16384, chunk_samples: int = 2_000_000
) -> np.ndarray:
    """Reference image by midpoint quadrature of the analytic field.

    Uses the same sample placement (:func:`stratified_sample` without jitter)
    and compositing rule as the learned renderer.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    jj, ii = np.mgrid[0 : camera.height, 0 : camera.width]
    origins, dirs = generate_rays(camera, ii.ravel(), jj.ravel())
    samples = stratified_sample(camera.near, camera.far, steps)
    rays_per_chunk = max(1, chunk_samples // steps)
    out = np.zeros((len(origins), 3))
    for s in range(0, len(origins), rays_per_chunk):
        o, d = origins[s : s + rays_per_chunk], dirs[s : s + rays_per_chunk]
        pts = o[:, None, :] + samples.t[None, :, None] * d[:, None, :]
        sigma, rgb = scene.field(pts)
        out[s : s + rays_per_chunk] = composite_arrays(
            sigma[..., None], rgb[..., None, :], np.broadcast_to(samples.deltas, sigma.shape)
        )[:, 0]
    return out.reshape(camera.height, camera.width, 3)


def oracle_weights(scene: SyntheticScene, origin, direction, samples) -> np.ndarray:
    """Compositing weights of the analytic field along one ray."""
    pts = np.asarray(origin)[None] + samples.t[:, None] * np.asarray(direction)[None]
    sigma, _ = scene.field(pts)
    return compositing_weights(sigma, samples.deltas)


def _q(x: float) -> float:
    """Round to the 9 significant digits stored in cameras.txt."""
    return float(f"{x:.9g}")


def orbit_cameras(
    n_train: int = 12,
    n_test: int = 4,
    width: int = 64,
    height: int = 64,
    radius: float = 2.5,
    elevation: float = 0.75,
    fov_deg: float = 45.0,
    near: float = 1.0,
    far: float = 4.5,
) -> tuple[list[Camera], list[str]]:
    """Cameras on a horizontal circle around the origin, all looking at it.

    Test views sit halfway between consecutive train views.  Returns the
    cameras and their split tags; all values are pre-rounded so they survive
    a cameras.txt round trip unchanged.
    """
    focal = _q(0.5 * width / math.tan(math.radians(fov_deg) / 2))
    angles = [2 * math.pi * k / n_train for k in range(n_train)]
    tags = ["train"] * n_train
    offset = math.pi / n_train if n_train else 0.0
    angles += [2 * math.pi * k / n_test + offset for k in range(n_test)] if n_test else []
    tags += ["test"] * n_test
    cams = []
    for ang in angles:
        eye = (radius * math.cos(ang), elevation, radius * math.sin(ang))
        pose = np.vectorize(_q)(look_at(eye))
        cams.append(
            Camera(
                fx=focal,
                fy=focal,
                cx=width / 2,
                cy=height / 2,
                pose=pose,
                width=width,
                height=height,
                near=near,
                far=far,
            )
        )
    return cams, tags


# ----------------------------------------------------------------------------
# files


def to_bytes(img) -> np.ndarray:
    """float [0, 1] -> uint8 with round-half-up."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(
        np.uint8
    )


def save_image(path, img) -> None:
    path = Path(path)
    try:
        Image.fromarray(to_bytes(img)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"{path}: cannot write PNG: {exc}") from exc


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read image: {exc}") from exc
    return arr / 255.0


@dataclass
class Dataset:
    root: Path
    cameras: list[Camera]
    names: list[str]
    splits: list[str]

    def indices(self, split: str) -> list[int]:
        return [k for k, s in enumerate(self.splits) if s == split]

    def image_path(self, k: int) -> Path:
        return self.root / "images" / self.names[k]

    def image(self, k: int) -> np.ndarray:
        img = load_image(self.image_path(k))
        cam = self.cameras[k]
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(
                f"{self.image_path(k)}: image is {img.shape[1]}x{img.shape[0]}, "
                f"camera says {cam.width}x{cam.height}"
            )
        return img


def format_camera_line(name: str, cam: Camera) -> str:
    vals = [cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far, *cam.pose.ravel()]
    return " ".join([name, str(cam.width), str(cam.height)] + [f"{v:.9g}" for v in vals])


def parse_camera_line(line: str, where: str) -> tuple[str, Camera]:
    parts = line.split()
    if len(parts) != CAMERA_FIELDS:
        raise FormatError(f"{where}: expected {CAMERA_FIELDS} fields, found {len(parts)}")
    try:
        width, height = int(parts[1]), int(parts[2])
        fx, fy, cx, cy, near, far = (float(v) for v in parts[3:9])
        pose = np.array([float(v) for v in parts[9:]]).reshape(3, 4)
        cam = Camera(fx, fy, cx, cy, pose, width, height, near, far)
    except (ValueError, ConfigError) as exc:
        raise FormatError(f"{where}: {exc}") from exc
    return parts[0], cam


def save_dataset(root, cameras, names, splits, images=None) -> Dataset:
    """Write cameras.txt, split.txt and (optionally) one PNG per camera."""
    root = Path(root)
    if not len(cameras) == len(names) == len(splits):
        raise ValueError("cameras, names and splits must have equal length")
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [format_camera_line(n, c) for n, c in zip(names, cameras)]
    (root / "cameras.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    split_lines = [f"{n} {s}" for n, s in zip(names, splits)]
    (root / "split.txt").write_text("\n".join(split_lines) + "\n", encoding="utf-8")
    if images is not None:
        for name, img in zip(names, images):
            save_image(root / "images" / name, img)
    return Dataset(root, list(cameras), list(names), list(splits))


def load_dataset(root) -> Dataset:
    root = Path(root)
    cam_file = root / "cameras.txt"
    if not cam_file.is_file():
        raise FormatError(f"{root}: no cameras.txt")
    names, cameras = [], []
    for lineno, line in enumerate(cam_file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        name, cam = parse_camera_line(line, f"{cam_file}:{lineno}")
        names.append(name)
        cameras.append(cam)
    if not cameras:
        raise FormatError(f"{cam_file}: no cameras listed")

    split_file = root / "split.txt"
    if not split_file.is_file():
        raise FormatError(f"{root}: no split.txt")
    tags = {}
    for lineno, line in enumerate(split_file.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise FormatError(f"{split_file}:{lineno}: expected '<filename> train|test'")
        tags[parts[0]] = parts[1]
    missing = [n for n in names if n not in tags]
    if missing:
        raise FormatError(f"{split_file}: no split tag for {missing[0]}")
    dims = {(c.width, c.height) for c in cameras}
    if len(dims) != 1:
        raise FormatError(f"{cam_file}: cameras disagree on image size {sorted(dims)}")
    return Dataset(root, cameras, names, [tags[n] for n in names])
