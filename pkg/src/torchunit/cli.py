"""Command-line entry points: generate, train, render, eval, ablate.

Exit codes: 0 success, 1 numeric failure (NaN), 2 usage or config error.
Every flag is validated before any output file is created.
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from pathlib import Path

from .errors import ConfigError, FormatError, NumericalError
from .metrics import psnr, ssim
from .render import render_image
from .scene import SCENES, load_dataset, load_scene, orbit_cameras, oracle_render, save_dataset, save_image
from .train import TrainConfig, evaluate, format_metric, load_checkpoint, train

log = logging.getLogger("torchunit")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

ABLATIONS = {
    "p": [("p=1", {"patch_size": 1}), ("p=3", {"patch_size": 3}), ("p=5", {"patch_size": 5}),
          ("p=7", {"patch_size": 7}), ("p=9", {"patch_size": 9})],
    "strategy": [("Sep.", {"strategy": "separate"}), ("Sha.", {"strategy": "shared"}),
                 ("Ours (synced)", {"strategy": "synced"})],
    "conv": [("mlp-style K=1", {"kernel_size": 1}), ("distance-aware K=3", {"kernel_size": 3})],
}


class UsageError(Exception):
    pass


def _parse_views(text: str) -> tuple[int, int]:
    try:
        a, b = text.split("+")
        n_train, n_test = int(a), int(b)
    except ValueError:
        raise UsageError(f"--views must look like T+E, got {text!r}") from None
    if n_train < 1 or n_test < 0:
        raise UsageError("--views needs at least one train view")
    return n_train, n_test


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("--size must be positive")
    return w, h


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _load_data(path: str):
    try:
        return load_dataset(path)
    except (FormatError, OSError) as exc:
        raise UsageError(f"--data: {exc}") from exc


def _load_ckpt(path: str):
    _require_file(path, "--ckpt")
    try:
        return load_checkpoint(path)
    except FormatError as exc:
        raise UsageError(f"--ckpt: {exc}") from exc


# ----------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    n_train, n_test = _parse_views(args.views)
    width, height = _parse_size(args.size)
    if args.steps < 1:
        raise UsageError("--steps must be positive")
    if args.scene not in SCENES and not Path(args.scene).is_file():
        raise UsageError(f"unknown scene {args.scene!r}; choose from {sorted(SCENES)} or a scene file")
    try:
        scene = load_scene(args.scene)
    except (FormatError, ConfigError) as exc:
        raise UsageError(f"--scene: {exc}") from exc

    cameras, splits = orbit_cameras(n_train, n_test, width, height)
    names = [f"view_{k:03d}.png" for k in range(len(cameras))]
    images = []
    for name, cam in zip(names, cameras):
        t0 = time.perf_counter()
        images.append(oracle_render(scene, cam, args.steps))
        print(f"{name}: rendered in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    save_dataset(args.out, cameras, names, splits, images)
    return EXIT_OK


def _train_config(args) -> TrainConfig | None:
    if args.config is None:
        if args.resume is None:
            raise UsageError("train needs --config (or --resume)")
        return None
    path = _require_file(args.config, "--config")
    cfg = TrainConfig.from_file(path)
    if args.strategy is not None and args.strategy != cfg.strategy:
        raise UsageError(f"--strategy {args.strategy} conflicts with config strategy {cfg.strategy}")
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    dataset = _load_data(args.data)
    if args.resume is not None:
        _require_file(args.resume, "--resume")
    train(cfg, dataset, args.out, resume=args.resume)
    return EXIT_OK


def cmd_render(args) -> int:
    state = _load_ckpt(args.ckpt)
    dataset = _load_data(args.data or state.data_dir)
    if not 0 <= args.camera_index < len(dataset.cameras):
        raise UsageError(f"--camera-index must be in [0, {len(dataset.cameras)}), got {args.camera_index}")
    cfg = state.config
    t0 = time.perf_counter()
    res = render_image(
        state.pair, dataset.cameras[args.camera_index], args.mode, cfg.n_coarse, cfg.n_fine,
        chunk=cfg.render_chunk, white_background=cfg.white_background,
    )
    wall = time.perf_counter() - t0
    save_image(args.out, res.image)
    print(f"mode={args.mode} rays={res.ray_count} wall_seconds={wall:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = _load_data(args.data)
    idx = dataset.indices(args.split)
    if not idx:
        raise UsageError(f"split {args.split!r} is empty")
    if args.sanity:
        rows = []
        for k in idx:
            gt = dataset.image(k)
            rows.append({"view": dataset.names[k], "psnr": psnr(gt, gt), "ssim": ssim(gt, gt)})
        mean_psnr = statistics.fmean(r["psnr"] for r in rows)
        mean_ssim = statistics.fmean(r["ssim"] for r in rows)
    else:
        if args.ckpt is None:
            raise UsageError("eval needs --ckpt unless --sanity is given")
        state = _load_ckpt(args.ckpt)
        res = evaluate(state, dataset, args.split, args.mode)
        rows, mean_psnr, mean_ssim = res["views"], res["psnr"], res["ssim"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["view", "psnr", "ssim"])
        for r in rows:
            w.writerow([r["view"], format_metric(r["psnr"]), format_metric(r["ssim"])])
        w.writerow(["mean", format_metric(mean_psnr), format_metric(mean_ssim)])
    print(f"{args.split}: mean psnr {mean_psnr:.3f} ssim {mean_ssim:.4f} over {len(rows)} views")
    return EXIT_OK


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated ints, got {text!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _mean_std(values: list[float]) -> str:
    if len(values) == 1:
        return f"{values[0]:.2f}"
    return f"{statistics.fmean(values):.2f} ± {statistics.stdev(values):.2f}"


def ablation_table(axis: str, cells: list[dict], iterations: int) -> str:
    """Markdown table for an ablation sweep; ``cells`` hold per-variant results."""
    lines = [
        f"# Ablation: {axis}",
        "",
        f"Desk-scale numbers ({iterations} iterations on the synthetic scene). "
        "They are not comparable to absolute PSNR/SSIM on real LLFF or KITTI-360 captures.",
        "",
        "| variant | seeds | test PSNR | test SSIM | checkpoints |",
        "|---|---|---|---|---|",
    ]
    for c in cells:
        links = " ".join(f"[s{s}]({p})" for s, p in zip(c["seeds"], c["ckpts"]))
        seeds = ",".join(str(s) for s in c["seeds"])
        lines.append(
            f"| {c['label']} | {seeds} | {_mean_std(c['psnr'])} | {_mean_std(c['ssim'])} | {links} |"
        )
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    if args.axis not in ABLATIONS:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {sorted(ABLATIONS)}")
    seeds = _seeds(args.seeds)
    base = TrainConfig.from_file(_require_file(args.config, "--config")) if args.config else TrainConfig()
    if args.iterations is not None:
        base = base.replace(iterations=args.iterations, eval_period=min(base.eval_period, args.iterations))
    variants = [(label, base.replace(**change)) for label, change in ABLATIONS[args.axis]]
    for _, cfg in variants:
        cfg.validate()
    dataset = _load_data(args.data)

    out = Path(args.out)
    cells = []
    for label, cfg in variants:
        cell = {"label": label, "seeds": [], "psnr": [], "ssim": [], "ckpts": []}
        for seed in seeds:
            tag = label.split()[0].replace("=", "").replace(".", "").lower()
            run_dir = out / f"{args.axis}_{tag}_seed{seed}"
            state = train(cfg.replace(seed=seed), dataset, run_dir)
            res = evaluate(state, dataset, "test")
            cell["seeds"].append(seed)
            cell["psnr"].append(res["psnr"])
            cell["ssim"].append(res["ssim"])
            cell["ckpts"].append(str((run_dir / "latest.tnrf").relative_to(out)))
            log.info("%s seed %d: psnr %.3f ssim %.4f", label, seed, res["psnr"], res["ssim"])
        cells.append(cell)
    table = ablation_table(args.axis, cells, base.iterations)
    (out / f"ablation_{args.axis}.md").write_text(table, encoding="utf-8")
    print(table)
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="torchunit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="oracle-render a synthetic dataset")
    g.add_argument("--scene", default="default", help="scene name or scene file")
    g.add_argument("--out", required=True)
    g.add_argument("--views", default="12+4", help="train+test view counts, e.g. 12+4")
    g.add_argument("--size", default="64x64", help="image size WxH")
    g.add_argument("--steps", type=int, default=16384, help="quadrature steps per ray")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--strategy", choices=("synced", "separate", "shared"))
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render one view from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera-index", type=int, required=True)
    r.add_argument("--mode", choices=("center", "stride"), default="center")
    r.add_argument("--out", required=True)
    r.add_argument("--data", help="dataset dir (defaults to the one recorded in the checkpoint)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("center", "stride"), default="center")
    e.add_argument("--out", required=True)
    e.add_argument("--sanity", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation sweep")
    a.add_argument("--data", required=True)
    a.add_argument("--axis", required=True, help="p | strategy | conv")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="base config file")
    a.add_argument("--iterations", type=int)
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"torchunit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"torchunit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
