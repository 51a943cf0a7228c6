"""Command-line entry point: ``noisenerf <command> ...``.

Exit codes: 0 success, 2 configuration or usage error, 3 unreadable or
malformed file, 4 noise used with a different viewpoint or sample grid.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import persist
from .metrics import psnr, ssim
from .nerf import CameraPose, SampleConfig, ViewpointMismatch, init_params, render_view, train_nerf
from .persist import ConfigError, FormatError
from .scene import SECRET_KINDS, STANDARD_SCENES, make_poses, make_secret, oracle_render, standard_scene
from .stego import ABLATION_VARIANTS, embed, extract, run_ablation

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_MISMATCH = 0, 2, 3, 4

HELDOUT_SEED_OFFSET = 1000


def _json_number(x: float):
    return "inf" if math.isinf(x) else x


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- gen-scene


def cmd_gen_scene(args) -> int:
    try:
        scene = standard_scene(args.name)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    sample = SampleConfig()
    manifest = {"scene": scene.name, "resolution": args.resolution, "seed": args.seed,
                "train": [], "heldout": []}
    groups = [("train", args.views, args.seed),
              ("heldout", args.heldout, args.seed + HELDOUT_SEED_OFFSET)]
    for group, count, seed in groups:
        if count == 0:
            continue
        for k, pose in enumerate(make_poses(count, args.resolution, seed=seed)):
            stem = f"{group}_{k:03d}"
            persist.write_ppm(out / f"{stem}.ppm", oracle_render(scene, pose, args.oracle_samples, sample))
            persist.save_pose(out / f"{stem}.json", pose, sample)
            manifest[group].append({"image": f"{stem}.ppm", "view": f"{stem}.json"})
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {args.views} training and {args.heldout} held-out views to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _load_views(scene_dir: Path, group: str):
    manifest_path = scene_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{scene_dir} has no manifest.json; run gen-scene first")
    manifest = json.loads(manifest_path.read_text())
    views = []
    for entry in manifest.get(group, []):
        pose, _ = persist.load_pose(scene_dir / entry["view"])
        views.append((pose, persist.read_image(scene_dir / entry["image"])))
    return views


def _read_loss_csv(path: Path, rows: int) -> list[float]:
    with path.open() as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["iteration", "loss"]:
            raise FormatError(f"{path}: missing 'iteration,loss' header")
        losses = [float(r[1]) for r in reader]
    if len(losses) < rows:
        raise FormatError(f"{path}: has {len(losses)} rows, checkpoint expects {rows}")
    return losses[:rows]


def _write_loss_csv(path: Path, losses) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(losses):
            w.writerow([i, repr(float(loss))])


def cmd_train(args) -> int:
    cfg = persist.load_run_config(args.config)
    if cfg.scene_dir is None:
        raise ConfigError("train: config needs 'scene_dir'")
    cfg.out.mkdir(parents=True, exist_ok=True)
    weights_path, state_path = cfg.out / "weights.nnrf", cfg.out / "train_state.npz"
    loss_path = cfg.out / "loss.csv"
    dataset = _load_views(cfg.scene_dir, "train")
    if not dataset:
        raise ConfigError(f"{cfg.scene_dir}: manifest lists no training views")

    if args.resume:
        params = persist.load_weights(weights_path)
        state = persist.load_train_state(state_path)
        losses = _read_loss_csv(loss_path, state.iteration)
    else:
        model = dict(cfg.model)
        params = init_params(**model)
        state, losses = None, []

    params, history, state = train_nerf(params, dataset, cfg.train, state=state,
                                        stop=args.stop_after)
    losses += history
    persist.save_weights(weights_path, params)
    persist.save_train_state(state_path, state)
    _write_loss_csv(loss_path, losses)

    summary = {"iterations": state.iteration, "final_loss": losses[-1] if losses else None,
               "complete": state.iteration >= cfg.train.iters}
    if summary["complete"]:
        heldout = _load_views(cfg.scene_dir, "heldout")
        scores = [psnr(render_view(params, pose, cfg.sample), img) for pose, img in heldout]
        summary["heldout_psnr"] = [_json_number(s) for s in scores]
        if cfg.loss_threshold is not None and losses:
            summary["loss_threshold"] = cfg.loss_threshold
            summary["below_threshold"] = bool(losses[-1] < cfg.loss_threshold)
    _write_json(cfg.out / "train_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- embed / extract


def _resolve_secret(spec: str | None, pose: CameraPose, base: Path = Path(".")):
    if spec is None:
        raise ConfigError("a secret image (PPM path or procedural kind) is required")
    kind, _, seed = spec.partition(":")
    if kind in SECRET_KINDS:
        return make_secret(kind, pose.width, pose.height, seed=int(seed or 0)).pixels
    path = Path(spec)
    if not path.is_absolute() and not path.exists():
        path = base / spec
    if not path.exists():
        raise ConfigError(f"secret {spec!r} is neither a file nor one of {SECRET_KINDS}")
    return persist.read_image(path)


def _view_and_sample(view_path, fallback: SampleConfig):
    pose, sample = persist.load_pose(view_path)
    return pose, sample or fallback


def _noise_sidecar(noise_path: Path) -> Path:
    return noise_path.with_suffix(".view.json")


def cmd_embed(args) -> int:
    cfg = persist.load_run_config(args.config)
    weights = Path(args.weights) if args.weights else cfg.weights
    view = Path(args.view) if args.view else cfg.view
    if weights is None or view is None:
        raise ConfigError("embed needs --weights and --view (or the matching config keys)")
    params = persist.load_weights(weights)
    pose, sample = _view_and_sample(view, cfg.sample)
    secret = _resolve_secret(args.secret or cfg.secret, pose, Path(args.config).parent)
    out = Path(args.out) if args.out else cfg.out
    out.mkdir(parents=True, exist_ok=True)

    noise, report = embed(params, pose, secret, cfg.stego, sample)
    persist.save_noise(out / "noise.nnsz", noise)
    persist.save_pose(_noise_sidecar(out / "noise.nnsz"), pose, sample)
    with (out / "embed_report.csv").open("w", newline="") as fh:
        rows = list(report.rows())
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["iteration"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "embed_summary.json", report.summary())
    persist.write_ppm(out / "revealed.ppm", extract(params, pose, noise, sample))
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_extract(args) -> int:
    params = persist.load_weights(args.weights)
    noise_path = Path(args.noise)
    noise = persist.load_noise(noise_path)
    view = Path(args.view) if args.view else _noise_sidecar(noise_path)
    if not view.exists():
        raise ConfigError(f"no view file given and {view} does not exist")
    pose, sample = _view_and_sample(view, SampleConfig())
    img = extract(params, pose, noise, sample)
    out = Path(args.out) if args.out else noise_path.with_name("revealed.ppm")
    persist.write_ppm(out, img)
    if args.png:
        persist.write_png(out.with_suffix(".png"), img)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    params = persist.load_weights(args.weights)
    pose, sample = _view_and_sample(args.view, SampleConfig())
    persist.write_ppm(args.out, render_view(params, pose, sample))
    return EXIT_OK


def cmd_eval(args) -> int:
    a, b = persist.read_image(args.a), persist.read_image(args.b)
    if a.shape != b.shape:
        raise ConfigError(f"image sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    print(json.dumps({"psnr": _json_number(psnr(a, b)), "ssim": ssim(a, b)}))
    return EXIT_OK


# ---------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    cfg = persist.load_run_config(args.config)
    if cfg.weights is None or cfg.view is None:
        raise ConfigError("ablate: config needs 'weights' and 'view'")
    params = persist.load_weights(cfg.weights)
    pose, sample = _view_and_sample(cfg.view, cfg.sample)
    secret = _resolve_secret(cfg.secret or "checker", pose, Path(args.config).parent)
    cfg.out.mkdir(parents=True, exist_ok=True)

    runs = run_ablation(params, pose, secret, cfg.stego, cfg.seeds, sample,
                        log=lambda msg: print(msg, file=sys.stderr))
    table = write_ablation_csv(cfg.out, runs, cfg.checkpoints)
    print(table.read_text(), end="")
    return EXIT_OK


def write_ablation_csv(out: Path, runs, checkpoints) -> Path:
    """Write ``ablate_runs.csv`` (one row per run) and ``ablate.csv`` (variant means).

    Variants appear in the canonical order; any without runs are skipped.
    Returns the path of the summary table.
    """
    out = Path(out)
    cols = [f"{kind}_{c}" for c in checkpoints for kind in ("ssim", "loss")]
    with (out / "ablate_runs.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed"] + cols + ["final_loss"])
        for r in runs:
            w.writerow([r.variant, r.seed] + _checkpoint_values(r, checkpoints) + [r.final_loss])
    table = out / "ablate.csv"
    with table.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + cols + ["final_loss"])
        for name in ABLATION_VARIANTS:
            group = [r for r in runs if r.variant == name]
            if not group:
                continue
            vals = np.mean([_checkpoint_values(r, checkpoints) for r in group], axis=0)
            w.writerow([name] + [float(v) for v in vals]
                       + [float(np.mean([r.final_loss for r in group]))])
    return table


def _checkpoint_values(run, checkpoints) -> list:
    vals = []
    for c in checkpoints:
        vals += [run.report.ssim[c - 1], run.report.frame_loss[c - 1]]
    return vals


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisenerf", description="Train a small radiance field and hide images in its input noise.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="write a standard scene and its rendered dataset")
    p.add_argument("--name", required=True, help=f"one of {', '.join(sorted(STANDARD_SCENES))}")
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--heldout", type=int, default=3)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-samples", type=int, default=128)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="fit a radiance field to a generated scene")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in 'out'")
    p.add_argument("--stop-after", type=int, default=None,
                   help="checkpoint and stop once this many iterations are done")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="optimise noise that reveals a secret at one view")
    p.add_argument("--weights")
    p.add_argument("--view")
    p.add_argument("--secret", help="PPM path or procedural kind[:seed]")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="render the view a noise file was made for")
    p.add_argument("--weights", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--view", help="pose file; defaults to the sidecar written by embed")
    p.add_argument("--out")
    p.add_argument("--png", action="store_true", help="also write a PNG copy")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("render", help="clean render of a view")
    p.add_argument("--weights", required=True)
    p.add_argument("--view", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR and SSIM between two PPM images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four ablation variants")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ViewpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
