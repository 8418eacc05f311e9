"""Command-line entry point: ``datseg gen-data | train | eval | ablate | inspect``.

Exit codes: 0 success, 1 other failures, 2 bad config or missing input,
3 training diverged.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io
from .annotation import SCHEMES, sample_labels
from .backbone import logits
from .lap import ClassCovarianceTracker, LapConfig, generate_lap
from .rad import RadConfig, generate_rad, partition_superpoints
from .scenegen import CLASS_NAMES, SceneSpec, generate_dataset
from .trainer import LOG_COLUMNS, TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("datseg")

SCENE_KEYS = ("n_points", "k_classes", "extent", "instances_per_class", "instance_color_std",
              "noise_sigma", "max_retries")
PATH_KEYS = {"val_data": ""}


class UsageError(Exception):
    """Bad input that should exit with status 2."""


# -- run config --------------------------------------------------------------

def run_defaults() -> dict[str, object]:
    out = io.dataclass_defaults(TrainConfig, LapConfig, RadConfig)
    spec = SceneSpec()
    out.update({k: getattr(spec, k) for k in SCENE_KEYS})
    out.update(PATH_KEYS)
    return out


def _pick(cls, flat):
    return {f.name: flat[f.name] for f in fields(cls) if f.name in flat}


def build_configs(flat: dict) -> tuple[TrainConfig, SceneSpec]:
    try:
        lap = LapConfig(**_pick(LapConfig, flat))
        rad = RadConfig(**_pick(RadConfig, flat))
        train_cfg = TrainConfig(**{k: v for k, v in _pick(TrainConfig, flat).items()
                                   if k not in ("lap", "rad")}, lap=lap, rad=rad)
        spec = SceneSpec(**{k: flat[k] for k in SCENE_KEYS})
    except (TypeError, ValueError) as exc:
        raise io.ConfigError(str(exc)) from None
    return train_cfg, spec


def load_run_config(path: str | None, overrides: dict | None = None) -> dict:
    text = Path(path).read_text() if path else ""
    flat = io.parse_config(text, run_defaults())
    flat.update(overrides or {})
    return flat


# -- dataset layout ----------------------------------------------------------

def scene_name(i: int) -> str:
    return f"scene_{i:04d}.scene"


def weak_name(i: int, scheme: str) -> str:
    return f"scene_{i:04d}.{scheme}.weak"


def generate_data(out: Path, spec: SceneSpec, n_scenes: int, seed: int) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_dataset(spec, n_scenes, seed)
    names = []
    for i, scene in enumerate(scenes):
        io.write_scene(out / scene_name(i), scene)
        names.append(scene_name(i))
        for j, scheme in enumerate(SCHEMES):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i, 1000 + j]))
            io.write_weak(out / weak_name(i, scheme), sample_labels(scene, scheme, rng))
    return io.write_manifest(out, names, [s.n_points for s in scenes], spec.k_classes,
                             scenes[0].cloud.feat_dim, seed, label_schemes=list(SCHEMES),
                             class_names=list(CLASS_NAMES[:spec.k_classes]))


def load_labels(directory: Path, manifest: dict, scheme: str):
    labels = []
    for i in range(len(manifest["scenes"])):
        path = directory / weak_name(i, scheme)
        if not path.exists():
            raise UsageError(f"missing weak labels {path}")
        labels.append(io.read_weak(path))
    return labels


def load_data(directory) -> tuple[list, dict]:
    directory = Path(directory)
    try:
        return io.load_dataset(directory)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return io.load_params(path)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec(n_points=args.points, k_classes=args.classes)
    path = generate_data(Path(args.out), spec, args.scenes, args.seed)
    log.info("wrote %d scenes and %s", args.scenes, path)
    return 0


def train_overrides(args) -> dict:
    out = {}
    if args.no_lap:
        out["use_lap"] = False
    if args.no_rad:
        out["use_rad"] = False
    if args.no_cpg:
        out["use_cpg"] = False
    if args.no_coord_perturb:
        out["perturb_coords"] = False
    if args.noise_baseline is not None:
        out["noise_baseline"] = args.noise_baseline
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def run_training(data_dir, scheme, flat, ckpt: Path):
    """Train from a dataset directory and write checkpoint, step log and validation log."""
    config, _ = build_configs(flat)
    scenes, manifest = load_data(data_dir)
    labels = load_labels(Path(data_dir), manifest, scheme)
    val = load_data(flat["val_data"])[0] if flat["val_data"] else None
    result = train(scenes, labels, config, val)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    io.save_params(ckpt, result.params)
    io.write_csv(ckpt.with_suffix(".log.csv"), LOG_COLUMNS, (r.row() for r in result.log))
    lap_rows = [r.lap.csv_row(r.step) for r in result.log if r.lap is not None]
    io.write_csv(ckpt.with_suffix(".lap.csv"),
                 ["step", "lds", "mean_norm_gc", "mean_norm_gf",
                  *(f"count_{k}" for k in range(manifest["classes"]))], lap_rows)
    if result.validation:
        io.write_csv(ckpt.with_suffix(".val.csv"), ["step", "miou"],
                     [(step, m.miou) for step, m in result.validation])
    return result


def cmd_train(args) -> int:
    flat = load_run_config(args.config, train_overrides(args))
    result = run_training(args.data, args.labels, flat, Path(args.out))
    last = result.log[-1].L_total if result.log else float("nan")
    log.info("trained %d steps, final L_total %.4f, checkpoint %s", len(result.log), last, args.out)
    return 0


def write_report(path, metrics, names) -> None:
    rows = [(names[k] if k < len(names) else str(k), metrics.iou[k], metrics.accuracy[k])
            for k in range(metrics.n_classes)]
    rows.append(("mIoU", metrics.miou, ""))
    io.write_csv(path, ["class", "iou", "accuracy"], rows)


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    scenes, manifest = load_data(args.data)
    try:
        metrics = evaluate(scenes, params)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_report(args.report, metrics, manifest.get("class_names", []))
    print(f"mIoU {metrics.miou:.4f}")
    return 0


def parse_grid(items) -> list[tuple[str, list[str]]]:
    grid = []
    defaults = run_defaults()
    for item in items:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or not values.strip():
            raise io.ConfigError(f"grid entry {item!r} is not KEY=V1,V2,...")
        if key not in defaults:
            raise io.ConfigError(f"unknown grid key {key!r}")
        sep = ";" if isinstance(defaults[key], tuple) else ","
        grid.append((key, [v.strip() for v in values.split(sep) if v.strip()]))
    return grid


def _ablate_cell(job):
    index, data, scheme, flat, eval_data, out = job
    cell_dir = Path(out) / f"cell_{index:03d}"
    result = run_training(data, scheme, flat, cell_dir / "model.ckpt")
    config, _ = build_configs(flat)
    scenes = load_data(eval_data)[0]
    metrics = evaluate(scenes, result.params, config.k)
    write_report(cell_dir / "report.csv", metrics, [])
    return metrics.miou, (result.log[-1].L_total if result.log else float("nan"))


def cmd_ablate(args) -> int:
    grid = parse_grid(args.grid)
    base = load_run_config(args.config, {"seed": args.seed} if args.seed is not None else None)
    defaults = run_defaults()
    keys = [k for k, _ in grid]
    cells, jobs = [], []
    for i, combo in enumerate(itertools.product(*(v for _, v in grid))):
        flat = dict(base)
        for key, text in zip(keys, combo):
            try:
                flat[key] = io.coerce(text.replace(";", ","), defaults[key])
            except ValueError as exc:
                raise io.ConfigError(f"{key}: {exc}") from None
        build_configs(flat)  # fail fast on invalid combinations
        cells.append(combo)
        jobs.append((i, args.data, args.labels, flat, args.eval_data or args.data, args.out))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablate_cell, jobs))
    else:
        results = [_ablate_cell(j) for j in jobs]
    rows = [(i, *combo, miou, loss) for i, (combo, (miou, loss)) in enumerate(zip(cells, results))]
    io.write_csv(Path(args.out) / "summary.csv", ["cell", *keys, "miou", "final_L_total"], rows)
    log.info("ablation of %d cells written to %s", len(rows), args.out)
    return 0


def cmd_inspect(args) -> int:
    params = load_checkpoint(args.ckpt)
    if not Path(args.scene).is_file():
        raise UsageError(f"scene {args.scene} not found")
    scene = io.read_scene(args.scene)
    config, _ = build_configs(load_run_config(args.config))
    seed = config.seed if args.seed is None else args.seed
    lap_rng, rad_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    cloud = scene.cloud
    if (params.n_classes, params.feat_dim) != (scene.n_classes, cloud.feat_dim):
        raise UsageError("checkpoint does not match the scene's classes or feature dimension")
    clean = logits(cloud, params, config.k)
    partition = partition_superpoints(cloud, config.rad.cell_size)
    if args.emit_superpoints:
        io.write_ply(args.emit_superpoints, cloud.coords, io.region_palette(partition.region_of))
    if args.emit_lap:
        tracker = ClassCovarianceTracker(params.n_classes, cloud.feat_dim)
        pert, _ = generate_lap(cloud, params, config.lap, tracker, lap_rng, class_aware=config.use_cpg,
                               perturb_coords=config.perturb_coords, clean_logits=clean, k=config.k)
        # colour by feature shift relative to its budget plus coordinate shift relative to its budget
        mag = (np.linalg.norm(pert.r_c, axis=1) / max(config.lap.eps_c, 1e-300)
               + np.linalg.norm(pert.r_f, axis=1) / max(config.lap.eps_f, 1e-300))
        io.write_ply(args.emit_lap, pert.cloud.coords, io.magnitude_colors(mag))
    if args.emit_rad:
        deformed, _, _ = generate_rad(cloud, partition, params, config.rad, rad_rng,
                                      clean_logits=clean, ip=config.lap.ip, k=config.k)
        io.write_ply(args.emit_rad, deformed.coords, io.region_palette(partition.region_of))
    return 0


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on weak labels")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", choices=SCHEMES, default="otoc")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--no-lap", action="store_true")
    p.add_argument("--no-rad", action="store_true")
    p.add_argument("--no-cpg", action="store_true")
    p.add_argument("--no-coord-perturb", action="store_true")
    p.add_argument("--noise-baseline", choices=("off", "coords", "feats", "both"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a Cartesian grid of configs")
    p.add_argument("--grid", action="append", required=True, metavar="KEY=V1,V2")
    p.add_argument("--out", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--labels", choices=SCHEMES, default="otoc")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="export perturbed geometry as PLY")
    p.add_argument("--scene", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--emit-lap")
    p.add_argument("--emit-rad")
    p.add_argument("--emit-superpoints")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except io.ConfigError as exc:
        print(f"datseg: config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"datseg: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"datseg: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"datseg: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
