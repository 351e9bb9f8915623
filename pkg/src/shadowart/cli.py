"""Command-line entry points.

Subcommands: synthesize (full training run from a JSON job config), render
(shadow image from a checkpoint), extract (mesh from a checkpoint), evaluate
(IoU/Dice between two shadow images).

Exit codes: 0 success, 2 validation error (config/arguments), 3 runtime
abort (non-finite loss). The report is line-delimited JSON and contains no
wall-clock timings, so identical seeded runs produce byte-identical reports;
timings go to the log stream on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import images, reconstruct
from .field import load_checkpoint
from .geometry import FacingViolation, ProjectionConstraint, frustum_for
from .images import ImageFormatError, TargetImage
from .losses import LossWeights
from .registration import render_shadow
from .trainer import NonFiniteLossError, TrainConfig, train

CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

log = logging.getLogger("shadowart")


class ValidationError(ValueError):
    pass


@dataclasses.dataclass
class ConstraintSpec:
    image: str
    light: list[float]
    screen: list[float]
    distance: float = 0.5


@dataclasses.dataclass
class JobConfig:
    version: int = CONFIG_VERSION
    output_dir: str = "out"
    seed: int = 0
    grid_resolution: int = 200
    mesh_tau: float = 0.5
    shadow_threshold: float = 0.5
    pad: int = 0
    constraints: list[ConstraintSpec] = dataclasses.field(default_factory=list)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "JobConfig":
        if not isinstance(raw, dict):
            raise ValidationError("config root must be a JSON object")
        if raw.get("version") != CONFIG_VERSION:
            raise ValidationError(
                f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}"
            )
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cons = []
        for i, entry in enumerate(raw.get("constraints", [])):
            try:
                cons.append(ConstraintSpec(**entry))
            except TypeError as exc:
                raise ValidationError(f"constraint {i}: {exc}") from exc
        if not cons:
            raise ValidationError("config needs at least one constraint")
        train_raw = dict(raw.get("train", {}))
        weights = LossWeights(**train_raw.pop("weights", {}))
        try:
            train_cfg = TrainConfig(weights=weights, **train_raw)
        except TypeError as exc:
            raise ValidationError(f"train section: {exc}") from exc
        return cls(
            version=raw["version"],
            output_dir=raw.get("output_dir", "out"),
            seed=raw.get("seed", 0),
            grid_resolution=raw.get("grid_resolution", 200),
            mesh_tau=raw.get("mesh_tau", 0.5),
            shadow_threshold=raw.get("shadow_threshold", 0.5),
            pad=raw.get("pad", 0),
            constraints=cons,
            train=train_cfg,
        )


def parse_job_config(path: Path) -> JobConfig:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(
            f"{path}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}"
        ) from exc
    return JobConfig.from_dict(raw)


def _load_targets(cfg: JobConfig, config_dir: Path) -> list[TargetImage]:
    targets = []
    for i, spec in enumerate(cfg.constraints):
        path = Path(spec.image)
        if not path.is_absolute():
            path = config_dir / path
        try:
            targets.append(
                images.load_binary_image(
                    path, threshold=cfg.shadow_threshold, index=i, pad=cfg.pad
                )
            )
        except (ImageFormatError, OSError) as exc:
            raise ValidationError(f"constraint {i}: {exc}") from exc
    return targets


def _build_constraints(cfg: JobConfig) -> list[ProjectionConstraint]:
    cons = []
    for i, spec in enumerate(cfg.constraints):
        con = ProjectionConstraint.create(
            spec.light, spec.screen, distance=spec.distance, index=i
        )
        try:
            con.validate()
        except (FacingViolation, ValueError) as exc:
            raise ValidationError(str(exc)) from exc
        cons.append(con)
    return cons


def _json_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_synthesize(args) -> int:
    cfg = parse_job_config(Path(args.config))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    else:
        cfg.train.seed = cfg.seed
    out_dir = Path(args.out) if args.out else Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.debug_overlays:
        cfg.train.debug_overlay_dir = str(out_dir / "debug")

    targets = _load_targets(cfg, Path(args.config).resolve().parent)
    constraints = _build_constraints(cfg)
    result = train(targets, constraints, cfg.train, out_dir=out_dir)

    frusta = [
        frustum_for(c, t.width, t.height)
        for c, t in zip(result.constraints, result.targets)
    ]
    grid = reconstruct.evaluate_grid(result.field, cfg.grid_resolution, frusta)
    mesh = reconstruct.marching_cubes(grid, tau=cfg.mesh_tau)
    reconstruct.export_obj(out_dir / "mesh.obj", mesh)
    normalized = reconstruct.normalize_mesh(mesh)
    watertight = reconstruct.is_watertight(mesh)

    report_path = out_dir / "report.jsonl"
    with open(report_path, "w", encoding="utf-8") as fh:
        _json_line(fh, {
            "record": "job",
            "version": CONFIG_VERSION,
            "seed": cfg.seed,
            "epochs": cfg.train.epochs,
            "constraints": len(constraints),
            "grid_resolution": cfg.grid_resolution,
        })
        for stats in result.report.epochs:
            _json_line(fh, {"record": "epoch", **stats})
        for reg in result.report.registration:
            _json_line(fh, {"record": "registration", **reg})
        for i, con in enumerate(result.constraints):
            shadow = render_shadow(
                result.field, con, result.targets[i].width, result.targets[i].height,
                tau=cfg.train.weights.tau, frusta=frusta,
            )
            images.write_pgm(out_dir / f"render_{i}.pgm", shadow.mask)
            images.write_png(out_dir / f"render_{i}.png", shadow.mask)
            images.write_pgm(out_dir / f"target_{i}.pgm", result.targets[i].mask)
            images.write_overlay_png(
                out_dir / f"overlay_{i}.png", result.targets[i].mask, shadow.mask
            )
            _json_line(fh, {
                "record": "constraint",
                "index": i,
                "iou": result.report.final_iou[i],
                "dice": result.report.final_dice[i],
                "initial_light": result.report.initial_lights[i],
                "light": result.report.final_lights[i],
                "initial_screen": result.report.initial_screens[i],
                "screen": result.report.final_screens[i],
                "registration_angle": result.transforms[i].angle,
                "registration_tx": result.transforms[i].tx,
                "registration_ty": result.transforms[i].ty,
            })
        _json_line(fh, {
            "record": "mesh",
            "vertices": int(mesh.vertices.shape[0]),
            "faces": int(mesh.faces.shape[0]),
            "area": reconstruct.mesh_area(mesh),
            "volume": reconstruct.mesh_volume(mesh),
            "watertight": watertight,
            "volume_reliable": watertight,
            "area_normalized": reconstruct.mesh_area(normalized),
            "volume_normalized": reconstruct.mesh_volume(normalized),
        })
        _json_line(fh, {"record": "diagnostics", **result.report.diagnostics})
    log.info("synthesize finished in %.1fs -> %s", result.report.wall_clock, out_dir)
    return EXIT_OK


def cmd_render(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    idx = args.constraint
    if not 0 <= idx < len(ck.constraints):
        raise ValidationError(f"constraint index {idx} out of range")
    width = args.width or ck.widths[idx]
    height = args.height or ck.heights[idx]
    if width <= 0 or height <= 0:
        raise ValidationError("checkpoint lacks image dims; pass --width/--height")
    frusta = [
        frustum_for(c, w, h)
        for c, w, h in zip(ck.constraints, ck.widths, ck.heights)
        if w > 0 and h > 0
    ]
    shadow = render_shadow(
        ck.field, ck.constraints[idx], width, height, tau=args.tau, frusta=frusta
    )
    out = Path(args.out)
    if out.suffix.lower() == ".png":
        images.write_png(out, shadow.mask)
    else:
        images.write_pgm(out, shadow.mask)
    return EXIT_OK


def cmd_extract(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    frusta = [
        frustum_for(c, w, h)
        for c, w, h in zip(ck.constraints, ck.widths, ck.heights)
        if w > 0 and h > 0
    ]
    grid = reconstruct.evaluate_grid(ck.field, args.resolution, frusta)
    mesh = reconstruct.marching_cubes(grid, tau=args.tau)
    if args.normalize:
        mesh = reconstruct.normalize_mesh(mesh)
    reconstruct.export_obj(args.out, mesh)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        a = images.load_binary_image(args.render, threshold=args.threshold)
        b = images.load_binary_image(args.target, threshold=args.threshold)
    except (ImageFormatError, OSError) as exc:
        raise ValidationError(str(exc)) from exc
    if a.mask.shape != b.mask.shape:
        raise ValidationError(
            f"image sizes differ: {a.mask.shape} vs {b.mask.shape}"
        )
    print(json.dumps({
        "iou": images.iou(a.mask, b.mask),
        "dice": images.dice(a.mask, b.mask),
    }, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shadowart",
        description="Synthesize 3D geometry whose shadows match target images.",
    )
    parser.add_argument("--threads", type=int, default=0,
                        help="torch intra-op threads; 1 gives bit-deterministic runs")
    parser.add_argument("--verbose", action="store_true", help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="train a field from a JSON job config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's output_dir")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--debug-overlays", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("render", help="render a constraint's shadow from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--constraint", type=int, default=0)
    p.add_argument("--width", type=int, default=0)
    p.add_argument("--height", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("extract", help="extract an OBJ mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--normalize", action="store_true",
                   help="rescale so the bbox diagonal is 1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="IoU/Dice between two shadow images")
    p.add_argument("--render", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.threads > 0:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except ValidationError as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except NonFiniteLossError as exc:
        log.error("runtime abort: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
