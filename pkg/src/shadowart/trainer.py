"""Joint optimization of the occupancy field and the projection directions.

Each epoch rebuilds the ray dataset from the current (possibly re-registered)
targets, walks shuffled ray batches with Adam, renormalizes the light/screen
vectors to unit length after every step, and rejects any step that would push
a constraint's <l, s> above the facing margin (such a pair rolls back both
its vectors and its optimizer moments). Constraints whose configuration
already starts inside the margin therefore keep their vectors frozen.

Frozen parameter groups (optimize_lights / optimize_screens off) are never
touched by the optimizer and exit training bit-identical.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .field import AdamState, Checkpoint, OccupancyField, adam_step, gradients, save_checkpoint
from .geometry import Frustum, ProjectionConstraint, frustum_for
from .images import TargetImage, alpha_factor, alpha_factors, dice, iou, write_overlay_png
from .losses import LossWeights, assemble_batch, total_loss
from .registration import (
    RegistrationOutcome,
    RigidTransform2D,
    registration_round,
    render_shadow,
)
from .sampler import EpochDataset, build_dataset, midpoint_t, truncation_intervals
from .geometry import ray_endpoints

log = logging.getLogger("shadowart")

FACING_MARGIN = -0.05


class NonFiniteLossError(RuntimeError):
    """Raised when a batch loss leaves the finite range; training aborts."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4096
    seed: int = 0
    lr_field: float = 5e-4
    lr_directions: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    optimize_lights: bool = True
    optimize_screens: bool = True
    enable_registration: bool = True
    registration_period: int = 5
    alpha_mode: str = "global"  # or "per_image"
    weights: LossWeights = dc_field(default_factory=LossWeights)
    hidden_layers: int = 8
    hidden_width: int = 256
    encoding_frequencies: int = 6
    facing_margin: float = FACING_MARGIN
    checkpoint_every_epoch: bool = True
    debug_overlay_dir: str | None = None


@dataclass
class TrainResult:
    field: OccupancyField
    constraints: list[ProjectionConstraint]
    targets: list[TargetImage]            # final re-registered targets
    transforms: list[RigidTransform2D]    # cumulative original->current maps
    report: "TrainReport"


@dataclass
class TrainReport:
    epochs: list[dict] = dc_field(default_factory=list)
    registration: list[dict] = dc_field(default_factory=list)
    initial_lights: list[list[float]] = dc_field(default_factory=list)
    initial_screens: list[list[float]] = dc_field(default_factory=list)
    final_lights: list[list[float]] = dc_field(default_factory=list)
    final_screens: list[list[float]] = dc_field(default_factory=list)
    final_iou: list[float] = dc_field(default_factory=list)
    final_dice: list[float] = dc_field(default_factory=list)
    diagnostics: dict = dc_field(default_factory=dict)
    wall_clock: float = 0.0


def _vec(t: torch.Tensor) -> list[float]:
    return [float(x) for x in t.detach()]


def _current_frusta(
    constraints: Sequence[ProjectionConstraint], targets: Sequence[TargetImage]
) -> list[Frustum]:
    return [frustum_for(c, img.width, img.height) for c, img in zip(constraints, targets)]


def train(
    targets: Sequence[TargetImage],
    constraints: Sequence[ProjectionConstraint],
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run the full optimization; returns the trained field and final state."""
    if len(targets) != len(constraints):
        raise ValueError("need exactly one constraint per target image")
    for con in constraints:
        con.validate()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    originals = list(targets)
    current: list[TargetImage] = list(targets)
    transforms = [RigidTransform2D.identity() for _ in constraints]

    if config.alpha_mode == "per_image":
        alphas: Sequence[float] | float = alpha_factors(originals)
    else:
        alphas = alpha_factor(originals)

    field = OccupancyField(
        hidden_layers=config.hidden_layers,
        hidden_width=config.hidden_width,
        seed=config.seed,
    )
    from .field import EncodingConfig  # local to keep the import list short

    if config.encoding_frequencies != field.encoding.frequencies:
        field = OccupancyField(
            encoding=EncodingConfig(frequencies=config.encoding_frequencies),
            hidden_layers=config.hidden_layers,
            hidden_width=config.hidden_width,
            seed=config.seed,
        )

    adam_field = AdamState.for_params(
        field.parameters(), config.lr_field,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
    )
    dir_groups: list[list[torch.Tensor]] = []
    adam_dirs: list[AdamState | None] = []
    for con in constraints:
        group = []
        if config.optimize_lights:
            con.light.requires_grad_(True)
            group.append(con.light)
        if config.optimize_screens:
            con.screen.requires_grad_(True)
            group.append(con.screen)
        dir_groups.append(group)
        adam_dirs.append(
            AdamState.for_params(
                group, config.lr_directions,
                beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
            )
            if group
            else None
        )

    report = TrainReport(
        initial_lights=[_vec(c.light) for c in constraints],
        initial_screens=[_vec(c.screen) for c in constraints],
    )
    totals = {"rejected_steps": 0, "deficient_solves": 0, "skipped_pairs": 0}

    for e in range(config.epochs):
        epoch_start = time.perf_counter()
        dataset = build_dataset(current, constraints, config.seed, e)
        stats = run_epoch(
            field, constraints, dataset, config, e,
            adam_field, adam_dirs, dir_groups, alphas, out_path,
        )
        totals["rejected_steps"] += stats["rejected_steps"]
        totals["deficient_solves"] += stats.get("deficient_solves", 0)
        totals["skipped_pairs"] += stats.get("skipped_pairs", 0)

        frusta = _current_frusta(constraints, current)
        ious, dices = [], []
        for con, img in zip(constraints, current):
            shadow = render_shadow(
                field, con, img.width, img.height, tau=config.weights.tau, frusta=frusta
            )
            ious.append(iou(shadow.mask, img.mask))
            dices.append(dice(shadow.mask, img.mask))
        stats.update({"iou": ious, "dice": dices, "unsatisfiable": dataset.unsatisfiable})
        report.epochs.append(stats)
        log.info(
            "epoch %d done in %.1fs losses=%s iou=%s",
            e, time.perf_counter() - epoch_start, stats["losses"], ious,
        )

        if out_path is not None and config.checkpoint_every_epoch:
            _write_checkpoint(out_path / "checkpoint.npz", field, constraints, current,
                              e, adam_field, adam_dirs)

        if config.enable_registration and (e + 1) % config.registration_period == 0:
            outcomes = registration_round(
                field, constraints, originals, current, transforms,
                tau=config.weights.tau, frusta=frusta,
            )
            for oc in outcomes:
                report.registration.append(_registration_record(e, oc))
                log.info(
                    "registration epoch %d constraint %d accepted=%s %s",
                    e, oc.constraint_index, oc.accepted, oc.reason,
                )
            if config.debug_overlay_dir is not None:
                _write_debug_overlays(
                    Path(config.debug_overlay_dir), field, constraints, current, config, e
                )

    frusta = _current_frusta(constraints, current)
    for con, img in zip(constraints, current):
        shadow = render_shadow(
            field, con, img.width, img.height, tau=config.weights.tau, frusta=frusta
        )
        report.final_iou.append(iou(shadow.mask, img.mask))
        report.final_dice.append(dice(shadow.mask, img.mask))
    report.final_lights = [_vec(c.light) for c in constraints]
    report.final_screens = [_vec(c.screen) for c in constraints]
    report.diagnostics = totals
    report.wall_clock = time.perf_counter() - started

    if out_path is not None:
        _write_checkpoint(out_path / "checkpoint.npz", field, constraints, current,
                          config.epochs - 1, adam_field, adam_dirs)
    return TrainResult(
        field=field,
        constraints=list(constraints),
        targets=current,
        transforms=transforms,
        report=report,
    )


def run_epoch(
    field: OccupancyField,
    constraints: Sequence[ProjectionConstraint],
    dataset: EpochDataset,
    config: TrainConfig,
    epoch: int,
    adam_field: AdamState,
    adam_dirs: Sequence[AdamState | None],
    dir_groups: Sequence[Sequence[torch.Tensor]],
    alphas,
    out_path: Path | None = None,
) -> dict:
    """One pass over the shuffled batches; returns aggregated statistics."""
    field_params = field.parameters()
    loss_sums: dict[str, float] = {}
    diag_sums = {"rejected_steps": 0}
    batch_count = 0
    for groups in dataset.batches(config.batch_size):
        batch = assemble_batch(field, constraints, dataset, groups, alphas)
        if batch.total_rays == 0:
            continue
        total, parts, diag = total_loss(batch, config.weights, epoch)
        if not bool(torch.isfinite(total)):
            if out_path is not None:
                _write_checkpoint(
                    out_path / "abort_checkpoint.npz", field, constraints, None,
                    epoch, adam_field, adam_dirs,
                )
            raise NonFiniteLossError(
                f"non-finite loss at epoch {epoch} batch {batch_count}: {parts}"
            )
        all_params = list(field_params)
        for group in dir_groups:
            all_params.extend(group)
        grads = gradients(total, all_params)
        adam_step(field_params, grads[: len(field_params)], adam_field)

        cursor = len(field_params)
        for con, group, state in zip(constraints, dir_groups, adam_dirs):
            if not group:
                continue
            g = grads[cursor : cursor + len(group)]
            cursor += len(group)
            before = [p.detach().clone() for p in group]
            snap = state.snapshot()
            adam_step(group, g, state)
            with torch.no_grad():
                for p in group:
                    p.div_(torch.linalg.vector_norm(p))
                facing = float(torch.dot(con.light, con.screen))
            if facing >= config.facing_margin:
                with torch.no_grad():
                    for p, old in zip(group, before):
                        p.copy_(old)
                state.restore(snap)
                diag_sums["rejected_steps"] += 1

        for key, val in parts.items():
            loss_sums[key] = loss_sums.get(key, 0.0) + val
        for key, val in diag.items():
            diag_sums[key] = diag_sums.get(key, 0) + val
        batch_count += 1

    losses = {k: v / max(batch_count, 1) for k, v in loss_sums.items()}
    return {"epoch": epoch, "losses": losses, "batches": batch_count, **diag_sums}


def _registration_record(epoch: int, oc: RegistrationOutcome) -> dict:
    return {
        "epoch": epoch,
        "constraint": oc.constraint_index,
        "accepted": oc.accepted,
        "reason": oc.reason,
        "angle": oc.transform.angle,
        "tx": oc.transform.tx,
        "ty": oc.transform.ty,
        "cumulative_angle": oc.cumulative.angle,
        "cumulative_tx": oc.cumulative.tx,
        "cumulative_ty": oc.cumulative.ty,
        "residual": oc.residual,
    }


def _write_checkpoint(path, field, constraints, targets, epoch, adam_field, adam_dirs):
    widths = [t.width for t in targets] if targets else [0] * len(constraints)
    heights = [t.height for t in targets] if targets else [0] * len(constraints)
    save_checkpoint(
        path,
        Checkpoint(
            field=field,
            constraints=list(constraints),
            widths=widths,
            heights=heights,
            epoch=epoch,
            adam_field=adam_field,
            adam_dirs=list(adam_dirs),
        ),
    )


def _write_debug_overlays(base, field, constraints, targets, config, epoch):
    base.mkdir(parents=True, exist_ok=True)
    frusta = _current_frusta(constraints, targets)
    for con, img in zip(constraints, targets):
        shadow = render_shadow(
            field, con, img.width, img.height, tau=config.weights.tau, frusta=frusta
        )
        write_overlay_png(
            base / f"epoch{epoch:03d}_c{con.index}.png", img.mask, shadow.mask
        )


def multi_interval_fraction(
    field: OccupancyField,
    constraints: Sequence[ProjectionConstraint],
    targets: Sequence[TargetImage],
    tau: float = 0.5,
) -> float:
    """Fraction of shadow-labeled rays whose occupied samples split into
    more than one contiguous run (midpoint sampling, truncated rays).

    The cohesion loss exists to drive this toward zero; it is the training-
    quality diagnostic for multi-layered artifacts.
    """
    frusta = _current_frusta(constraints, targets)
    multi = 0
    labeled = 0
    with torch.no_grad():
        for con, img in zip(constraints, targets):
            w, h = img.width, img.height
            ys, xs = np.nonzero(img.mask)
            if xs.size == 0:
                continue
            px = torch.from_numpy(xs.astype(np.float64) + 0.5)
            py = torch.from_numpy(ys.astype(np.float64) + 0.5)
            r_s, r_e = ray_endpoints(con.light, con.screen, con.distance, w, h, px, py)
            t_mid = midpoint_t(w)
            t_lo, t_hi = truncation_intervals(r_s.numpy(), r_e.numpy(), frusta)
            keep = (t_mid[None, :] >= t_lo[:, None]) & (t_mid[None, :] <= t_hi[:, None])
            t = torch.from_numpy(np.broadcast_to(t_mid, keep.shape).copy())
            pts = r_s.unsqueeze(1) + t.unsqueeze(2) * (r_e - r_s).unsqueeze(1)
            occupied = np.zeros(keep.shape, dtype=bool)
            chunk = 2048
            for start in range(0, pts.shape[0], chunk):
                sl = slice(start, start + chunk)
                occupied[sl] = (field(pts[sl]) > tau).numpy()
            occupied &= keep
            alive = keep.any(axis=1)
            labeled += int(alive.sum())
            runs = np.diff(occupied[alive].astype(np.int8), axis=1) == 1
            starts = occupied[alive][:, 0].astype(np.int64) + runs.sum(axis=1)
            multi += int((starts > 1).sum())
    if labeled == 0:
        return 0.0
    return multi / labeled
