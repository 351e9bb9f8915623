"""Per-epoch ray/occupancy datasets.

One ray per pixel per constraint, n = image width samples per ray. Rays store
t-parameters rather than 3D points: sample positions are reconstructed from
the current light/screen vectors at loss time, so they stay differentiable
while the jitter pattern and truncation mask stay fixed for the epoch.

Truncation clips each ray to the intersection of every constraint's frustum
prism. The footprint of a frustum is affine in the ray parameter, so the
clip is a classic slab test; the resulting [t_lo, t_hi] interval is a
non-differentiable per-epoch mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch

from .geometry import Frustum, ProjectionConstraint, frustum_for, project_to_pixel, ray_endpoints
from .images import TargetImage

# Salt for the batch-order stream so it never collides with jitter streams.
_ORDER_SALT = 0x5EED


@dataclass
class ConstraintRays:
    """All rays of one constraint for one epoch, rectangular (rays, n)."""

    constraint_index: int
    width: int
    height: int
    px: np.ndarray
    py: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray

    @property
    def ray_count(self) -> int:
        return self.px.shape[0]

    @property
    def samples_per_ray(self) -> int:
        return self.t.shape[1]

    def survive_mask(self, rows: np.ndarray | None = None) -> np.ndarray:
        if rows is None:
            rows = slice(None)
        t = self.t[rows]
        return (t >= self.t_lo[rows, None]) & (t <= self.t_hi[rows, None])


@dataclass
class EpochDataset:
    seed: int
    epoch: int
    per_constraint: list[ConstraintRays]
    order: np.ndarray  # (total, 2) shuffled [block index, row] pairs
    unsatisfiable: int  # label-1 rays whose truncation interval is empty

    @property
    def ray_count(self) -> int:
        return self.order.shape[0]

    def batches(self, batch_size: int) -> Iterator[dict[int, np.ndarray]]:
        """Partition the shuffled ray order into per-block row groups."""
        total = self.ray_count
        for start in range(0, total, batch_size):
            chunk = self.order[start : start + batch_size]
            groups: dict[int, list[int]] = {}
            for blk, row in chunk:
                groups.setdefault(int(blk), []).append(int(row))
            yield {blk: np.asarray(rows, dtype=np.int64) for blk, rows in groups.items()}


def midpoint_t(n: int) -> np.ndarray:
    """Deterministic midpoint sample parameters used for rendering."""
    return (np.arange(n, dtype=np.float64) + 0.5) / n


def stratified_t(n_rays: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw inside each of n equal segments, per ray."""
    u = rng.random((n_rays, n))
    return (np.arange(n, dtype=np.float64)[None, :] + u) / n


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened center coordinates for every pixel, scan order (row-major)."""
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    return px.ravel(), py.ravel()


def truncation_intervals(
    r_s: np.ndarray, r_e: np.ndarray, frusta: Sequence[Frustum]
) -> tuple[np.ndarray, np.ndarray]:
    """Clip rays to the frustum intersection: [t_lo, t_hi] within [0, 1].

    r_s, r_e: (R, 3) endpoint arrays. Empty intervals come back with
    t_lo > t_hi. Rays parallel to a slab are kept or dropped wholesale by
    their constant footprint coordinate.
    """
    n_rays = r_s.shape[0]
    lo = np.zeros(n_rays)
    hi = np.ones(n_rays)
    for fr in frusta:
        with torch.no_grad():
            px0, py0 = project_to_pixel(
                torch.from_numpy(r_s), fr.light, fr.screen, fr.distance, fr.width, fr.height
            )
            px1, py1 = project_to_pixel(
                torch.from_numpy(r_e), fr.light, fr.screen, fr.distance, fr.width, fr.height
            )
        px0, py0 = px0.numpy(), py0.numpy()
        px1, py1 = px1.numpy(), py1.numpy()
        # Each bound in the form g(t) = g0 + (g1 - g0) t >= 0.
        for g0, g1 in (
            (px0, px1),
            (fr.width - px0, fr.width - px1),
            (py0, py1),
            (fr.height - py0, fr.height - py1),
        ):
            dg = g1 - g0
            flat = np.abs(dg) < 1e-15
            # Parallel to this slab: feasible iff already inside.
            bad = flat & (g0 < 0)
            lo[bad] = 1.0
            hi[bad] = 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                t_cross = -g0 / dg
            rising = ~flat & (dg > 0)
            falling = ~flat & (dg < 0)
            lo[rising] = np.maximum(lo[rising], t_cross[rising])
            hi[falling] = np.minimum(hi[falling], t_cross[falling])
    return lo, hi


def build_dataset(
    targets: Sequence[TargetImage],
    constraints: Sequence[ProjectionConstraint],
    seed: int,
    epoch: int,
) -> EpochDataset:
    """Assemble the epoch's rays: jittered t, labels, truncation intervals.

    Jitter and shuffle order derive from (seed, epoch, constraint) seed
    sequences, so a rebuild with the same arguments is bit-identical.
    """
    if len(targets) != len(constraints):
        raise ValueError("need one target per constraint")
    frusta = [frustum_for(c, img.width, img.height) for c, img in zip(constraints, targets)]
    blocks: list[ConstraintRays] = []
    unsatisfiable = 0
    for ci, (img, con) in enumerate(zip(targets, constraints)):
        w, h = img.width, img.height
        px, py = pixel_centers(w, h)
        labels = img.mask.ravel().astype(np.uint8)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, ci])))
        t = stratified_t(px.shape[0], w, rng)
        with torch.no_grad():
            r_s, r_e = ray_endpoints(
                con.light, con.screen, con.distance, w, h,
                torch.from_numpy(px), torch.from_numpy(py),
            )
        t_lo, t_hi = truncation_intervals(r_s.numpy(), r_e.numpy(), frusta)
        unsatisfiable += int(((t_lo > t_hi) & (labels == 1)).sum())
        blocks.append(
            ConstraintRays(
                constraint_index=ci, width=w, height=h,
                px=px, py=py, labels=labels, t=t, t_lo=t_lo, t_hi=t_hi,
            )
        )
    pairs = np.concatenate(
        [
            np.stack(
                [np.full(b.ray_count, bi, dtype=np.int64), np.arange(b.ray_count, dtype=np.int64)],
                axis=1,
            )
            for bi, b in enumerate(blocks)
        ]
    )
    order_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, epoch, _ORDER_SALT]))
    )
    pairs = pairs[order_rng.permutation(pairs.shape[0])]
    return EpochDataset(
        seed=seed, epoch=epoch, per_constraint=blocks, order=pairs, unsatisfiable=unsatisfiable
    )
