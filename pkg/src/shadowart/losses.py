"""Loss terms over ray batches.

A batch groups rays by owning constraint into rectangular blocks of
(rays, samples-per-ray) tensors. Occupancy values at truncated-away samples
are exact zeros and every term masks them out, so dead samples contribute
neither value nor gradient. Rays whose truncation interval is empty never
enter a block; all per-ray normalizers divide by the count of surviving rays.

Gradients flow through both the field parameters and the light/screen
vectors: sample positions are rebuilt from the current vectors at assembly
time, and the surface-smoothness pipeline differentiates through neighbor
offsets and distances as well. Only discrete choices (neighbor indices,
surface membership, the truncation mask, the damping branch) are held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .field import OccupancyField
from .geometry import DTYPE, ProjectionConstraint, oj_distance, ray_endpoints
from .sampler import EpochDataset

DEGENERATE_PAIR_DIST = 1e-9
RANK_DEFICIENT_RATIO = 1e-10


@dataclass
class LossWeights:
    """Base loss weights plus shared thresholds.

    beta1 and beta4 are base values that double each epoch until ramp_epochs;
    beta2 and beta3 switch on after activation_epoch. effective_betas applies
    the schedule.
    """

    beta1: float = 1e-3
    beta2: float = 1e-4
    beta3: float = 1e-4
    beta4: float = 5e-2
    alpha: float = 1.0
    tau: float = 0.5
    temperature: float = 0.1
    theta: float = 0.4
    k1: int = 26
    k2: int = 6
    ramp_epochs: int = 3
    activation_epoch: int = 3


def effective_betas(weights: LossWeights, epoch: int) -> tuple[float, float, float, float]:
    ramp = 2.0 ** min(epoch, weights.ramp_epochs)
    late = epoch > weights.activation_epoch
    return (
        weights.beta1 * ramp,
        weights.beta2 if late else 0.0,
        weights.beta3 if late else 0.0,
        weights.beta4 * ramp,
    )


@dataclass
class RayBlock:
    """Surviving rays of one constraint within a batch."""

    constraint_index: int
    width: int
    height: int
    f: torch.Tensor          # (G, n) occupancy, exact zeros at dead samples
    mask: torch.Tensor       # (G, n) bool, True where the sample survived
    positions: torch.Tensor  # (G, n, 3), meaningful only where mask is True
    labels: torch.Tensor     # (G,) float64, 1 = shadow pixel
    trunc_len: torch.Tensor  # (G,) truncated segment length in scene units
    alpha: float = 1.0

    @property
    def ray_count(self) -> int:
        return int(self.f.shape[0])


@dataclass
class RayBatch:
    blocks: list[RayBlock] = dc_field(default_factory=list)

    @property
    def total_rays(self) -> int:
        return sum(b.ray_count for b in self.blocks)


def assemble_batch(
    field: OccupancyField,
    constraints: Sequence[ProjectionConstraint],
    dataset: EpochDataset,
    groups: Mapping[int, np.ndarray],
    alphas: Sequence[float] | float = 1.0,
) -> RayBatch:
    """Build differentiable blocks for the given per-block row selections.

    Rays whose truncation interval kept no samples are dropped here; the
    field is evaluated only at surviving sample positions.
    """
    batch = RayBatch()
    for bi, rows in sorted(groups.items()):
        rays = dataset.per_constraint[bi]
        con = constraints[rays.constraint_index]
        mask_np = rays.survive_mask(rows)
        alive = mask_np.any(axis=1)
        if not alive.any():
            continue
        rows = np.asarray(rows)[alive]
        mask = torch.from_numpy(rays.survive_mask(rows))
        t = torch.from_numpy(rays.t[rows])
        px = torch.from_numpy(rays.px[rows])
        py = torch.from_numpy(rays.py[rows])
        r_s, r_e = ray_endpoints(
            con.light, con.screen, con.distance, rays.width, rays.height, px, py
        )
        positions = r_s.unsqueeze(1) + t.unsqueeze(2) * (r_e - r_s).unsqueeze(1)
        f_alive = field(positions[mask])
        f = torch.zeros(mask.shape, dtype=DTYPE).masked_scatter(mask, f_alive)
        ray_len = 2.0 * oj_distance(con.light, con.screen, con.distance)
        span = torch.from_numpy(rays.t_hi[rows] - rays.t_lo[rows]).clamp(min=0.0)
        alpha = alphas[rays.constraint_index] if isinstance(alphas, (list, tuple)) else alphas
        batch.blocks.append(
            RayBlock(
                constraint_index=rays.constraint_index,
                width=rays.width,
                height=rays.height,
                f=f,
                mask=mask,
                positions=positions,
                labels=torch.from_numpy(rays.labels[rows].astype(np.float64)),
                trunc_len=span * ray_len,
                alpha=float(alpha),
            )
        )
    return batch


def ray_occupancy(f: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """1 - prod(1 - f) over each ray's samples; masked samples contribute 1."""
    if mask is not None:
        f = f * mask
    return 1.0 - torch.prod(1.0 - f, dim=-1)


def rendering_loss(batch: RayBatch) -> torch.Tensor:
    """Area-weighted mean squared error between labels and ray occupancies."""
    total = torch.zeros((), dtype=DTYPE)
    for blk in batch.blocks:
        occ = ray_occupancy(blk.f)
        total = total + blk.alpha * torch.sum((blk.labels - occ) ** 2)
    return total / batch.total_rays


def cohesion_loss(batch: RayBatch) -> torch.Tensor:
    """Mean squared occupancy jump between adjacent surviving samples.

    Inner normalizer is the ray's surviving sample count; rays with a single
    sample contribute zero but still count toward the batch mean.
    """
    total = torch.zeros((), dtype=DTYPE)
    for blk in batch.blocks:
        pair = blk.mask[:, 1:] & blk.mask[:, :-1]
        d2 = (blk.f[:, 1:] - blk.f[:, :-1]) ** 2 * pair
        nj = blk.mask.sum(dim=1).to(DTYPE)
        total = total + torch.sum(d2.sum(dim=1) / nj)
    return total / batch.total_rays


def binarization_loss(batch: RayBatch) -> torch.Tensor:
    """Mean over rays of the mean per-sample distance from {0, 1}."""
    total = torch.zeros((), dtype=DTYPE)
    for blk in batch.blocks:
        closeness = torch.minimum(blk.f**2, (1.0 - blk.f) ** 2) * blk.mask
        nj = blk.mask.sum(dim=1).to(DTYPE)
        total = total + torch.sum(closeness.sum(dim=1) / nj)
    return total / batch.total_rays


def _segment_weights(blk: RayBlock) -> torch.Tensor:
    """Per-sample trapezoid weights from consecutive surviving spacings.

    Endpoint samples take their single adjacent spacing, interior samples the
    half-sum of both; single-sample rays fall back to the full truncated
    length. Weights stay differentiable with respect to the positions.
    """
    mask = blk.mask
    n = mask.shape[1]
    if n == 1:
        return blk.trunc_len.unsqueeze(1) * mask
    deltas = torch.linalg.vector_norm(
        blk.positions[:, 1:, :] - blk.positions[:, :-1, :], dim=-1
    )
    pair = (mask[:, 1:] & mask[:, :-1]).to(DTYPE)
    deltas = deltas * pair

    k = torch.arange(n).unsqueeze(0)
    first = torch.argmax(mask.to(torch.int64), dim=1, keepdim=True)
    last = n - 1 - torch.argmax(mask.flip(1).to(torch.int64), dim=1, keepdim=True)
    # Clamp pair indices into each ray's surviving run; edge samples then
    # read their only adjacent spacing twice, which halves back to itself.
    pair_hi = torch.clamp(last - 1, min=0)
    left = torch.minimum(torch.maximum(k - 1, first), pair_hi)
    right = torch.minimum(torch.maximum(k, first), pair_hi)
    omega = 0.5 * (deltas.gather(1, left) + deltas.gather(1, right))

    single = mask.sum(dim=1) == 1
    if bool(single.any()):
        fallback = blk.trunc_len.unsqueeze(1).expand_as(omega)
        omega = torch.where(single.unsqueeze(1), fallback, omega)
    return omega * mask


def volume_loss(batch: RayBatch, tau: float, temperature: float) -> torch.Tensor:
    """Soft material measure: segment-weighted sigmoid switches above tau."""
    total = torch.zeros((), dtype=DTYPE)
    for blk in batch.blocks:
        omega = _segment_weights(blk)
        switch = torch.sigmoid((blk.f - tau) / temperature) * blk.mask
        total = total + torch.sum(omega * switch)
    return total / batch.total_rays


def estimate_gradients(
    p0: torch.Tensor,
    f0: torch.Tensor,
    neighbor_pos: torch.Tensor,
    neighbor_f: torch.Tensor,
    damping: float = 1e-8,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Least-squares field gradient at each p0 from its neighbors.

    Solves K g = b in the normal equations, K rows the neighbor offsets and
    b the occupancy differences. Rank-deficient systems (coplanar neighbor
    clouds) get Tikhonov damping; the returned bool mask flags them.

    p0: (M, 3), f0: (M,), neighbor_pos: (M, k, 3), neighbor_f: (M, k).
    """
    K = neighbor_pos - p0.unsqueeze(1)
    b = neighbor_f - f0.unsqueeze(1)
    A = K.transpose(1, 2) @ K
    rhs = K.transpose(1, 2) @ b.unsqueeze(2)
    eig = torch.linalg.eigvalsh(A.detach())
    deficient = eig[:, 0] <= RANK_DEFICIENT_RATIO * eig[:, 2].clamp(min=1e-300)
    if bool(deficient.any()):
        bump = damping * torch.eye(3, dtype=DTYPE)
        A = A + deficient.to(DTYPE).view(-1, 1, 1) * bump
    g = torch.linalg.solve(A, rhs).squeeze(2)
    return g, deficient


@dataclass
class SurfacePointSet:
    positions: torch.Tensor  # (S, 3)
    gradients: torch.Tensor  # (S, 3)
    selected: torch.Tensor   # (M,) bool mask into the candidate pool


def detect_surface_points(
    positions: torch.Tensor,
    gradients: torch.Tensor,
    theta: float,
    widths: torch.Tensor,
) -> SurfacePointSet:
    """Samples whose gradient magnitude exceeds theta times the image width.

    widths holds each sample's owning image width, so mixed-resolution
    batches threshold per-sample. Selection happens on detached values.
    """
    norms = torch.linalg.vector_norm(gradients.detach(), dim=-1)
    selected = norms > theta * widths
    return SurfacePointSet(
        positions=positions[selected], gradients=gradients[selected], selected=selected
    )


def smoothness_loss(
    batch: RayBatch,
    theta: float,
    k1: int,
    k2: int,
    damping: float = 1e-8,
    diagnostics: dict | None = None,
) -> torch.Tensor:
    """Mean normalized gradient variation between neighboring surface points.

    Pipeline: pool every surviving sample in the batch, estimate field
    gradients from k1 nearest neighbors, keep surface points by the theta
    threshold, then average ||grad difference|| / distance over each surface
    point's k2 nearest surface neighbors. Near-coincident pairs (distance
    below 1e-9) are skipped and counted.
    """
    pos_parts, f_parts, width_parts = [], [], []
    for blk in batch.blocks:
        pos_parts.append(blk.positions[blk.mask])
        f_parts.append(blk.f[blk.mask])
        width_parts.append(
            torch.full((int(blk.mask.sum()),), float(blk.width), dtype=DTYPE)
        )
    positions = torch.cat(pos_parts)
    f = torch.cat(f_parts)
    widths = torch.cat(width_parts)
    m = positions.shape[0]
    if m < 5:
        return torch.zeros((), dtype=DTYPE)

    pos_np = positions.detach().numpy()
    k1_eff = min(k1, m - 1)
    _, idx = cKDTree(pos_np).query(pos_np, k=k1_eff + 1)
    idx = torch.from_numpy(np.ascontiguousarray(idx[:, 1:]))
    grads, deficient = estimate_gradients(
        positions, f, positions[idx], f[idx], damping=damping
    )
    surface = detect_surface_points(positions, grads, theta, widths)
    if diagnostics is not None:
        diagnostics["deficient_solves"] = diagnostics.get("deficient_solves", 0) + int(
            deficient.sum()
        )
        diagnostics["surface_points"] = diagnostics.get("surface_points", 0) + int(
            surface.selected.sum()
        )
    s = surface.positions.shape[0]
    if s < 2:
        return torch.zeros((), dtype=DTYPE)

    k2_eff = min(k2, s - 1)
    surf_np = surface.positions.detach().numpy()
    _, nidx = cKDTree(surf_np).query(surf_np, k=k2_eff + 1)
    nidx = torch.from_numpy(np.ascontiguousarray(nidx[:, 1:]))
    gdiff = torch.linalg.vector_norm(
        surface.gradients.unsqueeze(1) - surface.gradients[nidx], dim=-1
    )
    dist = torch.linalg.vector_norm(
        surface.positions.unsqueeze(1) - surface.positions[nidx], dim=-1
    )
    valid = dist.detach() > DEGENERATE_PAIR_DIST
    if diagnostics is not None:
        diagnostics["skipped_pairs"] = diagnostics.get("skipped_pairs", 0) + int(
            (~valid).sum()
        )
    safe_dist = torch.where(valid, dist, torch.ones_like(dist))
    ratio = (gdiff / safe_dist) * valid
    counts = valid.sum(dim=1)
    has_pairs = counts > 0
    if not bool(has_pairs.any()):
        return torch.zeros((), dtype=DTYPE)
    per_point = ratio.sum(dim=1)[has_pairs] / counts[has_pairs].to(DTYPE)
    return per_point.mean()


def total_loss(
    batch: RayBatch, weights: LossWeights, epoch: int
) -> tuple[torch.Tensor, dict[str, float], dict[str, int]]:
    """Scheduled combination of all five terms.

    Returns the differentiable total, per-term float values for logging, and
    integer diagnostics counters.
    """
    if batch.total_rays == 0:
        raise ValueError("batch has no surviving rays")
    b1, b2, b3, b4 = effective_betas(weights, epoch)
    diagnostics: dict[str, int] = {}
    ren = rendering_loss(batch)
    coh = cohesion_loss(batch)
    vol = volume_loss(batch, weights.tau, weights.temperature)
    bin_ = binarization_loss(batch)
    if b2 != 0.0:
        smo = smoothness_loss(
            batch, weights.theta, weights.k1, weights.k2, diagnostics=diagnostics
        )
    else:
        smo = torch.zeros((), dtype=DTYPE)
    total = ren + b1 * coh + b2 * smo + b3 * vol + b4 * bin_
    parts = {
        "rendering": float(ren.detach()),
        "cohesion": float(coh.detach()),
        "smoothness": float(smo.detach()),
        "volume": float(vol.detach()),
        "binarization": float(bin_.detach()),
        "total": float(total.detach()),
        "beta1": b1,
        "beta2": b2,
        "beta3": b3,
        "beta4": b4,
    }
    return total, parts, diagnostics
