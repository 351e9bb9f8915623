"""Periodic rigid re-registration of targets against rendered shadows.

Small errors in the optimized light/screen vectors show up as rigid drift of
the cast shadow relative to the target. Every few epochs the current field is
rendered through each constraint, the target's boundary is ICP-aligned to the
render's boundary, and the accumulated rigid transform re-warps the ORIGINAL
target (never the previously warped one, so resampling error does not pile
up). The warped target feeds subsequent epochs' labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .field import OccupancyField
from .geometry import Frustum, ProjectionConstraint, ray_endpoints
from .images import TargetImage, boundary_points
from .sampler import midpoint_t, truncation_intervals

COLLINEAR_TOL = 1e-9
MIN_BOUNDARY_POINTS = 3
MAX_SHADOW_LOSS = 0.10


@dataclass(frozen=True)
class RigidTransform2D:
    """p' = R(angle) p + (tx, ty) acting on pixel coordinates."""

    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    @classmethod
    def identity(cls) -> "RigidTransform2D":
        return cls()

    @classmethod
    def rotation_about(cls, angle: float, center) -> "RigidTransform2D":
        cx, cy = float(center[0]), float(center[1])
        ca, sa = math.cos(angle), math.sin(angle)
        return cls(angle=angle, tx=cx - (ca * cx - sa * cy), ty=cy - (sa * cx + ca * cy))

    def matrix(self) -> np.ndarray:
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        return np.array([[ca, -sa], [sa, ca]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix().T + np.array([self.tx, self.ty])

    def compose(self, inner: "RigidTransform2D") -> "RigidTransform2D":
        """self o inner: apply inner first, then self."""
        t = self.apply(np.array([[inner.tx, inner.ty]]))[0]
        return RigidTransform2D(angle=self.angle + inner.angle, tx=t[0], ty=t[1])

    def inverse(self) -> "RigidTransform2D":
        ca, sa = math.cos(self.angle), math.sin(self.angle)
        return RigidTransform2D(
            angle=-self.angle,
            tx=-(ca * self.tx + sa * self.ty),
            ty=-(-sa * self.tx + ca * self.ty),
        )


@dataclass
class RenderedShadow:
    constraint_index: int
    tau: float
    occupancy: np.ndarray  # (h, w) float64 per-pixel ray occupancy
    mask: np.ndarray       # (h, w) bool, occupancy > tau


def render_shadow(
    field: OccupancyField,
    constraint: ProjectionConstraint,
    width: int,
    height: int,
    tau: float = 0.5,
    frusta: Sequence[Frustum] = (),
    chunk: int = 4096,
) -> RenderedShadow:
    """Deterministic midpoint-sample render of the field's cast shadow.

    Rays are truncated against the given frusta exactly like training rays;
    a pixel is shadowed iff its ray occupancy exceeds tau.
    """
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    px, py = px.ravel(), py.ravel()
    t_mid = midpoint_t(width)
    occ = np.zeros(px.shape[0])
    with torch.no_grad():
        r_s_all, r_e_all = ray_endpoints(
            constraint.light, constraint.screen, constraint.distance,
            width, height, torch.from_numpy(px), torch.from_numpy(py),
        )
        if frusta:
            t_lo, t_hi = truncation_intervals(r_s_all.numpy(), r_e_all.numpy(), frusta)
        else:
            t_lo = np.zeros(px.shape[0])
            t_hi = np.ones(px.shape[0])
        keep = (t_mid[None, :] >= t_lo[:, None]) & (t_mid[None, :] <= t_hi[:, None])
        t = torch.from_numpy(np.broadcast_to(t_mid, keep.shape).copy())
        for start in range(0, px.shape[0], chunk):
            sl = slice(start, start + chunk)
            r_s, r_e = r_s_all[sl], r_e_all[sl]
            pts = r_s.unsqueeze(1) + t[sl].unsqueeze(2) * (r_e - r_s).unsqueeze(1)
            f = field(pts) * torch.from_numpy(keep[sl])
            occ[sl] = (1.0 - torch.prod(1.0 - f, dim=1)).numpy()
    occ = occ.reshape(height, width)
    return RenderedShadow(
        constraint_index=constraint.index, tau=tau, occupancy=occ, mask=occ > tau
    )


@dataclass
class IcpResult:
    transform: RigidTransform2D
    residuals: list[float] = dc_field(default_factory=list)
    degenerate: bool = False
    iterations: int = 0


def _fit_rigid(src: np.ndarray, dst: np.ndarray) -> RigidTransform2D:
    """Closed-form least-squares rigid motion taking src onto dst."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    a = src - sc
    b = dst - dc
    dot = float((a * b).sum())
    cross = float((a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum())
    angle = math.atan2(cross, dot)
    ca, sa = math.cos(angle), math.sin(angle)
    tx = dc[0] - (ca * sc[0] - sa * sc[1])
    ty = dc[1] - (sa * sc[0] + ca * sc[1])
    return RigidTransform2D(angle=angle, tx=tx, ty=ty)


def _collinear(points: np.ndarray) -> bool:
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    return bool(sv.size < 2 or sv[1] < COLLINEAR_TOL)


def icp_register(
    src: np.ndarray,
    dst: np.ndarray,
    max_iter: int = 20,
    tol: float = 1e-3,
    trim: float = 0.1,
) -> IcpResult:
    """2D point-cloud ICP aligning src toward dst.

    Nearest-neighbor correspondences with the worst trim fraction dropped,
    closed-form rigid fit per iteration. The recorded trimmed-mean residuals
    are non-increasing: an iteration that would worsen the residual is rolled
    back and iteration stops. Degenerate (collinear) clouds return identity
    with the degenerate flag set.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < MIN_BOUNDARY_POINTS or dst.shape[0] < MIN_BOUNDARY_POINTS:
        return IcpResult(RigidTransform2D.identity(), degenerate=True)
    if _collinear(src) or _collinear(dst):
        return IcpResult(RigidTransform2D.identity(), degenerate=True)

    tree = cKDTree(dst)
    keep_count = max(MIN_BOUNDARY_POINTS, int(math.ceil((1.0 - trim) * src.shape[0])))
    transform = RigidTransform2D.identity()
    current = src.copy()
    result = IcpResult(transform)
    for it in range(max_iter):
        dists, idx = tree.query(current)
        keep = np.argsort(dists, kind="stable")[:keep_count]
        resid = float(dists[keep].mean())
        if result.residuals and resid > result.residuals[-1]:
            break  # revert: keep the previous (better) transform
        result.residuals.append(resid)
        result.transform = transform
        result.iterations = it + 1
        if len(result.residuals) >= 2 and result.residuals[-2] - resid < tol:
            break
        step = _fit_rigid(current[keep], dst[idx[keep]])
        transform = step.compose(transform)
        current = step.apply(current)
    return result


def warp_target(original: TargetImage, transform: RigidTransform2D) -> tuple[np.ndarray, float]:
    """Nearest-neighbor warp of the original mask under the transform.

    Each output pixel center is pulled back through the inverse transform;
    sources outside the frame read as white. Returns the warped mask and the
    fraction of shadow pixels retained.
    """
    h, w = original.mask.shape
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    src = transform.inverse().apply(pts)
    ix = np.floor(src[:, 0]).astype(np.int64)
    iy = np.floor(src[:, 1]).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    warped = np.zeros(h * w, dtype=bool)
    warped[inside] = original.mask[iy[inside], ix[inside]]
    warped = warped.reshape(h, w)
    kept = warped.sum() / max(int(original.mask.sum()), 1)
    return warped, float(kept)


@dataclass
class RegistrationOutcome:
    constraint_index: int
    accepted: bool
    reason: str
    transform: RigidTransform2D          # this round's incremental transform
    cumulative: RigidTransform2D         # accumulated original->current map
    residual: float = float("nan")
    render_iou: float = float("nan")


def registration_round(
    field: OccupancyField,
    constraints: Sequence[ProjectionConstraint],
    originals: Sequence[TargetImage],
    targets: list[TargetImage],
    cumulative: list[RigidTransform2D],
    tau: float = 0.5,
    frusta: Sequence[Frustum] = (),
) -> list[RegistrationOutcome]:
    """One re-registration pass over every constraint; mutates targets/cumulative.

    Per constraint: render, extract boundaries, ICP target->render, compose
    into the cumulative transform, and re-warp the original target. Rounds
    that would lose more than 10% of shadow pixels, or that face degenerate
    boundaries, leave the target untouched.
    """
    outcomes: list[RegistrationOutcome] = []
    for i, (con, orig, cur) in enumerate(zip(constraints, originals, targets)):
        shadow = render_shadow(
            field, con, orig.width, orig.height, tau=tau, frusta=frusta
        )
        dst = boundary_points(shadow.mask)
        src = boundary_points(cur.mask)
        if dst.shape[0] < MIN_BOUNDARY_POINTS or src.shape[0] < MIN_BOUNDARY_POINTS:
            outcomes.append(
                RegistrationOutcome(
                    i, False, "too few boundary points",
                    RigidTransform2D.identity(), cumulative[i],
                )
            )
            continue
        icp = icp_register(src, dst)
        if icp.degenerate:
            outcomes.append(
                RegistrationOutcome(
                    i, False, "degenerate boundary", icp.transform, cumulative[i],
                    residual=icp.residuals[-1] if icp.residuals else float("nan"),
                )
            )
            continue
        candidate = icp.transform.compose(cumulative[i])
        warped, kept = warp_target(orig, candidate)
        if kept < 1.0 - MAX_SHADOW_LOSS or not warped.any():
            outcomes.append(
                RegistrationOutcome(
                    i, False, f"shadow loss {1.0 - kept:.3f} exceeds limit",
                    icp.transform, cumulative[i], residual=icp.residuals[-1],
                )
            )
            continue
        targets[i] = TargetImage(mask=warped, index=cur.index)
        cumulative[i] = candidate
        outcomes.append(
            RegistrationOutcome(
                i, True, "ok", icp.transform, candidate, residual=icp.residuals[-1]
            )
        )
    return outcomes
