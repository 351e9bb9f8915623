"""Differentiable projection geometry.

Scene convention: the solid lives in the axis-aligned box [-0.5, 0.5]^3
centered on the world origin O. Each projection constraint couples a unit
light direction ``l`` (pointing from the scene toward its screen) with a unit
screen normal ``s`` (pointing from the screen back toward the scene) and a
screen distance ``d``: the screen is the plane ``<q, s> = -d``.

Pixel coordinates (px, py) live on the screen with px along the in-plane
axis ``c`` and py along ``r = c x s``. Pixel (i, j) covers
[i, i+1) x [j, j+1), so pixel centers sit at half-integer coordinates. The
image height always spans one scene unit; the width spans w/h units.

Everything here runs on float64 torch tensors and stays differentiable with
respect to the light and screen vectors, so ray endpoints computed from a
(l, s) pair carry gradients back into those vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

DTYPE = torch.float64

# Treated as "on the pole" when the screen normal's xy part is this small.
POLE_EPS = 1e-12
UNIT_TOL = 1e-6


class FacingViolation(ValueError):
    """Raised when a light does not face its screen (<l, s> >= 0)."""


def as_vec(v) -> torch.Tensor:
    """Coerce array-like input to a float64 torch tensor."""
    if isinstance(v, torch.Tensor):
        return v.to(DTYPE)
    return torch.as_tensor(v, dtype=DTYPE)


def normalize(v) -> torch.Tensor:
    v = as_vec(v)
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True)


def _check_unit(v: torch.Tensor, name: str) -> None:
    n = float(torch.linalg.vector_norm(v.detach()))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be unit length, got norm {n!r}")


def screen_basis(s) -> tuple[torch.Tensor, torch.Tensor]:
    """In-plane orthonormal axes (c, r) for a unit screen normal s.

    c = normalize(-s_y, s_x, 0) away from the poles; at s = (0, 0, +-1) the
    cross product degenerates and c falls back to (0, 1, 0). r = c x s.
    """
    s = as_vec(s)
    _check_unit(s, "screen normal")
    if float(s[0].detach()) ** 2 + float(s[1].detach()) ** 2 < POLE_EPS**2:
        c = torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE)
    else:
        c = normalize(torch.stack([-s[1], s[0], torch.zeros((), dtype=DTYPE)]))
    r = torch.linalg.cross(c, s)
    return c, r


def oj_distance(l, s, d: float) -> torch.Tensor:
    """Distance from the origin to the screen along the light direction.

    ||OJ|| = -d / <l, s>. The light must face the screen: <l, s> < 0.
    """
    l, s = as_vec(l), as_vec(s)
    _check_unit(l, "light")
    _check_unit(s, "screen normal")
    ls = torch.dot(l, s)
    if float(ls.detach()) >= 0.0:
        raise FacingViolation(f"light does not face screen: <l,s> = {float(ls):.6f} >= 0")
    return -d / ls


def ray_endpoints(l, s, d: float, width: int, height: int, px, py):
    """Screen-side and mirrored scene-side endpoints of per-pixel rays.

    px, py may be scalars or tensors of shape (...,); the endpoints come back
    with shape (..., 3). r_e lies on the screen plane; r_s = r_e - 2||OJ|| l
    mirrors it across the origin region so rays traverse the whole scene box.
    """
    l, s = as_vec(l), as_vec(s)
    px = torch.as_tensor(px, dtype=DTYPE)
    py = torch.as_tensor(py, dtype=DTYPE)
    c, r = screen_basis(s)
    oj = oj_distance(l, s, d)
    # Eq. coefficients reduce to (px - w/2)/h and (py - h/2)/h: the in-plane
    # offsets both scale by 1/h so the image height spans one scene unit.
    u = (px - width / 2.0) / height
    v = (py - height / 2.0) / height
    r_e = oj * l + u.unsqueeze(-1) * c + v.unsqueeze(-1) * r
    r_s = r_e - 2.0 * oj * l
    return r_s, r_e


def project_to_pixel(p, l, s, d: float, width: int, height: int):
    """Pixel coordinates hit by sliding point p along l onto the screen.

    Inverse of ray_endpoints for points on the pixel's ray: the point is
    carried along l onto the plane <q, s> = -d and expressed in the (c, r)
    frame anchored at the screen's ray origin ||OJ|| l.
    """
    p = as_vec(p)
    l, s = as_vec(l), as_vec(s)
    c, r = screen_basis(s)
    oj = oj_distance(l, s, d)
    ls = torch.dot(l, s)
    t = (-d - p @ s) / ls
    q = p + t.unsqueeze(-1) * l
    rel = q - oj * l
    px = (rel @ c) * height + width / 2.0
    py = (rel @ r) * height + height / 2.0
    return px, py


@dataclass
class ProjectionConstraint:
    """One light/screen pair with its learnable unit vectors.

    light and screen are float64 tensors of shape (3,); the trainer flips
    requires_grad on and renormalizes them after each optimizer step.
    """

    light: torch.Tensor
    screen: torch.Tensor
    distance: float = 0.5
    index: int = 0

    @classmethod
    def create(cls, light, screen, distance: float = 0.5, index: int = 0) -> "ProjectionConstraint":
        lt = normalize(as_vec(light).detach().clone())
        st = normalize(as_vec(screen).detach().clone())
        return cls(light=lt, screen=st, distance=float(distance), index=index)

    def facing(self) -> float:
        return float(torch.dot(self.light.detach(), self.screen.detach()))

    def validate(self) -> None:
        _check_unit(self.light.detach(), "light")
        _check_unit(self.screen.detach(), "screen normal")
        if self.facing() >= 0.0:
            raise FacingViolation(
                f"constraint {self.index}: light does not face screen "
                f"(<l,s> = {self.facing():.6f} >= 0)"
            )


@dataclass
class Frustum:
    """Infinite prism of rays behind one constraint's image.

    Prisms extend indefinitely along the light direction; membership only
    checks the projected pixel footprint, so it is invariant under sliding a
    point along the frustum's own light.
    """

    light: torch.Tensor
    screen: torch.Tensor
    distance: float
    width: int
    height: int
    constraint_index: int = 0


def frustum_for(constraint: ProjectionConstraint, width: int, height: int) -> Frustum:
    return Frustum(
        light=constraint.light.detach().clone(),
        screen=constraint.screen.detach().clone(),
        distance=constraint.distance,
        width=int(width),
        height=int(height),
        constraint_index=constraint.index,
    )


def point_in_frustum(p, frustum: Frustum, margin_px: float = 0.0) -> torch.Tensor:
    """Boolean membership of p (shape (..., 3)) in one frustum.

    The footprint test is closed: px in [0, w], py in [0, h], optionally
    inflated by margin_px pixels on every side.
    """
    with torch.no_grad():
        px, py = project_to_pixel(
            p, frustum.light, frustum.screen, frustum.distance, frustum.width, frustum.height
        )
        m = margin_px
        return (px >= -m) & (px <= frustum.width + m) & (py >= -m) & (py <= frustum.height + m)


def point_in_frustum_intersection(p, frusta: Sequence[Frustum], margin_px: float = 0.0) -> torch.Tensor:
    if len(frusta) == 0:
        raise ValueError("need at least one frustum")
    member = point_in_frustum(p, frusta[0], margin_px)
    for f in frusta[1:]:
        member = member & point_in_frustum(p, f, margin_px)
    return member
