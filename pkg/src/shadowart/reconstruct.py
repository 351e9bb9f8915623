"""Mesh extraction and material metrics from a trained occupancy field.

The field is sampled on a regular grid over the scene box; nodes outside the
frustum intersection are forced to zero so marching cubes caps geometry at
the prism boundary. Meshes whose isosurface runs out of the grid's open box
faces stay open there, and their enclosed volume is flagged unreliable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from skimage import measure

from .geometry import (
    DTYPE,
    Frustum,
    ProjectionConstraint,
    point_in_frustum_intersection,
    ray_endpoints,
)
from .field import OccupancyField

SCENE_MIN = -0.5
SCENE_MAX = 0.5
DEGENERATE_TRIANGLE_AREA = 1e-12


@dataclass
class ScalarGrid:
    resolution: int
    values: np.ndarray  # (r, r, r) float64, values[i, j, k] at (x_i, y_j, z_k)
    mask: np.ndarray    # (r, r, r) bool, False where forced to zero

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(SCENE_MIN, SCENE_MAX, self.resolution)

    @property
    def cell_size(self) -> float:
        return (SCENE_MAX - SCENE_MIN) / (self.resolution - 1)


@dataclass
class ExtractedMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int64

    @property
    def empty(self) -> bool:
        return self.faces.shape[0] == 0


def masked_occupancy(
    field: OccupancyField,
    points,
    frusta: Sequence[Frustum] = (),
    chunk: int = 65536,
) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy with the frustum-intersection mask applied.

    Points outside the intersection evaluate to exactly 0, matching the grid
    semantics used for extraction. Returns (values, in_mask) flattened over
    leading dimensions.
    """
    pts = torch.as_tensor(points, dtype=DTYPE).reshape(-1, 3)
    values = np.zeros(pts.shape[0])
    mask = np.ones(pts.shape[0], dtype=bool)
    with torch.no_grad():
        if frusta:
            mask = point_in_frustum_intersection(pts, frusta).numpy()
        sel = np.nonzero(mask)[0]
        for start in range(0, sel.shape[0], chunk):
            part = sel[start : start + chunk]
            values[part] = field(pts[part]).numpy()
    return values, mask


def evaluate_grid(
    field: OccupancyField,
    resolution: int = 200,
    frusta: Sequence[Frustum] = (),
    chunk: int = 65536,
) -> ScalarGrid:
    """Occupancy on the scene-box lattice, zeroed outside the frusta."""
    ax = np.linspace(SCENE_MIN, SCENE_MAX, resolution)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values, mask = masked_occupancy(field, points, frusta, chunk)
    shape = (resolution,) * 3
    return ScalarGrid(
        resolution=resolution, values=values.reshape(shape), mask=mask.reshape(shape)
    )


def marching_cubes(grid: ScalarGrid, tau: float = 0.5) -> ExtractedMesh:
    """Isosurface of the grid at tau, oriented to positive signed volume.

    A grid that never crosses tau yields an empty mesh. Zero-area triangles
    are dropped.
    """
    spacing = (grid.cell_size,) * 3
    try:
        verts, faces, _, _ = measure.marching_cubes(grid.values, level=tau, spacing=spacing)
    except ValueError:
        return ExtractedMesh(
            vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64)
        )
    verts = verts.astype(np.float64) + SCENE_MIN
    faces = faces.astype(np.int64)
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    faces = faces[areas > DEGENERATE_TRIANGLE_AREA]
    mesh = ExtractedMesh(vertices=verts, faces=faces)
    if signed_volume(mesh) < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def mesh_area(mesh: ExtractedMesh) -> float:
    if mesh.empty:
        return 0.0
    v0 = mesh.vertices[mesh.faces[:, 0]]
    v1 = mesh.vertices[mesh.faces[:, 1]]
    v2 = mesh.vertices[mesh.faces[:, 2]]
    return float(0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1).sum())


def signed_volume(mesh: ExtractedMesh) -> float:
    """Sum of signed tetrahedra to the origin; exact for closed meshes."""
    if mesh.empty:
        return 0.0
    v0 = mesh.vertices[mesh.faces[:, 0]]
    v1 = mesh.vertices[mesh.faces[:, 1]]
    v2 = mesh.vertices[mesh.faces[:, 2]]
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def mesh_volume(mesh: ExtractedMesh) -> float:
    return abs(signed_volume(mesh))


def boundary_edge_count(mesh: ExtractedMesh) -> int:
    """Edges not shared by exactly two faces (0 for watertight meshes)."""
    if mesh.empty:
        return 0
    edges = np.concatenate(
        [mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]
    )
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int((counts != 2).sum())


def is_watertight(mesh: ExtractedMesh) -> bool:
    return not mesh.empty and boundary_edge_count(mesh) == 0


def bbox_diagonal(mesh: ExtractedMesh) -> float:
    if mesh.vertices.shape[0] == 0:
        return 0.0
    span = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    return float(np.linalg.norm(span))


def normalize_mesh(mesh: ExtractedMesh) -> ExtractedMesh:
    """Rescale so the bounding-box diagonal is exactly 1."""
    diag = bbox_diagonal(mesh)
    if diag == 0.0:
        return ExtractedMesh(vertices=mesh.vertices.copy(), faces=mesh.faces.copy())
    return ExtractedMesh(vertices=mesh.vertices / diag, faces=mesh.faces.copy())


def export_obj(path, mesh: ExtractedMesh) -> None:
    """ASCII OBJ (v/f lines, 1-based indices); vertices round-trip exactly."""
    lines = ["# shadowart mesh", f"# {mesh.vertices.shape[0]} vertices {mesh.faces.shape[0]} faces"]
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in mesh.faces:
        lines.append(f"f {int(f[0]) + 1} {int(f[1]) + 1} {int(f[2]) + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_obj(path) -> ExtractedMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        parts = line.split()
        if not parts or parts[0] == "#":
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return ExtractedMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def mesh_silhouette(
    mesh: ExtractedMesh,
    constraint: ProjectionConstraint,
    width: int,
    height: int,
    ray_chunk: int = 512,
    tri_chunk: int = 4096,
) -> np.ndarray:
    """Boolean shadow mask cast by the triangle mesh through a constraint.

    One ray per pixel center, Moller-Trumbore any-hit over the full
    screen-to-scene segment.
    """
    out = np.zeros(width * height, dtype=bool)
    if mesh.empty:
        return out.reshape(height, width)
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    with torch.no_grad():
        r_s, r_e = ray_endpoints(
            constraint.light, constraint.screen, constraint.distance,
            width, height,
            torch.from_numpy(px.ravel()), torch.from_numpy(py.ravel()),
        )
    origins = r_s.numpy()
    dirs = (r_e - r_s).numpy()

    tri = mesh.vertices[mesh.faces]
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    dot = lambda a, b: np.einsum("...k,...k->...", a, b)
    eps = 1e-12
    for rs in range(0, origins.shape[0], ray_chunk):
        ro = origins[rs : rs + ray_chunk][:, None, :]
        rd = dirs[rs : rs + ray_chunk][:, None, :]
        hit = np.zeros(ro.shape[0], dtype=bool)
        for ts in range(0, v0.shape[0], tri_chunk):
            b0 = v0[None, ts : ts + tri_chunk]
            be1 = e1[None, ts : ts + tri_chunk]
            be2 = e2[None, ts : ts + tri_chunk]
            pvec = np.cross(rd, be2)
            det = dot(be1, pvec)
            ok = np.abs(det) > eps
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = ro - b0
            u = dot(tvec, pvec) * inv
            qvec = np.cross(tvec, be1)
            v = dot(rd, qvec) * inv
            t = dot(be2, qvec) * inv
            ok &= (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1.0 + 1e-9)
            ok &= (t >= -1e-9) & (t <= 1.0 + 1e-9)
            hit |= ok.any(axis=1)
        out[rs : rs + ray_chunk] = hit
    return out.reshape(height, width)
