"""UV position maps: a registered image-like encoding of a face mesh.

Each mesh vertex i gets a fixed grid cell; the cell stores the vertex's 3D
position, so a (H, W, 3) grid carries the whole registered mesh. Rows come
from the vertex height (u = alpha1*Y + beta1) and columns from the azimuth
around the vertical axis (v = alpha2*arctan(X/Z) + beta2); the constants
are fitted on the mean template so the vertex cells span the full grid.
Cells between registered vertices are filled by barycentric interpolation
over the UV-space triangles; cells outside the mesh footprint are invalid
and hold zeros.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mesh import FaceMesh, REGION_RATIOS


class MappingError(ValueError):
    """UV mapping cannot be built: bad domain or too-coarse resolution."""


@dataclass
class UVMapping:
    """Per-vertex UV coordinates plus the rasterization tables.

    u, v: float grid coordinates per vertex (u indexes rows, v columns).
    cell_u, cell_v: the integer cells the vertices are registered to.
    alpha1/beta1/alpha2/beta2: the fitted mapping constants.
    facets: the topology used to fill non-vertex cells.
    reg_vertex: (H, W) vertex id registered at each cell, -1 if none.
    interp_facet / interp_bary: barycentric fill table for interior cells.
    valid: (H, W) True where a cell is registered or interpolated.
    """

    u: np.ndarray
    v: np.ndarray
    cell_u: np.ndarray
    cell_v: np.ndarray
    alpha1: float
    beta1: float
    alpha2: float
    beta2: float
    height: int
    width: int
    facets: np.ndarray
    reg_vertex: np.ndarray
    interp_facet: np.ndarray
    interp_bary: np.ndarray
    valid: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.u)

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.height, self.width)


def compute_uv_mapping(template: FaceMesh, resolution: tuple[int, int]) -> UVMapping:
    """Fit the UV mapping constants on a template mesh.

    Requires Z > 0 for every vertex (frontal surface) so arctan(X/Z) is
    well defined. The constants are chosen so that vertex u values span
    [0, H-1] and v values span [0, W-1] exactly. Raises MappingError if the
    domain is violated or two vertices land in the same cell at this
    resolution (the mapping must stay injective so registered cells can be
    decoded exactly).
    """
    height, width = int(resolution[0]), int(resolution[1])
    if height < 1 or width < 1:
        raise MappingError(f"bad resolution {resolution}")
    xyz = template.vertices
    if np.any(xyz[:, 2] <= 0):
        bad = int(np.nonzero(xyz[:, 2] <= 0)[0][0])
        raise MappingError(f"vertex {bad} has Z <= 0; mapping domain requires a frontal surface")

    ys = xyz[:, 1]
    angles = np.arctan(xyz[:, 0] / xyz[:, 2])
    y_span = ys.max() - ys.min()
    a_span = angles.max() - angles.min()
    if height > 1 and y_span <= 0:
        raise MappingError("vertices are flat in Y; cannot spread them over multiple rows")
    if width > 1 and a_span <= 0:
        raise MappingError("vertices are flat in azimuth; cannot spread them over multiple columns")
    alpha1 = (height - 1) / y_span if height > 1 else 0.0
    beta1 = -alpha1 * ys.min()
    alpha2 = (width - 1) / a_span if width > 1 else 0.0
    beta2 = -alpha2 * angles.min()

    u = alpha1 * ys + beta1
    v = alpha2 * angles + beta2
    cell_u = np.rint(u).astype(np.int64)
    cell_v = np.rint(v).astype(np.int64)
    cell_u = np.clip(cell_u, 0, height - 1)
    cell_v = np.clip(cell_v, 0, width - 1)

    flat = cell_u * width + cell_v
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    dup = np.nonzero(sorted_flat[1:] == sorted_flat[:-1])[0]
    if dup.size:
        i, j = int(order[dup[0]]), int(order[dup[0] + 1])
        raise MappingError(
            f"resolution {height}x{width} too coarse: vertices {i} and {j} "
            f"collide in cell ({int(cell_u[i])}, {int(cell_v[i])})"
        )

    reg_vertex = np.full((height, width), -1, dtype=np.int64)
    reg_vertex[cell_u, cell_v] = np.arange(len(u))

    interp_facet, interp_bary = _rasterize(u, v, template.facets, height, width, reg_vertex)
    valid = (reg_vertex >= 0) | (interp_facet >= 0)

    return UVMapping(
        u=u, v=v, cell_u=cell_u, cell_v=cell_v,
        alpha1=float(alpha1), beta1=float(beta1),
        alpha2=float(alpha2), beta2=float(beta2),
        height=height, width=width,
        facets=template.facets,
        reg_vertex=reg_vertex,
        interp_facet=interp_facet,
        interp_bary=interp_bary,
        valid=valid,
    )


def _rasterize(u, v, facets, height, width, reg_vertex):
    """Assign each non-registered cell inside some UV triangle to that
    triangle with barycentric weights (later facets win ties)."""
    interp_facet = np.full((height, width), -1, dtype=np.int64)
    interp_bary = np.zeros((height, width, 3), dtype=np.float64)
    tri_u = u[facets]
    tri_v = v[facets]
    for t in range(len(facets)):
        u0, u1, u2 = tri_u[t]
        v0, v1, v2 = tri_v[t]
        area2 = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if abs(area2) < 1e-30:
            continue
        lo_u = max(int(np.ceil(min(u0, u1, u2) - 1e-9)), 0)
        hi_u = min(int(np.floor(max(u0, u1, u2) + 1e-9)), height - 1)
        lo_v = max(int(np.ceil(min(v0, v1, v2) - 1e-9)), 0)
        hi_v = min(int(np.floor(max(v0, v1, v2) + 1e-9)), width - 1)
        if lo_u > hi_u or lo_v > hi_v:
            continue
        gu, gv = np.meshgrid(
            np.arange(lo_u, hi_u + 1, dtype=np.float64),
            np.arange(lo_v, hi_v + 1, dtype=np.float64),
            indexing="ij",
        )
        w0 = ((u1 - gu) * (v2 - gv) - (u2 - gu) * (v1 - gv)) / area2
        w1 = ((u2 - gu) * (v0 - gv) - (u0 - gu) * (v2 - gv)) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        iu, iv = np.nonzero(inside)
        iu = iu + lo_u
        iv = iv + lo_v
        interp_facet[iu, iv] = t
        interp_bary[iu, iv, 0] = w0[inside]
        interp_bary[iu, iv, 1] = w1[inside]
        interp_bary[iu, iv, 2] = w2[inside]
    # registered cells are written exactly, never interpolated
    reg = reg_vertex >= 0
    interp_facet[reg] = -1
    interp_bary[reg] = 0.0
    return interp_facet, interp_bary


@dataclass
class UVPositionMap:
    """(H, W, 3) grid of 3D positions plus a validity bitmap.

    Invalid cells hold the all-zeros sentinel and are excluded from every
    loss and metric.
    """

    grid: np.ndarray
    valid: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.grid.shape[0], self.grid.shape[1])


def encode_uv_map(positions: np.ndarray, mapping: UVMapping) -> UVPositionMap:
    """Store vertex positions in their registered cells and fill the face
    interior by barycentric interpolation in UV space.

    Registered cells hold their vertex position exactly, so decoding is
    lossless by construction.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (mapping.n_vertices, 3):
        raise ValueError(
            f"positions shape {positions.shape} does not match mapping "
            f"({mapping.n_vertices} vertices)"
        )
    grid = np.zeros((mapping.height, mapping.width, 3), dtype=np.float64)
    iu, iv = np.nonzero(mapping.interp_facet >= 0)
    if iu.size:
        tri = mapping.interp_facet[iu, iv]
        bary = mapping.interp_bary[iu, iv]
        corners = positions[mapping.facets[tri]]
        grid[iu, iv] = np.einsum("mk,mkd->md", bary, corners)
    grid[mapping.cell_u, mapping.cell_v] = positions
    return UVPositionMap(grid=grid, valid=mapping.valid.copy())


def decode_uv_map(uv_map: UVPositionMap, mapping: UVMapping) -> np.ndarray:
    """Read each vertex position back out of its registered cell (exact)."""
    if uv_map.resolution != mapping.resolution:
        raise ValueError(
            f"map resolution {uv_map.resolution} does not match mapping {mapping.resolution}"
        )
    return uv_map.grid[mapping.cell_u, mapping.cell_v].copy()


def grid_to_vertex_gradient(mapping: UVMapping, grid_grad: np.ndarray) -> np.ndarray:
    """Pull a (H, W, 3) cell gradient back to per-vertex gradients.

    Adjoint of encode_uv_map: registered cells map one-to-one to their
    vertex; interpolated cells distribute by their barycentric weights.
    """
    out = np.zeros((mapping.n_vertices, 3), dtype=np.float64)
    out[:] = grid_grad[mapping.cell_u, mapping.cell_v]
    iu, iv = np.nonzero(mapping.interp_facet >= 0)
    if iu.size:
        tri = mapping.interp_facet[iu, iv]
        bary = mapping.interp_bary[iu, iv]
        g = grid_grad[iu, iv]
        corners = mapping.facets[tri]
        for k in range(3):
            np.add.at(out, corners[:, k], bary[:, k, None] * g)
    return out


@dataclass
class WeightMask:
    """Per-cell non-negative weights over the UV grid.

    The support is exactly the four region ratios scaled by one constant;
    the mask is normalized so its mean over valid cells is 1.
    """

    weights: np.ndarray
    valid: np.ndarray
    ratios: tuple = REGION_RATIOS


def build_weight_mask(
    mapping: UVMapping,
    regions: np.ndarray,
    landmark_indices: np.ndarray | None = None,
    ratios: tuple = REGION_RATIOS,
) -> WeightMask:
    """Spread per-vertex region ratios over the UV grid.

    Registered cells carry their vertex's ratio; interpolated cells carry
    the minimum ratio of the surrounding triangle's vertices (so the
    zero-weight neck never bleeds weight). Landmark vertices are forced to
    the landmark region. The result is normalized to unit mean over valid
    cells.
    """
    regions = np.asarray(regions, dtype=np.int64)
    if regions.shape != (mapping.n_vertices,):
        raise ValueError("one region label per vertex required")
    if regions.min() < 0 or regions.max() >= len(ratios):
        raise ValueError("unlabeled or out-of-range region value")
    regions = regions.copy()
    if landmark_indices is not None:
        regions[np.asarray(landmark_indices, dtype=np.int64)] = 0
    vertex_ratio = np.asarray(ratios, dtype=np.float64)[regions]

    weights = np.zeros((mapping.height, mapping.width), dtype=np.float64)
    iu, iv = np.nonzero(mapping.interp_facet >= 0)
    if iu.size:
        tri = mapping.interp_facet[iu, iv]
        weights[iu, iv] = vertex_ratio[mapping.facets[tri]].min(axis=1)
    weights[mapping.cell_u, mapping.cell_v] = vertex_ratio

    valid = mapping.valid
    mean = weights[valid].mean()
    if mean <= 0:
        raise ValueError("weight mask is identically zero over valid cells")
    return WeightMask(weights=weights / mean, valid=valid.copy(), ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# Binary position-map format: magic 'UVPM', u32le H, W, float32le grid
# (row-major, row = u), then H*W validity bytes (0/1).
# ---------------------------------------------------------------------------

_MAGIC = b"UVPM"


def write_uvpm(path, uv_map: UVPositionMap) -> None:
    height, width = uv_map.resolution
    payload = (
        _MAGIC
        + struct.pack("<II", height, width)
        + uv_map.grid.astype("<f4").tobytes(order="C")
        + uv_map.valid.astype(np.uint8).tobytes(order="C")
    )
    with open(path, "wb") as fh:
        fh.write(payload)


def read_uvpm(path) -> UVPositionMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a UVPM file")
    height, width = struct.unpack("<II", data[4:12])
    grid_bytes = height * width * 3 * 4
    expected = 12 + grid_bytes + height * width
    if len(data) != expected:
        raise ValueError(f"{path}: truncated UVPM file ({len(data)} != {expected} bytes)")
    grid = np.frombuffer(data[12:12 + grid_bytes], dtype="<f4").reshape(height, width, 3)
    valid = np.frombuffer(data[12 + grid_bytes:], dtype=np.uint8).reshape(height, width)
    return UVPositionMap(grid=grid.astype(np.float64), valid=valid.astype(bool))
