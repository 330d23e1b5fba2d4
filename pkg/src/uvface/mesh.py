"""Registered face meshes and a procedural mean-face template.

The mean face stands in for a laser-scanned template: a deterministic,
seed-free half-ellipsoid head sheet sampled on a rows x cols grid (frontal
surface only, open at the back), with nose/eye/mouth relief, 68 designated
landmark vertices and per-vertex region labels. All downstream algorithms
are topology-agnostic; they only require a registered mesh.

Coordinate conventions: model space is right-handed with y up; the frontal
surface faces +z. Facets are wound counter-clockwise when viewed from
outside the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Region labels in decreasing weight order.
REGION_LANDMARK = 0
REGION_ORGANS = 1
REGION_FACE = 2
REGION_NECK = 3
REGION_RATIOS = (16.0, 12.0, 3.0, 0.0)

N_LANDMARKS = 68


class MeshError(ValueError):
    """Invalid mesh topology or an unbuildable template."""


class DegenerateFacetError(MeshError):
    """A facet with numerically zero area."""


@dataclass
class FaceMesh:
    """A registered triangle mesh with optional landmarks and region labels.

    vertices: (n, 3) float64 positions.
    facets: (m, 3) vertex indices, CCW viewed from outside.
    landmark_indices: (k,) vertex indices of designated landmarks, or None.
    edge_set: (e, 2) unordered vertex pairs (min index first); derived from
        the facets unless replaced. ``edge_source`` records how it was built.
    regions: (n,) int labels (REGION_* constants), or None.
    """

    vertices: np.ndarray
    facets: np.ndarray
    landmark_indices: np.ndarray | None = None
    edge_set: np.ndarray | None = None
    edge_source: str = "facets"
    regions: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.facets = np.ascontiguousarray(self.facets, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.facets.ndim != 2 or self.facets.shape[1] != 3:
            raise MeshError(f"facets must be (m, 3), got {self.facets.shape}")
        n = len(self.vertices)
        if self.facets.size and (self.facets.min() < 0 or self.facets.max() >= n):
            raise MeshError("facet index out of range")
        same = (
            (self.facets[:, 0] == self.facets[:, 1])
            | (self.facets[:, 1] == self.facets[:, 2])
            | (self.facets[:, 0] == self.facets[:, 2])
        )
        if same.any():
            raise MeshError(f"degenerate facet (repeated index) at row {int(np.nonzero(same)[0][0])}")
        if self.landmark_indices is not None:
            self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
            if self.landmark_indices.size and (
                self.landmark_indices.min() < 0 or self.landmark_indices.max() >= n
            ):
                raise MeshError("landmark index out of range")
        if self.edge_set is None:
            self.edge_set = facet_edge_set(self.facets)
            self.edge_source = "facets"
        else:
            self.edge_set = np.asarray(self.edge_set, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def landmarks(self) -> np.ndarray:
        """Positions of the designated landmark vertices, (k, 3)."""
        if self.landmark_indices is None:
            raise MeshError("mesh has no landmark indices")
        return self.vertices[self.landmark_indices]

    def with_vertices(self, vertices: np.ndarray) -> "FaceMesh":
        """Same topology (shared facet/landmark arrays), new positions."""
        return FaceMesh(
            vertices=vertices,
            facets=self.facets,
            landmark_indices=self.landmark_indices,
            edge_set=self.edge_set,
            edge_source=self.edge_source,
            regions=self.regions,
        )

    def bbox_diagonal(self) -> float:
        extent = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(extent))


def facet_edge_set(facets: np.ndarray) -> np.ndarray:
    """Unordered, de-duplicated vertex pairs appearing in at least one facet."""
    facets = np.asarray(facets, dtype=np.int64)
    if facets.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([facets[:, [0, 1]], facets[:, [1, 2]], facets[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def facet_normals(mesh: FaceMesh | np.ndarray, facets: np.ndarray | None = None) -> np.ndarray:
    """Per-facet unit normals, (m, 3).

    For facet (i, j, k) the normal is cross(Vi - Vj, Vj - Vk) normalized;
    CCW facets viewed from outside yield outward normals. Raises
    DegenerateFacetError on a numerically zero-area facet.
    """
    if isinstance(mesh, FaceMesh):
        vertices, facets = mesh.vertices, mesh.facets
    else:
        vertices = np.asarray(mesh, dtype=np.float64)
        if facets is None:
            raise ValueError("facets required when passing a raw vertex array")
        facets = np.asarray(facets, dtype=np.int64)
    e_ij = vertices[facets[:, 0]] - vertices[facets[:, 1]]
    e_jk = vertices[facets[:, 1]] - vertices[facets[:, 2]]
    raw = np.cross(e_ij, e_jk)
    norms = np.linalg.norm(raw, axis=1)
    # zero area <=> sin(angle between edges) ~ 0 at edge scale
    scale = np.linalg.norm(e_ij, axis=1) * np.linalg.norm(e_jk, axis=1)
    bad = norms <= np.maximum(1e-12 * scale, 1e-300)
    if bad.any():
        raise DegenerateFacetError(f"zero-area facet at row {int(np.nonzero(bad)[0][0])}")
    return raw / norms[:, None]


def vertex_normals(mesh: FaceMesh) -> np.ndarray:
    """Per-vertex normals: area-weighted average of adjacent facet normals.

    The raw facet cross products (twice the facet area times the unit
    normal) are accumulated at each corner vertex and normalized. Vertices
    with no adjacent facets, or a cancelling neighborhood, get (0, 0, 0).
    """
    v, f = mesh.vertices, mesh.facets
    e_ij = v[f[:, 0]] - v[f[:, 1]]
    e_jk = v[f[:, 1]] - v[f[:, 2]]
    raw = np.cross(e_ij, e_jk)
    acc = np.zeros_like(v)
    for corner in range(3):
        np.add.at(acc, f[:, corner], raw)
    norms = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = norms > 0
    out[ok] = acc[ok] / norms[ok, None]
    return out


# ---------------------------------------------------------------------------
# Procedural mean-face template
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemplateSpec:
    """Grid density of the procedural template; everything else is fixed."""

    rows: int = 64
    cols: int = 64


_THETA_MAX = 1.2          # azimuth half-range in radians; < pi/2 keeps z > 0
_X_RADIUS = 0.78          # head half-width relative to depth
_Z_RADIUS = 1.0
_Y_TOP = 1.0
_Y_BOTTOM = -1.4
_NECK_FRACTION = 0.88     # rows below this vertical fraction are neck


def _radial_profile(y: np.ndarray) -> np.ndarray:
    arg = 1.0 - ((y - 0.1) / 1.1) ** 2
    return 0.25 + 0.75 * np.sqrt(np.maximum(arg, 0.0))


def _gauss(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def _feature_multiplier(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Radial relief in grid-fraction space: nose bump, eye/mouth hollows."""
    nose = 0.15 * _gauss(a, 0.52, 0.10) * _gauss(b, 0.50, 0.07)
    eyes = 0.06 * _gauss(a, 0.38, 0.045) * (_gauss(b, 0.33, 0.055) + _gauss(b, 0.67, 0.055))
    mouth = 0.05 * _gauss(a, 0.70, 0.035) * _gauss(b, 0.50, 0.09)
    return 1.0 + nose - eyes - mouth


def _landmark_fractions() -> np.ndarray:
    """The 68 landmark positions as (vertical, horizontal) grid fractions.

    Ordered like the usual 68-point annotation: jaw contour, brows, nose
    bridge and base, eyes, outer lips, inner lips. The exact indices are a
    declared convention of this template, not a claim of dataset identity.
    """
    pts = []
    # jaw contour: ear level down around the chin and back up
    for m in range(17):
        t = m / 16.0
        pts.append((0.40 + 0.42 * np.sin(np.pi * t), 0.5 - 0.48 * np.cos(np.pi * t)))
    # brows, left then right
    for m in range(5):
        s = m / 4.0
        pts.append((0.30 - 0.03 * np.sin(np.pi * s), 0.24 + 0.20 * s))
    for m in range(5):
        s = m / 4.0
        pts.append((0.30 - 0.03 * np.sin(np.pi * (1.0 - s)), 0.56 + 0.20 * s))
    # nose bridge and base
    for m in range(4):
        pts.append((0.38 + 0.06 * m, 0.5))
    for m in range(5):
        pts.append((0.615, 0.42 + 0.04 * m))
    # eyes: leftmost corner, upper pair, rightmost corner, lower pair
    for cx in (0.33, 0.67):
        pts.extend([(0.40, cx - 0.07), (0.375, cx - 0.030), (0.375, cx + 0.030),
                    (0.40, cx + 0.07), (0.43, cx + 0.030), (0.43, cx - 0.030)])
    # outer lips: corners plus 5-point upper and lower arcs
    pts.append((0.705, 0.375))
    for m in range(5):
        pts.append((0.655, 0.41 + 0.045 * m))
    pts.append((0.705, 0.625))
    for m in range(5):
        pts.append((0.76, 0.59 - 0.045 * m))
    # inner lips: corners plus 3-point upper and lower arcs
    pts.append((0.705, 0.42))
    for m in range(3):
        pts.append((0.687, 0.45 + 0.05 * m))
    pts.append((0.705, 0.58))
    for m in range(3):
        pts.append((0.723, 0.55 - 0.05 * m))
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (N_LANDMARKS, 2)
    return out


def build_mean_template(spec: TemplateSpec = TemplateSpec()) -> FaceMesh:
    """Build the deterministic mean-face template.

    Vertices lie on a rows x cols grid over the frontal head surface:
    row fraction controls height (y), column fraction controls azimuth,
    and features modulate the radial distance only, which keeps the UV
    mapping a clean product grid. Coordinates are quantized to float32
    values (stored as float64) so the binary position-map format is
    lossless for template-derived meshes.

    Raises MeshError if the grid is too coarse to host 68 distinct
    landmark vertices.
    """
    rows, cols = spec.rows, spec.cols
    if rows < 2 or cols < 2:
        raise MeshError("template grid needs at least 2 rows and 2 cols")
    if rows * cols < N_LANDMARKS:
        raise MeshError(
            f"grid {rows}x{cols} has {rows * cols} vertices; cannot host {N_LANDMARKS} landmarks"
        )

    a = np.linspace(0.0, 1.0, rows)          # 0 = crown, 1 = neck base
    b = np.linspace(0.0, 1.0, cols)          # 0 = left, 1 = right
    aa, bb = np.meshgrid(a, b, indexing="ij")
    y = _Y_TOP + aa * (_Y_BOTTOM - _Y_TOP)
    theta = (bb - 0.5) * 2.0 * _THETA_MAX
    radial = _radial_profile(y) * _feature_multiplier(aa, bb)
    x = radial * _X_RADIUS * np.sin(theta)
    z = radial * _Z_RADIUS * np.cos(theta)
    vertices = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    vertices = vertices.astype(np.float32).astype(np.float64)

    # two CCW triangles per grid quad
    i, j = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    v00 = (i * cols + j).ravel()
    v01 = v00 + 1
    v10 = v00 + cols
    v11 = v10 + 1
    facets = np.concatenate(
        [np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)]
    )

    fractions = _landmark_fractions()
    lm_rows = np.rint(fractions[:, 0] * (rows - 1)).astype(np.int64)
    lm_cols = np.rint(fractions[:, 1] * (cols - 1)).astype(np.int64)
    landmark_indices = lm_rows * cols + lm_cols
    if len(np.unique(landmark_indices)) != N_LANDMARKS:
        raise MeshError(
            f"grid {rows}x{cols} is too coarse: landmark vertices collide after snapping"
        )

    regions = np.full(rows * cols, REGION_FACE, dtype=np.int64)
    af, bf = aa.ravel(), bb.ravel()
    eyes = (af >= 0.33) & (af <= 0.46) & (((bf >= 0.24) & (bf <= 0.42)) | ((bf >= 0.58) & (bf <= 0.76)))
    nose = (af >= 0.36) & (af <= 0.64) & (bf >= 0.41) & (bf <= 0.59)
    mouth = (af >= 0.63) & (af <= 0.78) & (bf >= 0.37) & (bf <= 0.63)
    regions[eyes | nose | mouth] = REGION_ORGANS
    regions[af > _NECK_FRACTION] = REGION_NECK
    regions[landmark_indices] = REGION_LANDMARK

    return FaceMesh(
        vertices=vertices,
        facets=facets,
        landmark_indices=landmark_indices,
        regions=regions,
    )


# ---------------------------------------------------------------------------
# Wavefront OBJ I/O (plus the landmark sidecar convention)
# ---------------------------------------------------------------------------

def write_obj(path, mesh: FaceMesh) -> None:
    """Write vertices and facets as OBJ text (1-based facet indices)."""
    lines = [f"v {vx:.17g} {vy:.17g} {vz:.17g}" for vx, vy, vz in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.facets]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_obj(path) -> FaceMesh:
    """Read an OBJ file; only ``v`` and ``f`` records are honored."""
    vertices, facets = [], []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                vertices.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                facets.append([int(t.split("/")[0]) - 1 for t in tokens[1:4]])
    if not vertices:
        raise MeshError(f"no vertices in {path}")
    return FaceMesh(vertices=np.array(vertices), facets=np.array(facets, dtype=np.int64).reshape(-1, 3))


def landmark_sidecar_path(obj_path) -> str:
    base = str(obj_path)
    if base.endswith(".obj"):
        base = base[: -len(".obj")]
    return base + ".landmarks.txt"


def write_landmarks(path, landmark_indices: np.ndarray) -> None:
    """One 1-based vertex index per line."""
    with open(path, "w") as fh:
        fh.write("\n".join(str(int(i) + 1) for i in landmark_indices) + "\n")


def read_landmarks(path) -> np.ndarray:
    with open(path) as fh:
        indices = [int(line.split()[0]) - 1 for line in fh if line.strip()]
    return np.array(indices, dtype=np.int64)


def write_regions(path, regions: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(str(int(r)) for r in regions) + "\n")


def read_regions(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line.split()[0]) for line in fh if line.strip()], dtype=np.int64)
