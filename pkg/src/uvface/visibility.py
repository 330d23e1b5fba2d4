"""Attention masks, vertex visibility, and synthetic occlusion generation.

Image-space grids use rows for y (down) and columns for x (right), origin
at the top left, one unit per pixel. A cell (r, c) covers x in [c, c+1) and
y in [r, r+1); its center is (c + 0.5, r + 0.5). A soft attention mask
holds values in [0, 1]: high where the face is visible, low where it is
occluded or background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import FaceMesh, vertex_normals


def attend_features(features: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """Weight a feature grid by exp(attention), elementwise per channel."""
    features = np.asarray(features, dtype=np.float64)
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2:
        raise ValueError(f"attention mask must be 2D, got shape {attention.shape}")
    if features.shape[:2] != attention.shape:
        raise ValueError(
            f"feature grid {features.shape} does not spatially match mask {attention.shape}"
        )
    gain = np.exp(attention)
    if features.ndim == 2:
        return features * gain
    return features * gain[:, :, None]


def estimate_visibility(posed: FaceMesh, attention: np.ndarray) -> np.ndarray:
    """Per-vertex visibility of a posed mesh in the mask's image frame.

    Back-facing vertices (normal z < 0) get 0. Front-facing vertices
    (normal z >= 0) sample the mask at their floored pixel, i.e. the
    value at column floor(x), row floor(y); vertices falling outside the
    grid are unobserved and get 0.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2:
        raise ValueError("attention mask must be 2D")
    height, width = attention.shape
    normals = vertex_normals(posed)
    cols = np.floor(posed.vertices[:, 0]).astype(np.int64)
    rows = np.floor(posed.vertices[:, 1]).astype(np.int64)
    inside = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    vis = np.zeros(posed.n_vertices, dtype=np.float64)
    front = normals[:, 2] >= 0
    take = front & inside
    vis[take] = attention[rows[take], cols[take]]
    return vis


def render_face_binary_mask(
    projected: np.ndarray, facets: np.ndarray, dims: tuple[int, int]
) -> np.ndarray:
    """Rasterize projected triangles to a binary coverage mask.

    A cell is 1 iff its center lies inside (or exactly on the edge of) any
    projected triangle, irrespective of the triangle's 2D winding.
    Counting edge-touching centers keeps the mask deterministic and
    seam-free for shared edges.
    """
    height, width = int(dims[0]), int(dims[1])
    if height < 1 or width < 1:
        raise ValueError(f"bad mask dims {dims}")
    projected = np.asarray(projected, dtype=np.float64)
    facets = np.asarray(facets, dtype=np.int64).reshape(-1, 3)
    mask = np.zeros((height, width), dtype=bool)
    if len(facets) == 0:
        return mask
    tri = projected[facets]                                   # (m, 3, 2)
    x, y = tri[:, :, 0], tri[:, :, 1]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    lo_c = np.clip(np.ceil(x.min(axis=1) - 0.5), 0, width - 1).astype(np.int64)
    hi_c = np.clip(np.floor(x.max(axis=1) - 0.5), 0, width - 1).astype(np.int64)
    lo_r = np.clip(np.ceil(y.min(axis=1) - 0.5), 0, height - 1).astype(np.int64)
    hi_r = np.clip(np.floor(y.max(axis=1) - 0.5), 0, height - 1).astype(np.int64)
    bbox_w = hi_c - lo_c + 1
    bbox_h = hi_r - lo_r + 1
    keep = (np.abs(area2) >= 1e-30) & (bbox_w > 0) & (bbox_h > 0) \
        & (x.max(axis=1) >= 0) & (x.min(axis=1) <= width) \
        & (y.max(axis=1) >= 0) & (y.min(axis=1) <= height)
    if not keep.any():
        return mask
    # ragged expansion: one flat row of candidate cells per facet bbox
    counts = (bbox_w * bbox_h)[keep]
    fid = np.repeat(np.nonzero(keep)[0], counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    col = lo_c[fid] + local % bbox_w[fid]
    row = lo_r[fid] + local // bbox_w[fid]
    cx = col + 0.5
    cy = row + 0.5
    d0 = (x[fid, 1] - x[fid, 0]) * (cy - y[fid, 0]) - (y[fid, 1] - y[fid, 0]) * (cx - x[fid, 0])
    d1 = (x[fid, 2] - x[fid, 1]) * (cy - y[fid, 1]) - (y[fid, 2] - y[fid, 1]) * (cx - x[fid, 1])
    d2 = (x[fid, 0] - x[fid, 2]) * (cy - y[fid, 2]) - (y[fid, 0] - y[fid, 2]) * (cx - x[fid, 2])
    inside = ((d0 >= 0) & (d1 >= 0) & (d2 >= 0)) | ((d0 <= 0) & (d1 <= 0) & (d2 <= 0))
    mask[row[inside], col[inside]] = True
    return mask


@dataclass(frozen=True)
class OcclusionSpec:
    """Reproducible random-occluder recipe; identical spec, identical masks."""

    seed: int
    count_range: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = ("ellipse", "rectangle", "polygon")
    size_range: tuple[float, float] = (0.15, 0.4)

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad occluder count range {self.count_range}")
        slo, shi = self.size_range
        if slo <= 0 or shi < slo:
            raise ValueError(f"degenerate occluder size range {self.size_range}")
        if not self.shapes:
            raise ValueError("at least one occluder shape family required")


def synthesize_occlusion(
    face_mask: np.ndarray, spec: OcclusionSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Overlay random shapes and derive the ground-truth attention mask.

    Returns (occluder, gt_attention): the occluder grid is the union of the
    sampled shapes (1 = occluded); gt_attention is the face mask minus the
    occluded cells. Sampling uses a counter-based generator keyed by the
    spec seed, so outputs are bit-reproducible.
    """
    face_mask = np.asarray(face_mask).astype(bool)
    height, width = face_mask.shape
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    occluder = np.zeros((height, width), dtype=bool)
    cx, cy = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5, indexing="xy")
    base = min(height, width)
    for _ in range(count):
        family = spec.shapes[int(rng.integers(len(spec.shapes)))]
        center = rng.uniform([0.0, 0.0], [width, height])
        half = 0.5 * base * rng.uniform(spec.size_range[0], spec.size_range[1], size=2)
        angle = rng.uniform(0.0, np.pi)
        ca, sa = np.cos(angle), np.sin(angle)
        px = ca * (cx - center[0]) + sa * (cy - center[1])
        py = -sa * (cx - center[0]) + ca * (cy - center[1])
        if family == "ellipse":
            occluder |= (px / half[0]) ** 2 + (py / half[1]) ** 2 <= 1.0
        elif family == "rectangle":
            occluder |= (np.abs(px) <= half[0]) & (np.abs(py) <= half[1])
        elif family == "polygon":
            k = int(rng.integers(5, 9))
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=k))
            vx = half[0] * np.cos(angles)
            vy = half[1] * np.sin(angles)
            inside = np.ones_like(px, dtype=bool)
            for m in range(k):
                ax, ay = vx[m], vy[m]
                bx, by = vx[(m + 1) % k], vy[(m + 1) % k]
                inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0
            occluder |= inside
        else:
            raise ValueError(f"unknown occluder shape family {family!r}")
    return occluder, face_mask & ~occluder


# ---------------------------------------------------------------------------
# Binary PGM (P5) mask files: 0 = background/occluded, 255 = visible.
# ---------------------------------------------------------------------------

def write_pgm(path, grid: np.ndarray) -> None:
    grid = np.asarray(grid)
    if grid.dtype == bool:
        data = np.where(grid, 255, 0).astype(np.uint8)
    else:
        data = np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a uint8 grid."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()
