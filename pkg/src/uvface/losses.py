"""Mesh-structured losses with analytic gradients.

Six terms enter the weighted total: three position terms over UV maps
(geometry L_G, deformation L_D, posed face L_P, all the same weighted
per-cell Euclidean distance), a BCE attention term L_A, an edge length
term L_E, and a normal consistency term L_V. Position, edge, and normal
terms sum (not average) over cells/edges/facets; callers that need a
per-cell scale fold it into their step size.

All norms and absolute values use subgradient 0 at their kinks, so the
gradients are defined everywhere and match central finite differences
away from the nondifferentiable loci.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import FaceMesh
from .uvmap import UVMapping, UVPositionMap, WeightMask

TERM_NAMES = ("L_G", "L_D", "L_P", "L_A", "L_E", "L_V")


@dataclass
class LossConfig:
    """Term weights for the total loss plus the BCE clamp."""

    beta_g: float = 0.1
    beta_d: float = 0.5
    beta_p: float = 1.0
    beta_a: float = 0.05
    beta_e: float = 1.0
    beta_v: float = 0.1
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if not 0 < self.bce_clamp <= 0.01:
            raise ValueError(f"bce_clamp must be in (0, 0.01], got {self.bce_clamp}")

    def betas(self) -> dict[str, float]:
        return {
            "L_G": self.beta_g,
            "L_D": self.beta_d,
            "L_P": self.beta_p,
            "L_A": self.beta_a,
            "L_E": self.beta_e,
            "L_V": self.beta_v,
        }


@dataclass
class LossReport:
    """Per-term values, the weighted total, and optional weighted gradients."""

    values: dict[str, float]
    total: float
    gradients: dict[str, np.ndarray] | None = None

    def to_text(self) -> str:
        lines = [f"{name} {self.values[name]:.17g}" for name in TERM_NAMES if name in self.values]
        lines.append(f"total {self.total:.17g}")
        return "\n".join(lines) + "\n"


def _as_vertices(mesh_or_vertices) -> np.ndarray:
    if isinstance(mesh_or_vertices, FaceMesh):
        return mesh_or_vertices.vertices
    return np.asarray(mesh_or_vertices, dtype=np.float64)


def weighted_position_loss(
    pred: UVPositionMap, truth: UVPositionMap, mask: WeightMask
) -> tuple[float, np.ndarray]:
    """Sum over valid cells of ||pred - truth||_2 * mask.

    Returns the value and the gradient grid with respect to the predicted
    map; cells where the two maps tie get subgradient 0, invalid cells 0.
    """
    if pred.grid.shape != truth.grid.shape or pred.grid.shape[:2] != mask.weights.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.grid.shape}, truth {truth.grid.shape}, "
            f"mask {mask.weights.shape}"
        )
    valid = pred.valid & truth.valid
    diff = pred.grid - truth.grid
    dist = np.linalg.norm(diff, axis=2)
    weighted = np.where(valid, dist * mask.weights, 0.0)
    value = float(weighted.sum())
    grad = np.zeros_like(diff)
    active = valid & (dist > 0)
    grad[active] = (mask.weights[active] / dist[active])[:, None] * diff[active]
    return value, grad


def bce_attention_loss(
    attention: np.ndarray, truth: np.ndarray, clamp: float = 1e-7
) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy of the predicted mask against a binary one.

    The prediction is clamped to [clamp, 1 - clamp] before the logs; the
    gradient is the analytic gradient of the clamped expression (zero where
    the clamp is active).
    """
    attention = np.asarray(attention, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if attention.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {attention.shape} vs {truth.shape}")
    a = np.clip(attention, clamp, 1.0 - clamp)
    count = attention.size
    value = float(-(truth * np.log(a) + (1.0 - truth) * np.log1p(-a)).sum() / count)
    grad = (-truth / a + (1.0 - truth) / (1.0 - a)) / count
    grad = np.where((attention >= clamp) & (attention <= 1.0 - clamp), grad, 0.0)
    return value, grad


def build_uv_edge_set(mapping: UVMapping) -> np.ndarray:
    """Vertex pairs adjacent on the registered UV lattice (4-neighborhood).

    Registered cells are compressed to their rank along each UV axis; two
    vertices are adjacent when their compressed coordinates differ by one
    step along exactly one axis. On a product-aligned template this is
    precisely the grid-neighbor relation.
    """
    ru = np.unique(mapping.cell_u, return_inverse=True)[1]
    rv = np.unique(mapping.cell_v, return_inverse=True)[1]
    grid = np.full((ru.max() + 1, rv.max() + 1), -1, dtype=np.int64)
    grid[ru, rv] = np.arange(mapping.n_vertices)
    edges = []
    right_a, right_b = grid[:, :-1], grid[:, 1:]
    ok = (right_a >= 0) & (right_b >= 0)
    edges.append(np.stack([right_a[ok], right_b[ok]], axis=1))
    down_a, down_b = grid[:-1, :], grid[1:, :]
    ok = (down_a >= 0) & (down_b >= 0)
    edges.append(np.stack([down_a[ok], down_b[ok]], axis=1))
    out = np.concatenate(edges)
    if out.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    out = np.sort(out, axis=1)
    return np.unique(out, axis=0)


def edge_lengths(vertices, edges: np.ndarray) -> np.ndarray:
    vertices = _as_vertices(vertices)
    return np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)


def edge_length_loss_from_lengths(
    pred, edges: np.ndarray, truth_lengths: np.ndarray, with_gradient: bool = True
) -> tuple[float, np.ndarray | None]:
    """Sum over edges of | ||E_ij|| - truth_length |, with vertex gradients."""
    vertices = _as_vertices(pred)
    vec = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    length = np.linalg.norm(vec, axis=1)
    residual = length - truth_lengths
    value = float(np.abs(residual).sum())
    if not with_gradient:
        return value, None
    grad = np.zeros_like(vertices)
    ok = length > 0
    coef = np.zeros_like(length)
    coef[ok] = np.sign(residual[ok]) / length[ok]
    contrib = coef[:, None] * vec
    np.add.at(grad, edges[:, 0], contrib)
    np.add.at(grad, edges[:, 1], -contrib)
    return value, grad


def edge_length_loss(pred, truth, edges: np.ndarray) -> tuple[float, np.ndarray]:
    """Edge length discrepancy against a ground-truth mesh over the edge set."""
    return edge_length_loss_from_lengths(pred, edges, edge_lengths(truth, edges))


def normal_vector_loss(
    pred, gt_normals: np.ndarray, facets: np.ndarray, with_gradient: bool = True
) -> tuple[float, np.ndarray | None]:
    """Sum over facets of |<unit edge, reference normal>| for the 3 edges.

    The reference normals must come from the ground-truth mesh: with
    normals recomputed from the predicted facets the three edges lie in
    the plane orthogonal to their own normal, so the loss is identically
    zero and carries no signal. Raises on a zero-length predicted edge.
    """
    vertices = _as_vertices(pred)
    facets = np.asarray(facets, dtype=np.int64)
    gt_normals = np.asarray(gt_normals, dtype=np.float64)
    if gt_normals.shape != (len(facets), 3):
        raise ValueError(f"need one reference normal per facet, got {gt_normals.shape}")
    value = 0.0
    grad = np.zeros_like(vertices) if with_gradient else None
    corner_pairs = ((0, 1), (1, 2), (2, 0))
    for a, b in corner_pairs:
        vec = vertices[facets[:, a]] - vertices[facets[:, b]]
        length = np.linalg.norm(vec, axis=1)
        if np.any(length <= 0):
            bad = int(np.nonzero(length <= 0)[0][0])
            raise ValueError(f"degenerate predicted edge in facet {bad}")
        inner = (vec * gt_normals).sum(axis=1) / length
        value += float(np.abs(inner).sum())
        if not with_gradient:
            continue
        sign = np.sign(inner)
        # d|<E,n>/||E||| / dE = sign * (n / ||E|| - E <E,n> / ||E||^3)
        d_vec = sign[:, None] * (
            gt_normals / length[:, None] - vec * (inner / length ** 2)[:, None]
        )
        np.add.at(grad, facets[:, a], d_vec)
        np.add.at(grad, facets[:, b], -d_vec)
    return value, grad


def total_loss(
    values: dict[str, float],
    cfg: LossConfig,
    gradients: dict[str, np.ndarray] | None = None,
) -> LossReport:
    """Weighted sum of the term values (and, when given, gradients).

    Terms may be omitted only when their weight is zero. Gradients in the
    report are each term's gradient scaled by its weight; gradients of
    terms sharing an input are left for the caller to add.
    """
    betas = cfg.betas()
    if any(beta < 0 for beta in betas.values()):
        raise ValueError("negative loss weights are not allowed")
    unknown = set(values) - set(betas)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total = 0.0
    for name, beta in betas.items():
        if name in values:
            total += beta * values[name]
        elif beta != 0.0:
            raise ValueError(f"term {name} missing but its weight is {beta}")
    weighted_grads = None
    if gradients is not None:
        weighted_grads = {name: betas[name] * g for name, g in gradients.items()}
    return LossReport(values=dict(values), total=total, gradients=weighted_grads)
