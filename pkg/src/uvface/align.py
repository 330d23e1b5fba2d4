"""Visibility-weighted similarity estimation between two registered faces.

Given corresponding landmark sets K_S (pose-independent face) and K_P
(pose-dependent face) with per-landmark weights from visibility, estimate
the similarity transform (f, R, t) with f * R @ K_S + t ~ K_P:

  1. weights          W(i,i) = Vis(i) + eps
  2. centroids        M_X = sum_i W(i,i) K_X(i) / sum_i W(i,i)
  3. scale            f = sum_i ||K_P(i) - M_P|| / sum_i ||K_S(i) - M_S||
  4. centering        K_S' = f (K_S - M_S),  K_P' = K_P - M_P
  5. cross-covariance H = K_S' W K_P'^T, SVD H = U S V^T, R = V U^T
                      (last column of V sign-flipped if det would be -1)
  6. translation      t = M_P - f R M_S

The scale sums in step 3 are unweighted by design; a weighted variant is
available behind the ``weighted_scale`` flag. The translation includes the
scale factor so that the recovered transform reproduces K_P exactly on
noise-free input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import FaceMesh
from .pose import PoseTransform, apply_pose

DEFAULT_EPS = 0.1
_CONDITION_TOL = 1e-12


class DegenerateConfigurationError(ValueError):
    """Landmark configuration too degenerate to determine the transform."""


@dataclass
class LandmarkCorrespondence:
    """Paired landmark sets with per-landmark weights.

    Weights produced by landmark_weights are strictly positive; zeros are
    tolerated here only so limit cases can be probed directly.
    """

    k_s: np.ndarray
    k_p: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.k_s = np.asarray(self.k_s, dtype=np.float64).reshape(-1, 3)
        self.k_p = np.asarray(self.k_p, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.k_s) == len(self.k_p) == len(self.weights)):
            raise ValueError("landmark sets and weights must have equal length")
        if np.any(self.weights < 0) or self.weights.sum() <= 0:
            raise ValueError("landmark weights must be non-negative with positive sum")

    def __len__(self) -> int:
        return len(self.weights)


def landmark_weights(vis: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Diagonal weights vis + eps; eps > 0 guards all-invisible landmarks."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return np.asarray(vis, dtype=np.float64) + eps


def weighted_centroids(corr: LandmarkCorrespondence) -> tuple[np.ndarray, np.ndarray]:
    total = corr.weights.sum()
    m_s = (corr.weights[:, None] * corr.k_s).sum(axis=0) / total
    m_p = (corr.weights[:, None] * corr.k_p).sum(axis=0) / total
    return m_s, m_p


def estimate_scale(
    corr: LandmarkCorrespondence,
    centroids: tuple[np.ndarray, np.ndarray] | None = None,
    weighted: bool = False,
) -> float:
    """Ratio of total centroid spread, target over source.

    The default sums are unweighted; ``weighted`` switches both sums to the
    landmark weights.
    """
    m_s, m_p = centroids if centroids is not None else weighted_centroids(corr)
    d_s = np.linalg.norm(corr.k_s - m_s, axis=1)
    d_p = np.linalg.norm(corr.k_p - m_p, axis=1)
    if weighted:
        d_s = corr.weights * d_s
        d_p = corr.weights * d_p
    denom = d_s.sum()
    if denom <= 0:
        raise DegenerateConfigurationError("source landmarks coincide; scale undefined")
    return float(d_p.sum() / denom)


def estimate_similarity(
    corr: LandmarkCorrespondence, weighted_scale: bool = False
) -> PoseTransform:
    """Weighted similarity fit via SVD; always returns a proper rotation.

    Raises DegenerateConfigurationError when fewer than 3 landmarks are
    given, the source landmarks coincide, or the configuration is
    (near-)collinear (second singular value below 1e-12 of the first).
    """
    if len(corr) < 3:
        raise DegenerateConfigurationError(f"need at least 3 landmarks, got {len(corr)}")
    m_s, m_p = weighted_centroids(corr)
    f = estimate_scale(corr, (m_s, m_p), weighted=weighted_scale)
    ks_c = f * (corr.k_s - m_s)
    kp_c = corr.k_p - m_p
    h = ks_c.T @ (corr.weights[:, None] * kp_c)
    u, s, vt = np.linalg.svd(h)
    if s[1] < _CONDITION_TOL * s[0]:
        raise DegenerateConfigurationError(
            f"ill-conditioned landmark configuration (sigma2/sigma1 = {s[1] / s[0]:.3e})"
        )
    v = vt.T
    r = v @ u.T
    if np.linalg.det(r) < 0:
        v = v.copy()
        v[:, -1] *= -1.0
        r = v @ u.T
    t = m_p - f * (r @ m_s)
    return PoseTransform(scale=f, rotation=r, translation=t)


def self_align(
    p_face: FaceMesh,
    s_face: FaceMesh,
    vis: np.ndarray,
    eps: float = DEFAULT_EPS,
    weighted_scale: bool = False,
) -> PoseTransform:
    """Estimate the pose carrying s_face onto p_face from their landmarks.

    The meshes must share topology and landmark indices. ``vis`` is either
    per-vertex (indexed down to the landmarks) or already per-landmark.
    """
    if s_face.landmark_indices is None:
        raise ValueError("pose-independent face has no landmark indices")
    if p_face.landmark_indices is not None and not np.array_equal(
        p_face.landmark_indices, s_face.landmark_indices
    ):
        raise ValueError("meshes disagree on landmark indices")
    idx = s_face.landmark_indices
    vis = np.asarray(vis, dtype=np.float64)
    if vis.shape == (s_face.n_vertices,):
        vis = vis[idx]
    elif vis.shape != (len(idx),):
        raise ValueError(
            f"visibility length {vis.shape} matches neither vertex count "
            f"{s_face.n_vertices} nor landmark count {len(idx)}"
        )
    corr = LandmarkCorrespondence(
        k_s=s_face.vertices[idx],
        k_p=p_face.vertices[idx],
        weights=landmark_weights(vis, eps),
    )
    return estimate_similarity(corr, weighted_scale=weighted_scale)


def reconstruct_final(s_face: FaceMesh, pose: PoseTransform) -> FaceMesh:
    """Apply the estimated pose to the pose-independent face."""
    return apply_pose(s_face, pose)
