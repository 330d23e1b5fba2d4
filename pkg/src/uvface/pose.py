"""Similarity poses, weak-perspective projection, and Euler conversion.

A pose is G = f*R*S + t: uniform scale, proper rotation, translation.
Euler angles use the intrinsic X(pitch)-Y(yaw)-Z(roll) sequence, i.e.
R = Rx(pitch) @ Ry(yaw) @ Rz(roll), so yaw is the middle axis and the
decomposition degenerates (gimbal lock) when |yaw| approaches 90 degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import FaceMesh

ORTHONORMAL_TOL = 1e-10


@dataclass(frozen=True)
class PoseTransform:
    """Similarity transform (scale, rotation, translation)."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        r = self.rotation
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal within 1e-10")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-10")

    @classmethod
    def identity(cls) -> "PoseTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def inverse(self) -> "PoseTransform":
        """The pose mapping G back to S: (1/f, R^T, -R^T t / f)."""
        rt = self.rotation.T
        return PoseTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def to_text(self) -> str:
        rows = [f"{self.scale:.17g}"]
        rows += [" ".join(f"{x:.17g}" for x in row) for row in self.rotation]
        rows.append(" ".join(f"{x:.17g}" for x in self.translation))
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PoseTransform":
        values = [[float(tok) for tok in line.split()] for line in text.splitlines() if line.strip()]
        if len(values) != 5 or len(values[0]) != 1 or any(len(v) != 3 for v in values[1:]):
            raise ValueError("pose text must be one scale line, three rotation rows, one translation line")
        return cls(values[0][0], np.array(values[1:4]), np.array(values[4]))


def write_pose(path, pose: PoseTransform) -> None:
    with open(path, "w") as fh:
        fh.write(pose.to_text())


def read_pose(path) -> PoseTransform:
    with open(path) as fh:
        return PoseTransform.from_text(fh.read())


@dataclass(frozen=True)
class EulerAngles:
    """Head pose angles in degrees; gimbal_locked marks |yaw| near 90."""

    yaw: float
    pitch: float
    roll: float
    gimbal_locked: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)


def compose_shape(mean: FaceMesh, deformation: np.ndarray) -> FaceMesh:
    """Mean template plus per-vertex deformation offsets; topology unchanged.

    With float32-valued inputs (the template and synthetic deformations are
    quantized that way) the float64 sum is exact, so subtracting the
    template recovers the deformation bit-exactly.
    """
    deformation = np.asarray(deformation, dtype=np.float64)
    if deformation.shape != mean.vertices.shape:
        raise ValueError(
            f"deformation shape {deformation.shape} does not match mesh {mean.vertices.shape}"
        )
    return mean.with_vertices(mean.vertices + deformation)


def apply_pose(shape: FaceMesh, pose: PoseTransform) -> FaceMesh:
    """Per-vertex G_i = f * R @ S_i + t; topology unchanged."""
    posed = pose.scale * shape.vertices @ pose.rotation.T + pose.translation
    return shape.with_vertices(posed)


def project(geometry: FaceMesh | np.ndarray) -> np.ndarray:
    """Weak-perspective projection: drop the z coordinate, (n, 2)."""
    vertices = geometry.vertices if isinstance(geometry, FaceMesh) else np.asarray(geometry)
    return np.array(vertices[:, :2], dtype=np.float64)


def euler_to_rotation(angles: EulerAngles) -> np.ndarray:
    """Rotation matrix Rx(pitch) @ Ry(yaw) @ Rz(roll), angles in degrees."""
    p, y, r = (math.radians(angles.pitch), math.radians(angles.yaw), math.radians(angles.roll))
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    cr, sr = math.cos(r), math.sin(r)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return rx @ ry @ rz


def _wrap_degrees(angle: float) -> float:
    """Map into (-180, 180]."""
    wrapped = math.fmod(angle + 180.0, 360.0)
    if wrapped <= 0:
        wrapped += 360.0
    return wrapped - 180.0


def rotation_to_euler(rotation: np.ndarray, lock_tol_deg: float = 0.5) -> EulerAngles:
    """Invert the Rx(pitch) @ Ry(yaw) @ Rz(roll) factorization.

    Away from lock the branch with pitch in [-90, 90] is returned. Within
    lock_tol_deg of |yaw| = 90 only pitch+roll (or pitch-roll) is
    observable; the ambiguity is resolved by forcing roll = 0 and the
    gimbal_locked flag is set.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3) or np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOL \
            or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
        raise ValueError("input is not a proper rotation matrix")
    sy = min(1.0, max(-1.0, float(rotation[0, 2])))
    yaw = math.degrees(math.asin(sy))
    if 90.0 - abs(yaw) <= lock_tol_deg:
        combined = math.degrees(math.atan2(rotation[1, 0], rotation[1, 1]))
        pitch = combined if sy > 0 else -combined
        return EulerAngles(yaw=yaw, pitch=pitch, roll=0.0, gimbal_locked=True)
    pitch = math.degrees(math.atan2(-rotation[1, 2], rotation[2, 2]))
    roll = math.degrees(math.atan2(-rotation[0, 1], rotation[0, 0]))
    if abs(pitch) > 90.0:
        yaw = _wrap_degrees(180.0 - yaw)
        pitch = pitch - math.copysign(180.0, pitch)
        roll = roll - math.copysign(180.0, roll)
    return EulerAngles(yaw=yaw, pitch=pitch, roll=roll, gimbal_locked=False)
