"""Vectors, unit quaternions, scale/rotate/translate transforms and boxes.

Points are plain ``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` for
batches). Quaternions are ``(4,)`` arrays ordered ``w, x, y, z`` and are
kept unit-norm with ``w >= 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-6
# closed-box slack in local units; absorbs rounding for points built on a face
BOX_TOL = 1e-12


class NonRepresentable(ValueError):
    """Composition result cannot be written as scale, rotation, translation."""


# ---------------------------------------------------------------- quaternions


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    # double cover: keep w >= 0
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return quat_normalize(np.concatenate([[math.cos(half)], math.sin(half) * axis]))


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix (or stack of matrices) for unit quaternion(s)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_from_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_azimuth_elevation(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    """Rotation by ``elevation`` about x followed by ``azimuth`` about z."""
    qz = quat_from_axis_angle([0, 0, 1], math.radians(azimuth_deg))
    qx = quat_from_axis_angle([1, 0, 0], math.radians(elevation_deg))
    return quat_multiply(qz, qx)


def quat_angle_deg(a, b) -> float:
    """Geodesic angle between two rotations, in degrees."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return math.degrees(2.0 * math.acos(min(1.0, d)))


def random_quat(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


# ----------------------------------------------------------------------- DoF


@dataclass(frozen=True)
class DoF:
    """Per-axis scale, rotation and translation: ``p -> R @ (S * p) + t``."""

    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    rotation: np.ndarray = field(default_factory=quat_identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if scale.size == 1:
            scale = np.repeat(scale, 3)
        if scale.shape != (3,) or not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise ValueError(f"scale must be 3 positive finite values, got {scale}")
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(translation)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation).reshape(4)))
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "DoF":
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        """3x3 linear part ``R @ diag(s)``."""
        return quat_to_matrix(self.rotation) * self.scale[None, :]

    def is_isotropic(self, tol: float = 1e-9) -> bool:
        return bool(np.ptp(self.scale) <= tol * max(1.0, float(np.max(self.scale))))

    def replace(self, **changes) -> "DoF":
        values = {"scale": self.scale, "rotation": self.rotation, "translation": self.translation}
        values.update(changes)
        return DoF(**values)

    def to_dict(self) -> dict:
        return {
            "scale": [float(v) for v in self.scale],
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DoF":
        return cls(scale=d["scale"], rotation=d["rotation"], translation=d["translation"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DoF":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, DoF):
            return NotImplemented
        return (
            np.array_equal(self.scale, other.scale)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None


def affine_apply(dof: DoF, p) -> np.ndarray:
    """Map point(s) ``p`` through ``dof``. Accepts ``(3,)`` or ``(N, 3)``."""
    p = np.asarray(p, dtype=np.float64)
    return p @ dof.matrix.T + dof.translation


def affine_invert(dof: DoF, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    r = quat_to_matrix(dof.rotation)
    return ((p - dof.translation) @ r) / dof.scale


def compose_dof(outer: DoF, inner: DoF) -> DoF:
    """DoF equivalent to applying ``inner`` then ``outer``.

    Only representable when ``outer`` scales isotropically or ``inner`` has
    no rotation; otherwise :class:`NonRepresentable` is raised.
    """
    inner_rotated = quat_angle_deg(inner.rotation, quat_identity()) > 1e-9
    if not outer.is_isotropic() and inner_rotated:
        raise NonRepresentable("anisotropic outer scale cannot follow a rotation")
    if outer.is_isotropic():
        scale = outer.scale[0] * inner.scale
    else:
        # inner rotation is identity, so diag scales commute with nothing to rotate
        scale = outer.scale * inner.scale
    rotation = quat_multiply(outer.rotation, inner.rotation)
    translation = affine_apply(outer, inner.translation)
    return DoF(scale=scale, rotation=rotation, translation=translation)


def invert_dof(dof: DoF) -> DoF:
    if not dof.is_isotropic():
        raise NonRepresentable("inverse of an anisotropic rotated scale is a shear")
    s = 1.0 / dof.scale
    rot = quat_conjugate(dof.rotation)
    t = -(quat_to_matrix(rot) @ dof.translation) * s
    return DoF(scale=s, rotation=rot, translation=t)


# ---------------------------------------------------------------------- boxes

_UNIT_CORNERS = np.array(
    [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
)


@dataclass(frozen=True)
class Box3:
    """Canonical unit cube (corners at +/-0.5) placed by a :class:`DoF`."""

    dof: DoF = field(default_factory=DoF)

    @property
    def corners(self) -> np.ndarray:
        return affine_apply(self.dof, _UNIT_CORNERS)

    @property
    def volume(self) -> float:
        return float(np.prod(self.dof.scale))

    @property
    def center(self) -> np.ndarray:
        return self.dof.translation.copy()

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box3":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls(DoF(scale=np.maximum(hi - lo, 1e-9), translation=0.5 * (lo + hi)))


def box_contains(box: Box3, p, tol: float = BOX_TOL) -> np.ndarray | bool:
    """Closed membership test; vectorized over ``(N, 3)`` inputs."""
    local = affine_invert(box.dof, p)
    inside = np.all(np.abs(local) <= 0.5 + tol, axis=-1)
    if inside.ndim == 0:
        return bool(inside)
    return inside
