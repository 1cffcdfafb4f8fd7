"""Gaussian splat scenes: storage, PLY persistence and editing operations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .geometry import Box3, DoF, affine_apply, box_contains, quat_multiply, quat_normalize, quat_to_matrix

SH_C0 = 0.28209479177387814
OPACITY_EPS = 1e-7


class MalformedPly(ValueError):
    pass


class UnsupportedShDegree(ValueError):
    pass


class AnisotropicObjectScale(ValueError):
    pass


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


@dataclass(frozen=True, eq=False)
class GaussianScene:
    """An ordered set of splats stored column-wise.

    ``sh`` has shape ``(N, (d+1)**2, 3)``; index 0 along axis 1 is the DC term.
    ``opacities`` are linear (not logits) and ``log_scales`` are natural logs
    of per-axis standard deviations.
    """

    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        n = len(self.means)
        k = sh_coeff_count(self.sh_degree)
        if self.sh_degree not in (0, 1, 2, 3):
            raise UnsupportedShDegree(f"SH degree {self.sh_degree} not in 0..3")
        arrays = {
            "means": np.asarray(self.means, dtype=np.float64).reshape(n, 3),
            "rotations": np.asarray(self.rotations, dtype=np.float64).reshape(n, 4),
            "log_scales": np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3),
            "opacities": np.asarray(self.opacities, dtype=np.float64).reshape(n),
            "sh": np.asarray(self.sh, dtype=np.float64).reshape(n, k, 3),
        }
        if n and (np.any(arrays["opacities"] < 0) or np.any(arrays["opacities"] > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        if not np.all(np.isfinite(arrays["log_scales"])):
            raise ValueError("log_scales must be finite")
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, k, 3)), sh_degree)

    @property
    def colors(self) -> np.ndarray:
        """Degree-0 RGB colors clipped to [0, 1]."""
        return np.clip(sh_to_rgb(self.sh[:, 0, :]), 0.0, 1.0)

    def covariances(self) -> np.ndarray:
        r = quat_to_matrix(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def subset(self, index) -> "GaussianScene":
        return GaussianScene(
            self.means[index], self.rotations[index], self.log_scales[index],
            self.opacities[index], self.sh[index], self.sh_degree,
        )

    def replace(self, **changes) -> "GaussianScene":
        values = dict(
            means=self.means, rotations=self.rotations, log_scales=self.log_scales,
            opacities=self.opacities, sh=self.sh, sh_degree=self.sh_degree,
        )
        values.update(changes)
        return GaussianScene(**values)

    def with_sh_degree(self, degree: int) -> "GaussianScene":
        """Zero-pad (or truncate) SH coefficients to ``degree``."""
        k = sh_coeff_count(degree)
        sh = np.zeros((len(self), k, 3))
        keep = min(k, self.sh.shape[1])
        sh[:, :keep] = self.sh[:, :keep]
        return self.replace(sh=sh, sh_degree=degree)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self):
            raise ValueError("empty scene has no bounds")
        return self.means.min(axis=0), self.means.max(axis=0)

    def diameter(self) -> float:
        """Diagonal of the axis-aligned bounding box of the means."""
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def weighted_centroid(self) -> np.ndarray:
        w = self.opacities
        if w.sum() <= 0:
            return self.means.mean(axis=0)
        return (self.means * w[:, None]).sum(axis=0) / w.sum()

    def same_as(self, other: "GaussianScene") -> bool:
        return (
            self.sh_degree == other.sh_degree
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("means", "rotations", "log_scales", "opacities", "sh")
            )
        )


# ------------------------------------------------------------------------ PLY


def _property_names(sh_degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    return (
        ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_header(fh) -> tuple[int, list[tuple[str, str]]]:
    if fh.readline().strip() != b"ply":
        raise MalformedPly("missing 'ply' magic")
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise MalformedPly("unterminated header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            if tokens[1] != "binary_little_endian":
                raise MalformedPly(f"unsupported PLY format {tokens[1]}")
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise MalformedPly("list properties are not supported on vertices")
            if tokens[1] not in _PLY_TYPES:
                raise MalformedPly(f"unknown property type {tokens[1]}")
            props.append((tokens[2], "<" + _PLY_TYPES[tokens[1]]))
    if count is None:
        raise MalformedPly("no vertex element")
    return count, props


def load_ply(path) -> GaussianScene:
    """Read a binary little-endian 3DGS PLY file."""
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _read_header(fh)
        dtype = np.dtype(props)
        payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise MalformedPly(f"expected {count} vertices, file is truncated")
    data = np.frombuffer(payload, dtype=dtype, count=count)
    names = set(dtype.names or ())

    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    degree = None
    for d in range(4):
        if 3 * (sh_coeff_count(d) - 1) == n_rest:
            degree = d
    if degree is None:
        raise UnsupportedShDegree(f"{n_rest} f_rest properties match no SH degree in 0..3")
    missing = [name for name in _property_names(degree) if name not in names]
    if missing:
        raise MalformedPly(f"missing properties: {missing}")

    def col(name):
        return data[name].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    k = sh_coeff_count(degree)
    sh = np.zeros((count, k, 3))
    for c in range(3):
        sh[:, 0, c] = col(f"f_dc_{c}")
        for j in range(k - 1):
            sh[:, 1 + j, c] = col(f"f_rest_{c * (k - 1) + j}")
    rot = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    if count:
        norms = np.linalg.norm(rot, axis=1)
        if np.any(norms == 0):
            raise MalformedPly("zero-length rotation quaternion")
        # leave already-unit quaternions untouched so float payloads round-trip
        off = np.abs(norms - 1.0) > 1e-6
        rot[off] = rot[off] / norms[off, None]
        rot[rot[:, 0] < 0] *= -1.0
    return GaussianScene(
        means=means,
        rotations=rot,
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        opacities=expit(col("opacity")),
        sh=sh,
        sh_degree=degree,
    )


def save_ply(scene: GaussianScene, path) -> None:
    names = _property_names(scene.sh_degree)
    n = len(scene)
    k = sh_coeff_count(scene.sh_degree)
    cols = {
        "x": scene.means[:, 0], "y": scene.means[:, 1], "z": scene.means[:, 2],
        "opacity": logit(np.clip(scene.opacities, OPACITY_EPS, 1.0 - OPACITY_EPS)),
    }
    for c in range(3):
        cols[f"f_dc_{c}"] = scene.sh[:, 0, c]
        for j in range(k - 1):
            cols[f"f_rest_{c * (k - 1) + j}"] = scene.sh[:, 1 + j, c]
    for i in range(3):
        cols[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        cols[f"rot_{i}"] = scene.rotations[:, i]
    data = np.empty(n, dtype=[(name, "<f4") for name in names])
    for name in names:
        data[name] = cols[name]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    blob = ("\n".join(header) + "\n").encode("ascii") + data.tobytes()
    Path(path).write_bytes(blob)


def write_manifest(scene: GaussianScene, ply_path, manifest_path) -> dict:
    manifest = {"path": str(ply_path), "sh_degree": scene.sh_degree, "splat_count": len(scene)}
    Path(manifest_path).write_text(json.dumps(manifest, indent=2))
    return manifest


# ------------------------------------------------------------------ editing


def extract_region(scene: GaussianScene, box: Box3) -> tuple[GaussianScene, GaussianScene]:
    """Split ``scene`` into splats whose mean lies in ``box`` and the rest."""
    if not len(scene):
        return scene, scene
    inside = np.asarray(box_contains(box, scene.means))
    return scene.subset(np.flatnonzero(inside)), scene.subset(np.flatnonzero(~inside))


def transform_scene(scene: GaussianScene, dof: DoF) -> GaussianScene:
    """Apply an isotropic-scale rigid transform to every splat."""
    if not dof.is_isotropic():
        raise AnisotropicObjectScale(f"object transforms need isotropic scale, got {dof.scale}")
    if not len(scene) or dof == DoF.identity():
        return scene
    s = float(dof.scale[0])
    rotations = scene.rotations
    if not np.array_equal(dof.rotation, [1.0, 0.0, 0.0, 0.0]):
        rotations = quat_multiply(dof.rotation[None, :], rotations)
    return scene.replace(
        means=affine_apply(dof, scene.means),
        rotations=rotations,
        log_scales=scene.log_scales + math.log(s),
    )


def merge(a: GaussianScene, b: GaussianScene) -> GaussianScene:
    degree = max(a.sh_degree, b.sh_degree)
    a = a.with_sh_degree(degree) if a.sh_degree != degree else a
    b = b.with_sh_degree(degree) if b.sh_degree != degree else b
    return GaussianScene(
        means=np.concatenate([a.means, b.means]),
        rotations=np.concatenate([a.rotations, b.rotations]),
        log_scales=np.concatenate([a.log_scales, b.log_scales]),
        opacities=np.concatenate([a.opacities, b.opacities]),
        sh=np.concatenate([a.sh, b.sh]),
        sh_degree=degree,
    )


def normalize_object(obj: GaussianScene) -> GaussianScene:
    """Center on the bounding-box midpoint and rescale to unit diameter."""
    lo, hi = obj.bounds()
    diameter = float(np.linalg.norm(hi - lo))
    if diameter <= 0:
        return transform_scene(obj, DoF(translation=-0.5 * (lo + hi)))
    s = 1.0 / diameter
    return transform_scene(obj, DoF(scale=s, translation=-0.5 * (lo + hi) * s))


# -------------------------------------------------------------- primitives


def synth_primitive(
    kind: str,
    n: int,
    seed: int = 0,
    color=(0.8, 0.3, 0.2),
    opacity: float = 0.9,
) -> GaussianScene:
    """Procedural object made of isotropic splats, roughly unit sized.

    ``sphere`` samples a solid ball of radius 0.5, ``box`` a unit cube and
    ``two-lobe`` two overlapping balls along x. ``n == 1`` gives one splat
    at the origin.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if n == 1:
        means = np.zeros((1, 3))
    elif kind == "sphere":
        means = _ball(rng, n, 0.5)
    elif kind == "box":
        means = rng.uniform(-0.5, 0.5, size=(n, 3))
    elif kind == "two-lobe":
        left = n // 2
        means = np.concatenate(
            [_ball(rng, left, 0.3) + [-0.2, 0, 0], _ball(rng, n - left, 0.22) + [0.28, 0, 0.08]]
        )
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    volume = {"sphere": 4 / 3 * math.pi * 0.125, "box": 1.0, "two-lobe": 0.16}[kind]
    # spacing of n points filling the volume; sigma ~ spacing keeps neighbours overlapping
    sigma = 0.6 * (volume / n) ** (1.0 / 3.0) if n > 1 else 0.25
    rgb = np.broadcast_to(np.asarray(color, dtype=np.float64), (n, 3))
    return GaussianScene(
        means=means,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), math.log(sigma)),
        opacities=np.full(n, opacity),
        sh=rgb_to_sh(rgb)[:, None, :],
        sh_degree=0,
    )


def _ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=n) ** (1.0 / 3.0)
    return d * r[:, None]


def random_scene(n: int, seed: int = 0, sh_degree: int = 0, spread: float = 1.0) -> GaussianScene:
    """Random anisotropic splats, mostly for tests and fixtures."""
    rng = np.random.default_rng(seed)
    k = sh_coeff_count(sh_degree)
    return GaussianScene(
        means=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=rng.uniform(-3.0, -1.0, size=(n, 3)),
        opacities=rng.uniform(0.05, 0.95, size=n),
        sh=rng.normal(scale=0.5, size=(n, k, 3)),
        sh_degree=sh_degree,
    )
