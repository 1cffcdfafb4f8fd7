"""Pinhole cameras, soft box masks and a small CPU splat renderer.

Pixel ``(row, col)`` has its center at image coordinates ``(u=col, v=row)``.
Cameras look down their +z axis with +y pointing down the image.
"""

from __future__ import annotations

import functools
import io
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from PIL import Image
from scipy.special import expit

from .gaussians import GaussianScene
from .geometry import Box3, quat_from_matrix, quat_normalize, quat_to_matrix

NEAR = 1e-6
MAX_ALPHA = 0.99
# low-pass dilation of projected covariances, in px^2
DILATION = 0.3
# Gaussian exponent below which a splat contributes nothing (exp(-12) ~ 6e-6)
POWER_CUTOFF = -12.0


class BehindCamera(ValueError):
    pass


class FullyBehindCamera(ValueError):
    pass


class NothingVisible(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 16 or self.height < 16:
            raise ValueError("images must be at least 16x16")
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def world_to_camera(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.R.T + self.translation

    def camera_to_world(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.translation) @ self.R

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        return self.camera_to_world(np.array([x, y, depth]))

    def key(self) -> tuple:
        return (
            self.fx, self.fy, self.cx, self.cy, self.width, self.height,
            tuple(self.rotation.tolist()), tuple(self.translation.tolist()),
        )

    def __eq__(self, other):
        return isinstance(other, Camera) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=d["rotation"], translation=d["translation"],
        )


def look_at(eye, target, width: int = 64, height: int = 64, fov_deg: float = 50.0, up=(0, 0, 1)) -> Camera:
    """Camera at ``eye`` looking at ``target`` with world ``up`` roughly image-up."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height,
        rotation=quat_from_matrix(r), translation=-r @ eye,
    )


def orbit_cameras(
    center, radius: float, n: int, elevation_deg: float = 30.0, width: int = 64, height: int = 64,
    fov_deg: float = 50.0, azimuth_offset_deg: float = 0.0,
) -> list[Camera]:
    center = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation_deg)
    cams = []
    for i in range(n):
        az = math.radians(azimuth_offset_deg + 360.0 * i / n)
        eye = center + radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(look_at(eye, center, width, height, fov_deg))
    return cams


# ---------------------------------------------------------------- projection


def project_point(cam: Camera, p) -> tuple[float, float, float]:
    x, y, z = cam.world_to_camera(p)
    if z <= NEAR:
        raise BehindCamera(f"point at depth {z:g} is behind the camera")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, float(z)


def project_points(cam: Camera, p) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns ``(uv (N, 2), depth (N,))`` without culling."""
    pc = cam.world_to_camera(p)
    z = pc[:, 2]
    safe = np.where(np.abs(z) > NEAR, z, NEAR)
    uv = np.stack([cam.fx * pc[:, 0] / safe + cam.cx, cam.fy * pc[:, 1] / safe + cam.cy], axis=1)
    return uv, z


def pixel_grid(cam: Camera, roi=None) -> tuple[np.ndarray, np.ndarray]:
    r0, r1, c0, c1 = roi if roi is not None else (0, cam.height, 0, cam.width)
    vv, uu = np.mgrid[r0:r1, c0:c1]
    return uu.astype(np.float64).ravel(), vv.astype(np.float64).ravel()


# ------------------------------------------------------------ soft box masks


@functools.lru_cache(maxsize=16)
def _cached_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    vv, uu = np.mgrid[0:height, 0:width]
    u, v = uu.astype(np.float64).ravel(), vv.astype(np.float64).ravel()
    u.setflags(write=False)
    v.setflags(write=False)
    return u, v


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (Andrew's monotone chain); collinear points dropped."""
    pts = sorted(set(map(tuple, points.tolist())))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


@numba.njit(cache=True)
def _polygon_sd_kernel(hull, u, v):
    n = hull.shape[0]
    out = np.empty(u.shape[0])
    for i in range(u.shape[0]):
        px = u[i]
        py = v[i]
        best = np.inf
        inside = n >= 3
        m = n if n >= 3 else n - 1
        for e in range(m):
            ax = hull[e, 0]
            ay = hull[e, 1]
            bx = hull[(e + 1) % n, 0]
            by = hull[(e + 1) % n, 1]
            abx = bx - ax
            aby = by - ay
            apx = px - ax
            apy = py - ay
            denom = abx * abx + aby * aby
            t = 0.0
            if denom > 0.0:
                t = (apx * abx + apy * aby) / denom
                t = min(1.0, max(0.0, t))
            dx = px - (ax + t * abx)
            dy = py - (ay + t * aby)
            d2 = dx * dx + dy * dy
            if d2 < best:
                best = d2
            # CCW in (u, v) coordinates: interior is left of every edge
            if abx * apy - aby * apx < 0.0:
                inside = False
        if n == 1:
            dx = px - hull[0, 0]
            dy = py - hull[0, 1]
            best = dx * dx + dy * dy
        best = np.sqrt(best)
        out[i] = best if inside else -best
    return out


def polygon_signed_distance(hull: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed distance to a convex CCW polygon, positive inside.

    Fewer than three vertices (a point or segment) has no interior.
    """
    return _polygon_sd_kernel(
        np.ascontiguousarray(hull, dtype=np.float64), np.ascontiguousarray(u), np.ascontiguousarray(v)
    )


def projected_hull(cam: Camera, box: Box3) -> np.ndarray:
    uv, z = project_points(cam, box.corners)
    visible = z > NEAR
    if not np.any(visible):
        raise FullyBehindCamera("no box corner lies in front of the camera")
    return _convex_hull(uv[visible])


def box_soft_mask(cam: Camera, box: Box3, sharpness: float = 4.0) -> np.ndarray:
    """``sigmoid(sharpness * signed_distance)`` of the projected box hull."""
    hull = projected_hull(cam, box)
    u, v = _cached_grid(cam.width, cam.height)
    sd = polygon_signed_distance(hull, u, v)
    return expit(sharpness * sd).reshape(cam.shape)


def box_hard_mask(cam: Camera, box: Box3) -> np.ndarray:
    hull = projected_hull(cam, box)
    u, v = _cached_grid(cam.width, cam.height)
    return (polygon_signed_distance(hull, u, v) >= 0).reshape(cam.shape)


# ---------------------------------------------------------------- splatting


@dataclass
class _Footprints:
    index: np.ndarray  # indices into the scene, front to back
    uv: np.ndarray
    depth: np.ndarray
    conic: np.ndarray  # (a, b, c) of the inverse 2D covariance
    radius: np.ndarray


def _footprints(cam: Camera, scene: GaussianScene) -> _Footprints:
    pc = cam.world_to_camera(scene.means)
    z = pc[:, 2]
    keep = np.flatnonzero(z > 0.01)
    pc, z = pc[keep], z[keep]
    x, y = pc[:, 0], pc[:, 1]
    n = len(keep)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / z**2
    r = quat_to_matrix(scene.rotations[keep])
    m = jac @ cam.R[None] @ r * np.exp(scene.log_scales[keep])[:, None, :]
    cov = m @ np.transpose(m, (0, 2, 1))
    a = cov[:, 0, 0] + DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    uv = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    order = np.lexsort((keep, z))
    return _Footprints(keep[order], uv[order], z[order], conic[order], np.sqrt(-2.0 * POWER_CUTOFF * lam[order]))


def _alphas(fp: _Footprints, opacities: np.ndarray, u: np.ndarray, v: np.ndarray, roi) -> tuple[np.ndarray, np.ndarray]:
    """Per-splat alpha over the pixel list, for splats overlapping ``roi``."""
    r0, r1, c0, c1 = roi
    ux, vy, rad = fp.uv[:, 0], fp.uv[:, 1], fp.radius
    hit = (ux + rad >= c0 - 0.5) & (ux - rad <= c1 - 0.5) & (vy + rad >= r0 - 0.5) & (vy - rad <= r1 - 0.5)
    sel = np.flatnonzero(hit)
    du = u[None, :] - ux[sel, None]
    dv = v[None, :] - vy[sel, None]
    ca, cb, cc = fp.conic[sel, 0:1], fp.conic[sel, 1:2], fp.conic[sel, 2:3]
    power = -0.5 * (ca * du * du + 2 * cb * du * dv + cc * dv * dv)
    alpha = np.minimum(MAX_ALPHA, opacities[fp.index[sel], None] * np.exp(power))
    alpha[power < POWER_CUTOFF] = 0.0
    return sel, alpha


@numba.njit(cache=True)
def _splat_kernel(uv, conic, radius, opac, colors, roi, bg, want_color):
    # Splat-major over each footprint's bounding box. Pixels outside the box
    # fail the power cutoff anyway, so every pixel still sees the same
    # front-to-back sequence as a per-pixel loop over all splats.
    r0, r1, c0, c1 = roi[0], roi[1], roi[2], roi[3]
    h = r1 - r0
    w = c1 - c0
    acc = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for k in range(uv.shape[0]):
        lo_c = max(c0, int(np.ceil(uv[k, 0] - radius[k])))
        hi_c = min(c1 - 1, int(np.floor(uv[k, 0] + radius[k])))
        lo_r = max(r0, int(np.ceil(uv[k, 1] - radius[k])))
        hi_r = min(r1 - 1, int(np.floor(uv[k, 1] + radius[k])))
        for row in range(lo_r, hi_r + 1):
            dv = row - uv[k, 1]
            for col in range(lo_c, hi_c + 1):
                du = col - uv[k, 0]
                power = -0.5 * (conic[k, 0] * du * du + 2.0 * conic[k, 1] * du * dv + conic[k, 2] * dv * dv)
                if power < POWER_CUTOFF:
                    continue
                a = opac[k] * np.exp(power)
                if a > MAX_ALPHA:
                    a = MAX_ALPHA
                i = row - r0
                j = col - c0
                t = trans[i, j]
                if want_color:
                    wgt = a * t
                    acc[i, j, 0] += wgt * colors[k, 0]
                    acc[i, j, 1] += wgt * colors[k, 1]
                    acc[i, j, 2] += wgt * colors[k, 2]
                trans[i, j] = t * (1.0 - a)
    img = np.empty((h, w, 3))
    for i in range(h):
        for j in range(w):
            for c in range(3):
                img[i, j, c] = acc[i, j, c] + trans[i, j] * bg[c]
    return img, trans


def _fast_splat(cam: Camera, scene: GaussianScene, roi, background, want_color: bool):
    roi = tuple(roi or _full_roi(cam))
    bg = np.asarray(background, dtype=np.float64)
    if len(scene):
        fp = _footprints(cam, scene)
        r0, r1, c0, c1 = roi
        ux, vy, rad = fp.uv[:, 0], fp.uv[:, 1], fp.radius
        hit = np.flatnonzero(
            (ux + rad >= c0 - 0.5) & (ux - rad <= c1 - 0.5) & (vy + rad >= r0 - 0.5) & (vy - rad <= r1 - 0.5)
        )
        idx = fp.index[hit]
        uv, conic = np.ascontiguousarray(fp.uv[hit]), np.ascontiguousarray(fp.conic[hit])
        radius = np.ascontiguousarray(fp.radius[hit])
        opac, colors = np.ascontiguousarray(scene.opacities[idx]), np.ascontiguousarray(scene.colors[idx])
    else:
        uv, conic, radius = np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0)
        opac, colors = np.zeros(0), np.zeros((0, 3))
    return _splat_kernel(uv, conic, radius, opac, colors, np.asarray(roi, dtype=np.int64), bg, want_color)


def _full_roi(cam: Camera) -> tuple[int, int, int, int]:
    return 0, cam.height, 0, cam.width


def splat_silhouette(cam: Camera, scene: GaussianScene, roi=None) -> np.ndarray:
    """Accumulated coverage ``1 - prod(1 - alpha_i)`` per pixel."""
    _, trans = _fast_splat(cam, scene, roi, (0.0, 0.0, 0.0), False)
    return 1.0 - trans


@dataclass
class Composite:
    """Front-to-back compositing result with the terms needed for gradients."""

    image: np.ndarray  # (H, W, 3)
    index: np.ndarray  # scene indices of contributing splats, front to back
    alpha: np.ndarray  # (K, P) per-splat alpha
    footprint: np.ndarray  # (K, P) alpha / opacity, the unweighted Gaussian
    transmittance: np.ndarray  # (K, P) transmittance in front of each splat
    final_transmittance: np.ndarray  # (P,)


def composite(cam: Camera, scene: GaussianScene, roi=None, background=(0.0, 0.0, 0.0)) -> Composite:
    roi = roi or _full_roi(cam)
    h, w = roi[1] - roi[0], roi[3] - roi[2]
    bg = np.asarray(background, dtype=np.float64)
    if not len(scene):
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        empty = np.zeros((0, h * w))
        return Composite(img, np.zeros(0, dtype=int), empty, empty, empty, np.ones(h * w))
    fp = _footprints(cam, scene)
    u, v = pixel_grid(cam, roi)
    sel, alpha = _alphas(fp, scene.opacities, u, v, roi)
    index = fp.index[sel]
    keep = 1.0 - alpha
    trans = np.ones_like(alpha)
    if len(alpha) > 1:
        trans[1:] = np.cumprod(keep[:-1], axis=0)
    final = trans[-1] * keep[-1] if len(alpha) else np.ones(h * w)
    weights = alpha * trans
    colors = scene.colors[index]
    img = weights.T @ colors + final[:, None] * bg[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        opac = scene.opacities[index][:, None]
        footprint = np.where(opac > 0, alpha / np.where(opac > 0, opac, 1.0), 0.0)
    return Composite(img.reshape(h, w, 3), index, alpha, footprint, trans, final)


def render_preview(cam: Camera, scene: GaussianScene, roi=None, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Depth-sorted alpha compositing of degree-0 colors, ``(H, W, 3)`` in [0, 1]."""
    img, _ = _fast_splat(cam, scene, roi, background, True)
    return np.clip(img, 0.0, 1.0)


def footprint_roi(cam: Camera, scene: GaussianScene, pad: int = 2) -> tuple[int, int, int, int] | None:
    """Pixel window covering every splat footprint of ``scene``, or None if off-frame."""
    if not len(scene):
        return None
    fp = _footprints(cam, scene)
    if not len(fp.index):
        return None
    lo = fp.uv - fp.radius[:, None]
    hi = fp.uv + fp.radius[:, None]
    c0 = max(0, int(math.floor(lo[:, 0].min())) - pad)
    c1 = min(cam.width, int(math.ceil(hi[:, 0].max())) + pad + 1)
    r0 = max(0, int(math.floor(lo[:, 1].min())) - pad)
    r1 = min(cam.height, int(math.ceil(hi[:, 1].max())) + pad + 1)
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def projected_centroid(cam: Camera, scene: GaussianScene) -> tuple[float, float]:
    """Opacity-weighted mean of the projected splat means in front of the camera."""
    uv, z = project_points(cam, scene.means) if len(scene) else (np.zeros((0, 2)), np.zeros(0))
    visible = z > NEAR
    if not np.any(visible):
        raise NothingVisible("no splat lies in front of the camera")
    w = scene.opacities[visible]
    if w.sum() <= 0:
        w = np.ones_like(w)
    c = (uv[visible] * w[:, None]).sum(axis=0) / w.sum()
    return float(c[0]), float(c[1])


# --------------------------------------------------------------------- io


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of two masks binarized at ``v >= threshold``; two empty masks give 1."""
    a = np.asarray(a) >= threshold
    b = np.asarray(b) >= threshold
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mask_to_png(mask: np.ndarray) -> bytes:
    arr = np.round(255.0 * np.clip(mask, 0.0, 1.0)).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def image_to_png(img: np.ndarray) -> bytes:
    arr = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    buf = io.BytesIO()
    # low zlib effort: these PNGs are mostly request payloads, hashed not stored
    Image.fromarray(arr).save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def png_to_array(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float64) / 255.0


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    arr = np.round(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    out = Image.fromarray(arr).resize((size, size), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


def triangulate(cams: list[Camera], uvs) -> np.ndarray:
    """Linear least-squares (DLT) point from pixel observations in several views."""
    rows = []
    for cam, (u, v) in zip(cams, uvs):
        k = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
        p = k @ np.hstack([cam.R, cam.translation[:, None]])
        rows.append(u * p[2] - p[0])
        rows.append(v * p[2] - p[1])
    a = np.asarray(rows)
    _, _, vt = np.linalg.svd(a)
    x = vt[-1]
    return x[:3] / x[3]
