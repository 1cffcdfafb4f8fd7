"""Attachment-region stage: per-view detection masks, box fit, region extraction."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from . import oracles
from .gaussians import GaussianScene, extract_region
from .geometry import Box3, DoF, quat_normalize
from .optim import adam_descent, central_difference
from .render import (
    NEAR,
    Camera,
    FullyBehindCamera,
    _convex_hull,
    _polygon_sd_kernel,
    box_soft_mask,
    image_to_png,
    mask_iou,
    project_points,
    render_preview,
    triangulate,
)

log = logging.getLogger(__name__)

BCE_EPS = 1e-6


class DetectionMiss(RuntimeError):
    pass


class Degenerate(ValueError):
    pass


class EmptyRegion(UserWarning):
    pass


@dataclass
class RegionFitConfig:
    learning_rate: float = 5e-3
    max_iters: int = 500
    sharpness: float = 4.0
    convergence_tol: float = 1e-5
    fd_step: float = 1e-4
    init: DoF | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class RegionFit:
    dof: DoF
    initial_loss: float
    final_loss: float
    iters: int
    converged: bool
    per_view_iou: list[float] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "dof_ar": self.dof.to_dict(),
            "per_view_iou": self.per_view_iou,
            "iters": self.iters,
            "final_loss": self.final_loss,
            "initial_loss": self.initial_loss,
            "converged": self.converged,
        }


def box_mask(width: int, height: int, box) -> np.ndarray:
    """Closed pixel rectangle ``(u0, v0, u1, v1)`` rasterized as a binary mask."""
    mask = np.zeros((height, width))
    u0, v0, u1, v1 = box
    mask[v0 : v1 + 1, u0 : u1 + 1] = 1.0
    return mask


def detect_attachment_masks(views: list[Camera], scene: GaussianScene, t_ar: str, backend) -> list[np.ndarray | None]:
    """Ask the detector for ``t_ar`` in every view; ``None`` marks a miss."""
    if len(views) < 2:
        raise ValueError("need at least two views")
    masks: list[np.ndarray | None] = []
    for i, cam in enumerate(views):
        png = image_to_png(render_preview(cam, scene))
        box = oracles.detect_region(backend, t_ar, png, cam.width, cam.height, view=i)
        masks.append(None if box is None else box_mask(cam.width, cam.height, box))
    misses = sum(m is None for m in masks)
    if misses * 2 >= len(views):
        raise DetectionMiss(f"'{t_ar}' not detected in {misses} of {len(views)} views")
    return masks


def bce(pred: np.ndarray, target: np.ndarray) -> float:
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p)))


class _BoxParams:
    """Box DoF <-> optimizer vector ``[log s (3), quat (4), t / ref (3)]``."""

    def __init__(self, ref_len: float):
        self.ref = ref_len

    def pack(self, dof: DoF) -> np.ndarray:
        return np.concatenate([np.log(dof.scale), dof.rotation, dof.translation / self.ref])

    def unpack(self, x: np.ndarray) -> DoF:
        return DoF(scale=np.exp(x[:3]), rotation=x[3:7], translation=x[7:] * self.ref)

    @staticmethod
    def project(x: np.ndarray) -> np.ndarray:
        x = x.copy()
        x[3:7] = quat_normalize(x[3:7])
        return x


@numba.njit(cache=True)
def _window_bce_sum(hull, mask, sharpness, r0, r1, c0, c1, eps):
    h = r1 - r0
    w = c1 - c0
    u = np.empty(h * w)
    v = np.empty(h * w)
    k = 0
    for i in range(r0, r1):
        for j in range(c0, c1):
            u[k] = j
            v[k] = i
            k += 1
    sd = _polygon_sd_kernel(hull, u, v)
    # where the sigmoid is clipped the terms are constants
    cut = np.log(1.0 / eps - 1.0)
    lo_in, lo_out = -np.log(eps), -np.log1p(-eps)
    total = 0.0
    k = 0
    for i in range(r0, r1):
        for j in range(c0, c1):
            m = mask[i, j]
            x = sharpness * sd[k]
            if x <= -cut:
                total += m * lo_in + (1.0 - m) * lo_out
            elif x >= cut:
                total += m * lo_out + (1.0 - m) * lo_in
            else:
                p = 1.0 / (1.0 + np.exp(-x))
                p = min(max(p, eps), 1.0 - eps)
                total -= m * np.log(p) + (1.0 - m) * np.log1p(-p)
            k += 1
    return total


def _view_bce(cam: Camera, corners: np.ndarray, mask: np.ndarray, sharpness: float) -> float:
    """``bce(box_soft_mask(...), mask)`` evaluated on a window around the hull.

    Far outside the hull the sigmoid is below ``BCE_EPS`` and the clipped
    prediction is constant, so those pixels are summed in closed form.
    """
    uv, z = project_points(cam, corners)
    visible = z > NEAR
    if not np.any(visible):
        raise FullyBehindCamera("no box corner lies in front of the camera")
    hull = _convex_hull(uv[visible])
    margin = math.ceil(math.log(1.0 / BCE_EPS - 1.0) / sharpness) + 1
    lo = np.floor(hull.min(axis=0)) - margin
    hi = np.ceil(hull.max(axis=0)) + margin + 1
    c0, c1 = int(min(max(lo[0], 0), cam.width)), int(min(max(hi[0], 0), cam.width))
    r0, r1 = int(min(max(lo[1], 0), cam.height)), int(min(max(hi[1], 0), cam.height))
    inside = _window_bce_sum(hull, mask, float(sharpness), r0, r1, c0, c1, BCE_EPS) if r1 > r0 and c1 > c0 else 0.0
    ones_out = float(mask.sum()) - (float(mask[r0:r1, c0:c1].sum()) if r1 > r0 and c1 > c0 else 0.0)
    zeros_out = (mask.size - (r1 - r0) * (c1 - c0)) - ones_out
    outside = -ones_out * math.log(BCE_EPS) - zeros_out * math.log1p(-BCE_EPS)
    return (inside + outside) / mask.size


def region_loss(dof: DoF, masks, views, sharpness: float) -> float:
    """Per-pixel mean BCE per view, summed over views in index order."""
    total = 0.0
    corners = Box3(dof).corners
    for mask, cam in zip(masks, views):
        if mask is None:
            continue
        total += _view_bce(cam, corners, np.ascontiguousarray(mask, dtype=np.float64), sharpness)
    return total


def init_from_masks(masks, views, resolution: int = 40) -> DoF:
    """Axis-aligned bounds of the visual hull carved by the masks.

    A cube around the triangulated mask centers is sampled on a grid; a
    sample survives if at least half the views see it and every view that
    sees it has it inside the mask. Views whose mask stays clear of the frame
    border also carve away everything they do not see.
    Falls back to a cube sized from the mask widths if nothing survives.
    """
    cams, centers, sizes, used = [], [], [], []
    for mask, cam in zip(masks, views):
        if mask is None or not mask.any():
            continue
        rows, cols = np.nonzero(mask >= 0.5)
        cams.append(cam)
        used.append(mask >= 0.5)
        centers.append((cols.mean(), rows.mean()))
        sizes.append((np.ptp(cols) + 1) / cam.fx)
    if len(cams) < 2:
        raise Degenerate("need two non-empty masks to initialize")
    center = triangulate(cams, centers)
    depths = [cam.world_to_camera(center)[2] for cam in cams]
    extent = float(np.median([s * d for s, d in zip(sizes, depths)]))
    extent = max(extent, 1e-3)
    axis = np.linspace(-1.5 * extent, 1.5 * extent, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3) + center
    keep = np.ones(len(grid), dtype=bool)
    n_seen = np.zeros(len(grid), dtype=int)
    for cam, mask in zip(cams, used):
        pc = grid @ cam.R.T + cam.translation
        z = np.where(pc[:, 2] > 1e-6, pc[:, 2], np.nan)
        with np.errstate(invalid="ignore"):
            col = np.rint(cam.fx * pc[:, 0] / z + cam.cx)
            row = np.rint(cam.fy * pc[:, 1] / z + cam.cy)
        seen = np.isfinite(z) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        inside = np.zeros(len(grid), dtype=bool)
        inside[seen] = mask[row[seen].astype(int), col[seen].astype(int)]
        if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
            # the region may continue past the frame edge: off-frame samples carry no evidence
            keep &= inside | ~seen
        else:
            keep &= inside
        n_seen += seen
    keep &= n_seen >= max(2, (len(cams) + 1) // 2)
    if not keep.any():
        return DoF(scale=np.full(3, extent / np.sqrt(2.0)), translation=center)
    lo, hi = grid[keep].min(axis=0), grid[keep].max(axis=0)
    step = axis[1] - axis[0]
    return DoF(scale=np.maximum(hi - lo, step), translation=0.5 * (lo + hi))


def default_init(scene: GaussianScene) -> DoF:
    lo, hi = scene.bounds()
    return DoF(scale=np.full(3, 0.5 * float(np.linalg.norm(hi - lo))), translation=scene.weighted_centroid())


def fit_region_dof(masks, views: list[Camera], cfg: RegionFitConfig | None = None, init: DoF | None = None) -> RegionFit:
    """Fit a box whose soft projection matches the detection masks in BCE."""
    cfg = cfg or RegionFitConfig()
    if len(masks) != len(views) or len(views) < 2:
        raise ValueError("masks and views must align and cover at least two views")
    used = [m for m in masks if m is not None]
    if not used or not any(np.any(m >= 0.5) for m in used):
        raise Degenerate("all masks are empty")
    init = init or cfg.init or init_from_masks(masks, views)
    params = _BoxParams(float(np.max(init.scale)))
    h = np.full(10, cfg.fd_step)

    def loss(x):
        return region_loss(params.unpack(params.project(x)), masks, views, cfg.sharpness)

    def loss_and_grad(x):
        return loss(x), central_difference(loss, x, h)

    res = adam_descent(
        loss_and_grad, loss, params.pack(init), cfg.learning_rate, cfg.max_iters, cfg.convergence_tol,
        project=params.project,
    )
    if not res.converged:
        log.warning("region fit did not converge in %d iterations (loss %.6g)", res.iters, res.loss)
    dof = params.unpack(res.x)
    box = Box3(dof)
    ious = [
        float(mask_iou(box_soft_mask(cam, box, cfg.sharpness), m)) if m is not None else float("nan")
        for m, cam in zip(masks, views)
    ]
    return RegionFit(dof, res.initial_loss, res.loss, res.iters, res.converged, ious, res.history)


def extract_attachment(scene: GaussianScene, dof_ar: DoF) -> tuple[GaussianScene, GaussianScene]:
    region, rest = extract_region(scene, Box3(dof_ar))
    if not len(region):
        warnings.warn("attachment box selects no splats", EmptyRegion, stacklevel=2)
    return region, rest
