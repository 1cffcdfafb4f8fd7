"""Initial object placement: scale from a size ratio, rotation from a grid,
translation from per-view target points with a collision penalty."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import oracles
from .gaussians import GaussianScene, merge, transform_scene
from .geometry import DoF, quat_from_azimuth_elevation, quat_to_matrix
from .optim import adam_descent, central_difference
from .render import Camera, image_to_png, look_at, render_preview, resize_image, triangulate

log = logging.getLogger(__name__)

FEEDBACK_CLAMP = (0.5, 2.0)
ROTATION_RENDER_SIZE = 128


class InvalidRatio(ValueError):
    pass


class Underdetermined(ValueError):
    pass


# ---------------------------------------------------------------------- scale


def ar_extent(dof_ar: DoF, mode: str = "max") -> float:
    if mode == "max":
        return float(np.max(dof_ar.scale))
    if mode == "mean":
        return float(np.mean(dof_ar.scale))
    if mode == "geomean":
        return float(np.exp(np.mean(np.log(dof_ar.scale))))
    raise ValueError(f"unknown extent mode {mode!r}")


def init_scale(dof_ar: DoF, lambda_rel: float, mode: str = "max") -> float:
    """Object diameter ``extent(dof_ar) * lambda_rel`` (object has unit diameter)."""
    if not (isinstance(lambda_rel, (int, float)) and math.isfinite(lambda_rel) and lambda_rel > 0):
        raise InvalidRatio(f"lambda_rel must be positive and finite, got {lambda_rel!r}")
    return ar_extent(dof_ar, mode) * float(lambda_rel)


def _feedback_factor(verdict: str, factor: float) -> float:
    if verdict == "accept":
        return 1.0
    # the verdict fixes the direction; the factor only sets the magnitude
    mag = max(factor, 1.0 / factor)
    mag = min(max(mag, FEEDBACK_CLAMP[0]), FEEDBACK_CLAMP[1])
    return mag if verdict == "increase" else 1.0 / mag


def iterative_scale_adjust(
    scene: GaussianScene,
    obj: GaussianScene,
    dof_o: DoF,
    views: list[Camera],
    backend,
    object_prompt: str = "object",
    global_target: str = "scene",
    max_rounds: int = 3,
    primary_view: int = 0,
) -> tuple[DoF, int]:
    """Render, ask for a verdict, rescale; at most ``max_rounds`` queries."""
    cam = views[primary_view]
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        composite = merge(scene, transform_scene(obj, dof_o))
        png = image_to_png(render_preview(cam, composite))
        s = float(dof_o.scale[0])
        verdict, factor = oracles.scale_feedback(backend, object_prompt, global_target, png, s, rounds)
        if verdict == "accept":
            break
        dof_o = dof_o.replace(scale=np.full(3, s * _feedback_factor(verdict, factor)))
    return dof_o, rounds


# ------------------------------------------------------------------- rotation


@dataclass(frozen=True)
class RotationGrid:
    azimuth_step: float = 10.0
    elevation_step: float = 10.0

    def __post_init__(self):
        for step, span in ((self.azimuth_step, 360.0), (self.elevation_step, 180.0)):
            if step <= 0 or abs(span / step - round(span / step)) > 1e-9:
                raise ValueError(f"step {step} does not divide {span}")

    @property
    def n_azimuth(self) -> int:
        return int(round(360.0 / self.azimuth_step))

    @property
    def n_elevation(self) -> int:
        return int(round(180.0 / self.elevation_step))

    def __len__(self) -> int:
        return self.n_azimuth * self.n_elevation

    def angles(self) -> list[tuple[float, float]]:
        """``(azimuth, elevation)`` in degrees, row-major over (elevation, azimuth)."""
        return [
            (ia * self.azimuth_step, ie * self.elevation_step)
            for ie in range(self.n_elevation)
            for ia in range(self.n_azimuth)
        ]

    def quaternion(self, index: int) -> np.ndarray:
        az, el = self.angles()[index]
        return quat_from_azimuth_elevation(az, el)

    def nearest(self, q) -> int:
        """Index of the candidate closest to rotation ``q`` (geodesic)."""
        quats = np.array([quat_from_azimuth_elevation(az, el) for az, el in self.angles()])
        return int(np.argmax(np.abs(quats @ np.asarray(q))))


def object_camera(size: int = ROTATION_RENDER_SIZE) -> Camera:
    """Fixed camera framing a unit-diameter object at the origin."""
    return look_at([0.0, -2.2, 0.9], [0.0, 0.0, 0.0], size, size, fov_deg=40.0)


def rotation_candidates(obj: GaussianScene, grid: RotationGrid, size: int = ROTATION_RENDER_SIZE) -> list[bytes]:
    cam = object_camera(size)
    pngs = []
    for az, el in grid.angles():
        rotated = transform_scene(obj, DoF(rotation=quat_from_azimuth_elevation(az, el)))
        pngs.append(image_to_png(render_preview(cam, rotated)))
    return pngs


def init_rotation(
    scene_image: np.ndarray,
    obj: GaussianScene,
    grid: RotationGrid,
    t_gt: str,
    backend,
    renders: list[bytes] | None = None,
    order: list[int] | None = None,
) -> tuple[np.ndarray, int]:
    """Submit every grid rendering and return the rotation the oracle picks.

    ``order`` permutes submission order; the returned index is always in
    grid order. ``renders`` may carry precomputed candidate PNGs.
    """
    renders = renders if renders is not None else rotation_candidates(obj, grid)
    angles = grid.angles()
    order = list(range(len(grid))) if order is None else list(order)
    if sorted(order) != list(range(len(grid))):
        raise ValueError("order must be a permutation of the grid indices")
    if scene_image.shape[:2] != (ROTATION_RENDER_SIZE, ROTATION_RENDER_SIZE):
        scene_image = resize_image(scene_image, ROTATION_RENDER_SIZE)
    picked = oracles.score_rotation(
        backend, t_gt, image_to_png(scene_image), [renders[i] for i in order], [list(angles[i]) for i in order]
    )
    index = order[picked]
    return grid.quaternion(index), index


# ------------------------------------------------------------------ collision


def collision_loss(o_c, g_ar: GaussianScene, margin: float) -> float:
    """Squared hinge on the Mahalanobis distance from ``o_c`` to each splat."""
    if margin < 0:
        raise ValueError("margin must be non-negative")
    if not len(g_ar):
        return 0.0
    d = np.asarray(o_c, dtype=np.float64)[None, :] - g_ar.means
    r = quat_to_matrix(g_ar.rotations)
    local = np.einsum("nji,nj->ni", r, d) / np.exp(g_ar.log_scales)
    dist = np.linalg.norm(local, axis=1)
    margin_norm = margin / np.exp(g_ar.log_scales.mean(axis=1))
    return float(np.sum(np.maximum(0.0, 1.0 + margin_norm - dist) ** 2))


# ---------------------------------------------------------------- translation


@dataclass
class TranslationFitConfig:
    learning_rate: float = 5e-3
    max_iters: int = 500
    collision_weight: float = 1.0
    collision_margin: float | None = None  # default 0.05 x AR max extent
    min_views: int = 2
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class TranslationFit:
    translation: np.ndarray
    per_view_residuals: dict[int, float]
    collision_final: float
    loss: float
    initial_loss: float
    iters: int
    converged: bool
    history: list[float] = field(default_factory=list)


def _reprojection(base: GaussianScene, t, views, targets):
    """Sum of squared centroid errors and its analytic gradient in ``t``."""
    total = 0.0
    grad = np.zeros(3)
    residuals = {}
    w_all = base.opacities if base.opacities.sum() > 0 else np.ones(len(base))
    for v, target in targets.items():
        cam = views[v]
        pc = (base.means + t) @ cam.R.T + cam.translation
        z = pc[:, 2]
        vis = z > 1e-6
        if not np.any(vis):
            raise Underdetermined(f"object is behind camera {v}")
        w = w_all[vis] / w_all[vis].sum()
        x, y, z = pc[vis, 0], pc[vis, 1], z[vis]
        u = cam.fx * x / z + cam.cx
        vv = cam.fy * y / z + cam.cy
        cu, cv = float(w @ u), float(w @ vv)
        ru, rv = cu - target[0], cv - target[1]
        total += ru * ru + rv * rv
        residuals[v] = math.hypot(ru, rv)
        # d(u, v)/d(camera point), averaged with the centroid weights
        du = np.stack([cam.fx / z, np.zeros_like(z), -cam.fx * x / z**2], axis=1)
        dv = np.stack([np.zeros_like(z), cam.fy / z, -cam.fy * y / z**2], axis=1)
        jac = np.stack([w @ du, w @ dv]) @ cam.R
        grad += 2.0 * (ru * jac[0] + rv * jac[1])
    return total, grad, residuals


def init_translation(
    obj: GaussianScene,
    s_o: float,
    r_o,
    targets: dict[int, tuple[float, float]],
    views: list[Camera],
    g_ar: GaussianScene,
    cfg: TranslationFitConfig | None = None,
    t0=None,
    ref_len: float | None = None,
) -> TranslationFit:
    """Fit the translation putting the projected object centroid on ``targets``."""
    cfg = cfg or TranslationFitConfig()
    if len(targets) < cfg.min_views:
        raise Underdetermined(f"{len(targets)} target views, need {cfg.min_views}")
    base = transform_scene(obj, DoF(scale=s_o, rotation=r_o))
    centroid0 = base.weighted_centroid()
    if ref_len is None:
        ref_len = float(s_o)
    margin = cfg.collision_margin if cfg.collision_margin is not None else 0.05 * ref_len
    if t0 is None:
        # start where the targets triangulate to; descent then removes the
        # gap between projected-centroid and centroid-projection
        order = sorted(targets)
        t_start = triangulate([views[v] for v in order], [targets[v] for v in order]) - centroid0
    else:
        t_start = np.asarray(t0, dtype=np.float64)
    h = 1e-4

    def collision(x):
        return cfg.collision_weight * collision_loss(centroid0 + x * ref_len, g_ar, margin)

    def loss(x):
        f, _, _ = _reprojection(base, x * ref_len, views, targets)
        return f + (collision(x) if cfg.collision_weight else 0.0)

    def loss_and_grad(x):
        f, g, _ = _reprojection(base, x * ref_len, views, targets)
        g = g * ref_len
        if cfg.collision_weight and len(g_ar):
            f += collision(x)
            g = g + central_difference(collision, x, h)
        return f, g

    res = adam_descent(loss_and_grad, loss, t_start / ref_len, cfg.learning_rate, cfg.max_iters, cfg.convergence_tol)
    if not res.converged:
        log.warning("translation fit stopped at max_iters with loss %.6g", res.loss)
    t = res.x * ref_len
    _, _, residuals = _reprojection(base, t, views, targets)
    coll = collision_loss(centroid0 + t, g_ar, margin) if len(g_ar) else 0.0
    return TranslationFit(t, residuals, coll, res.loss, res.initial_loss, res.iters, res.converged, res.history)


def collect_targets(backend, scene: GaussianScene, views: list[Camera], local_target: str) -> dict[int, tuple[float, float]]:
    targets = {}
    for i, cam in enumerate(views):
        png = image_to_png(render_preview(cam, scene))
        points = oracles.point_target(backend, local_target, png, cam.width, cam.height, view=i)
        if points:
            targets[i] = (float(points[0][0]), float(points[0][1]))
    return targets
