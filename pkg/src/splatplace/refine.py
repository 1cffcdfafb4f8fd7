"""Spatially-aware score-distillation refinement of an object's DoF.

The denoiser is abstracted as a guidance backend returning predicted noise
and per-token attention maps. Gradients of the rendered image with respect
to the 8 DoF parameters (log scale, quaternion, translation) come from
central differences; only the object's screen footprint is re-rendered.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .gaussians import GaussianScene, merge, transform_scene
from .geometry import Box3, DoF, compose_dof, quat_normalize
from .oracles import ParsedInsertion
from .render import Camera, box_hard_mask, footprint_roi, render_preview

N_PARAMS = 8


class NonFinite(FloatingPointError):
    pass


class EmptyRegion(ValueError):
    pass


# ------------------------------------------------------------------- protocol


@dataclass
class GuidanceQuery:
    noisy_image: np.ndarray
    prompt: str
    emphasized_tokens: list[str]
    timestep: float
    noise: np.ndarray
    pose: Camera | None = None

    def __post_init__(self):
        if not 0.0 < self.timestep < 1.0:
            raise ValueError("timestep must lie in (0, 1)")
        if self.noise.shape != self.noisy_image.shape:
            raise ValueError("noise and image shapes differ")


@dataclass
class GuidanceResponse:
    predicted_noise: np.ndarray
    attention_maps: dict[str, np.ndarray] = field(default_factory=dict)


class GuidanceBackend(Protocol):
    def guide(self, query: GuidanceQuery) -> GuidanceResponse: ...

    def attention(self, image: np.ndarray, prompt: str, tokens: list[str], pose: Camera | None) -> dict: ...


def add_noise(x: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    """Variance-preserving mix with ``alpha_bar(t) = 1 - t``."""
    return math.sqrt(1.0 - t) * x + math.sqrt(t) * noise


def recover_clean(x_t: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    return (x_t - math.sqrt(t) * noise) / math.sqrt(1.0 - t)


def normalize_attention(raw: np.ndarray, amplification: float = 1.0) -> np.ndarray:
    a = np.maximum(raw, 0.0) * amplification
    return a / max(1.0, float(a.max(initial=0.0)))


class QuadraticGuidance:
    """Synthetic denoiser whose residual is ``gain * (x - target(pose))``.

    Score distillation against it is gradient descent on the image-space
    squared error to the target renders, so the optimum is known. Attention
    marks where the image departs from the per-pose background render;
    emphasized tokens are amplified before normalization.
    """

    def __init__(
        self,
        targets: dict[Camera, np.ndarray],
        backgrounds: dict[Camera, np.ndarray] | None = None,
        gain: float = 1.0,
        amplification: float = 2.0,
        attention_sharpness: float = 40.0,
    ):
        self.targets = targets
        self.backgrounds = backgrounds or {}
        self.gain = gain
        self.amplification = amplification
        self.attention_sharpness = attention_sharpness
        self.calls = 0

    def attention(self, image, prompt, tokens, pose) -> dict:
        bg = self.backgrounds.get(pose)
        if bg is None:
            bg = np.zeros_like(image)
        raw = 1.0 - np.exp(-self.attention_sharpness * np.sum((image - bg) ** 2, axis=-1))
        return {tok: normalize_attention(raw, self.amplification) for tok in tokens}

    def guide(self, query: GuidanceQuery) -> GuidanceResponse:
        self.calls += 1
        x = recover_clean(query.noisy_image, query.noise, query.timestep)
        target = self.targets[query.pose]
        eps_hat = query.noise + self.gain * (x - target)
        return GuidanceResponse(eps_hat, self.attention(x, query.prompt, query.emphasized_tokens, query.pose))


def placement_guidance(
    scene: GaussianScene, obj: GaussianScene, target: DoF, views: list[Camera], gain: float = 3.0,
    amplification: float = 2.0, background=(0.0, 0.0, 0.0),
) -> QuadraticGuidance:
    """Quadratic backend whose optimum is ``obj`` placed at ``target``."""
    placed = merge(scene, transform_scene(obj, target))
    targets = {cam: render_preview(cam, placed, None, background) for cam in views}
    backgrounds = {cam: render_preview(cam, scene, None, background) for cam in views}
    return QuadraticGuidance(targets, backgrounds, gain=gain, amplification=amplification)


class FixedGuidance:
    """Returns the caller's noise unchanged plus fixed attention maps."""

    def __init__(self, attention_maps: dict[str, np.ndarray] | None = None):
        self.maps = attention_maps or {}
        self.calls = 0

    def attention(self, image, prompt, tokens, pose) -> dict:
        return {tok: self.maps.get(tok, np.zeros(image.shape[:2])) for tok in tokens}

    def guide(self, query: GuidanceQuery) -> GuidanceResponse:
        self.calls += 1
        return GuidanceResponse(query.noise.copy(), self.attention(query.noisy_image, query.prompt, query.emphasized_tokens, query.pose))


# ---------------------------------------------------------------------- losses


def spatial_loss(global_term: float, local_term: float, beta: float) -> float:
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    return beta * global_term + (1.0 - beta) * local_term


def beta_schedule(step: int, steps: int) -> float:
    """Linear 0 -> 1 over ``steps``; a single step uses 0."""
    if steps <= 1:
        return 0.0
    return step / (steps - 1)


@dataclass
class LocRegion:
    """Per-view inside masks ``S``; the complement is everything else."""

    masks: list[np.ndarray]

    def complement(self, view: int) -> np.ndarray:
        return ~self.masks[view]


def loc_loss(attn: np.ndarray, inside: np.ndarray, lam: float) -> float:
    inside = np.asarray(inside, dtype=bool)
    if attn.shape != inside.shape:
        raise ValueError("attention and region shapes differ")
    if not inside.any():
        raise EmptyRegion("localization region has no pixels")
    return float((1.0 - attn[inside].max()) + lam * np.sum(attn[~inside] ** 2))


def object_box(obj: GaussianScene, dof: DoF, sigmas: float = 2.0) -> Box3:
    """World box tightly enclosing ``obj`` placed by ``dof``."""
    lo, hi = obj.bounds()
    pad = sigmas * float(np.exp(obj.log_scales).max())
    local = Box3.from_bounds(lo - pad, hi + pad)
    return Box3(compose_dof(dof, local.dof))


def build_loc_region(obj: GaussianScene, dof_init: DoF, views: list[Camera]) -> LocRegion:
    box = object_box(obj, dof_init)
    return LocRegion([box_hard_mask(cam, box) for cam in views])


# -------------------------------------------------------------------- config


@dataclass
class SsdsConfig:
    lr: float = 5e-4
    t_range: tuple[float, float] = (0.02, 0.2)
    steps: int = 400
    lambda_loc: float = 0.1
    loc_weight: float = 1.0
    weighting: Callable[[float], float] = field(default=lambda t: 1.0)
    views_per_step: int = 1
    fd_step: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.t_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError("timestep range must lie inside (0, 1)")
        if self.lambda_loc < 0:
            raise ValueError("lambda_loc must be non-negative")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "t_range": list(self.t_range), "steps": self.steps,
            "lambda_loc": self.lambda_loc, "loc_weight": self.loc_weight,
            "views_per_step": self.views_per_step, "fd_step": self.fd_step, "seed": self.seed,
        }


class DofParams:
    """DoF <-> ``[log s, qw, qx, qy, qz, tx, ty, tz] / ref`` (isotropic scale)."""

    def __init__(self, ref_len: float):
        self.ref = ref_len

    def pack(self, dof: DoF) -> np.ndarray:
        return np.concatenate([[math.log(dof.scale[0])], dof.rotation, dof.translation / self.ref])

    def unpack(self, x: np.ndarray) -> DoF:
        return DoF(scale=math.exp(x[0]), rotation=quat_normalize(x[1:5]), translation=x[5:] * self.ref)


@dataclass
class RefineProblem:
    scene: GaussianScene
    obj: GaussianScene
    views: list[Camera]
    parsed: ParsedInsertion
    backend: GuidanceBackend
    cfg: SsdsConfig
    region: LocRegion
    params: DofParams
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def queries(self) -> list[tuple[str, str, list[str]]]:
        p = self.parsed
        return [("global", p.global_target, [p.interaction_word]), ("local", p.local_target, [p.spatial_word])]

    def render(self, dof: DoF, cam: Camera, roi=None) -> np.ndarray:
        placed = merge(self.scene, transform_scene(self.obj, dof))
        return render_preview(cam, placed, roi, self.background)


def _loc_value(problem: RefineProblem, maps: dict, tokens: list[str], view: int) -> float:
    inside = problem.region.masks[view]
    return sum(loc_loss(maps[tok], inside, problem.cfg.lambda_loc) for tok in tokens)


def ssds_step(problem: RefineProblem, state: DoF, step: int, rng: np.random.Generator) -> tuple[DoF, dict]:
    """One score-distillation update of ``state``; returns the new DoF and diagnostics."""
    cfg = problem.cfg
    x0 = problem.params.pack(state)
    beta = beta_schedule(step, cfg.steps)
    grad = np.zeros(N_PARAMS)
    diag = {"step": step, "beta": beta}
    losses = {"global": 0.0, "local": 0.0}
    loc_total = {"global": 0.0, "local": 0.0}
    n_views = len(problem.views)
    for k in range(cfg.views_per_step):
        view = (step * cfg.views_per_step + k) % n_views
        cam = problem.views[view]
        t = float(rng.uniform(*cfg.t_range))
        noise = rng.standard_normal((cam.height, cam.width, 3))
        x = problem.render(state, cam)
        x_t = add_noise(x, noise, t)
        w = cfg.weighting(t)
        diag.setdefault("t", t)

        roi = footprint_roi(cam, transform_scene(problem.obj, state), pad=3)
        perturbed = []
        for j in range(N_PARAMS):
            pair = []
            for sign in (1.0, -1.0):
                xj = x0.copy()
                xj[j] += sign * cfg.fd_step
                dof_j = problem.params.unpack(xj)
                img = x.copy()
                if roi is not None:
                    r0, r1, c0, c1 = roi
                    img[r0:r1, c0:c1] = problem.render(dof_j, cam, roi)
                pair.append(img)
            perturbed.append(pair)

        for name, prompt, tokens in problem.queries:
            q = GuidanceQuery(x_t, prompt, tokens, t, noise, cam)
            resp = problem.backend.guide(q)
            residual = w * (resp.predicted_noise - noise)
            if not np.all(np.isfinite(residual)):
                raise NonFinite(f"non-finite guidance residual at step {step}")
            g = np.array([np.sum(residual * (xp - xm)) for xp, xm in perturbed]) / (2.0 * cfg.fd_step)
            losses[name] += float(np.mean(residual**2))
            if cfg.loc_weight:
                loc_total[name] += _loc_value(problem, resp.attention_maps, tokens, view)
                g_loc = np.zeros(N_PARAMS)
                for j, (xp, xm) in enumerate(perturbed):
                    lp = _loc_value(problem, problem.backend.attention(xp, prompt, tokens, cam), tokens, view)
                    lm = _loc_value(problem, problem.backend.attention(xm, prompt, tokens, cam), tokens, view)
                    g_loc[j] = (lp - lm) / (2.0 * cfg.fd_step)
                g = g + cfg.loc_weight * g_loc
            grad += (beta if name == "global" else 1.0 - beta) * g
    grad /= cfg.views_per_step
    if not np.all(np.isfinite(grad)):
        raise NonFinite(f"non-finite gradient at step {step}")
    x_new = x0 - cfg.lr * grad
    new_state = problem.params.unpack(x_new)
    diag.update(
        loss_global=losses["global"] / cfg.views_per_step,
        loss_local=losses["local"] / cfg.views_per_step,
        loss_loc=spatial_loss(loc_total["global"], loc_total["local"], beta) / cfg.views_per_step,
        grad_norm=float(np.linalg.norm(grad)),
        grad=grad.copy(),
    )
    diag.update({f"p{j}": float(v) for j, v in enumerate(problem.params.pack(new_state))})
    return new_state, diag


@dataclass
class RefineResult:
    dof: DoF
    diagnostics: list[dict]

    def write_csv(self, path) -> None:
        if not self.diagnostics:
            return
        fields = ["step", "t", "beta", "loss_global", "loss_local", "loss_loc"] + [f"p{j}" for j in range(N_PARAMS)]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            for row in self.diagnostics:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def refine_dof(
    scene: GaussianScene,
    obj: GaussianScene,
    dof_init: DoF,
    parsed: ParsedInsertion,
    views: list[Camera],
    backend: GuidanceBackend,
    cfg: SsdsConfig | None = None,
    background=(0.0, 0.0, 0.0),
) -> RefineResult:
    cfg = cfg or SsdsConfig()
    problem = RefineProblem(
        scene=scene, obj=obj, views=views, parsed=parsed, backend=backend, cfg=cfg,
        region=build_loc_region(obj, dof_init, views), params=DofParams(float(dof_init.scale[0])),
        background=tuple(background),
    )
    rng = np.random.default_rng(cfg.seed)
    state = dof_init
    diagnostics = []
    for step in range(cfg.steps):
        state, diag = ssds_step(problem, state, step, rng)
        diagnostics.append(diag)
    return RefineResult(state, diagnostics)
