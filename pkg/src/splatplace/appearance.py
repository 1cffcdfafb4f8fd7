"""Appearance refinement of the inserted object from a reference image.

Builds a view-balanced training set (rendered ring views plus repeated
reference samples), hands it to a trainable guidance backend and then
distills the backend into the object's colors and opacities. Geometry is
never modified.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import expit, logit

from . import oracles
from .gaussians import SH_C0, GaussianScene, sh_to_rgb
from .refine import GuidanceQuery, GuidanceResponse, NonFinite, add_noise, recover_clean
from .render import Camera, Composite, composite, footprint_roi, image_to_png, orbit_cameras, render_preview, resize_image

OPACITY_FLOOR = 1e-4


class RatioTooLow(ValueError):
    pass


@dataclass
class AppearanceConfig:
    ratio: float = 3.0
    n_views: int = 12
    t_range_start: tuple[float, float] = (0.02, 0.5)
    t_range_end: tuple[float, float] = (0.02, 0.25)
    subject_token: str = "<token>"
    steps: int = 300
    lr: float = 0.05
    image_size: int = 64
    ring_elevation_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.ratio < 2:
            raise RatioTooLow(f"ratio {self.ratio} cannot guarantee more references than rendered views")

    @property
    def n_references(self) -> int:
        return int(round(self.ratio * self.n_views))

    def upper_timestep(self, step: int) -> float:
        hi0, hi1 = self.t_range_start[1], self.t_range_end[1]
        if self.steps <= 1:
            return hi0
        return hi0 + (hi1 - hi0) * step / (self.steps - 1)

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio, "n_views": self.n_views, "t_range_start": list(self.t_range_start),
            "t_range_end": list(self.t_range_end), "subject_token": self.subject_token, "steps": self.steps,
            "lr": self.lr, "image_size": self.image_size, "ring_elevation_deg": self.ring_elevation_deg,
            "seed": self.seed,
        }


@dataclass
class RefEntry:
    image: np.ndarray
    pose: Camera
    is_reference: bool


@dataclass
class RefDataset:
    entries: list[RefEntry]
    n_rendered: int
    n_references: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def reference_fraction(self) -> float:
        return self.n_references / len(self.entries)

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(np.ascontiguousarray(e.image).tobytes())
            h.update(repr(e.pose.key()).encode())
            h.update(b"1" if e.is_reference else b"0")
        return h.hexdigest()


class TrainableBackend(Protocol):
    def fit(self, dataset: RefDataset, subject_prompt: str) -> None: ...

    def guide(self, query: GuidanceQuery) -> GuidanceResponse: ...


class ToyAppearanceBackend:
    """Fits a per-pose target as the frequency-weighted mean dataset image.

    That is the minimizer of the squared denoising objective for a model that
    can only memorize per pose; guidance then pulls renders toward it.
    """

    def __init__(self, gain: float = 1.0):
        self.gain = gain
        self.targets: dict[Camera, np.ndarray] = {}
        self.fitted_digest: str | None = None
        self.prompt: str | None = None
        self.fit_calls = 0

    def fit(self, dataset: RefDataset, subject_prompt: str) -> None:
        digest = dataset.digest()
        if digest == self.fitted_digest and subject_prompt == self.prompt:
            return
        self.fit_calls += 1
        sums: dict[Camera, np.ndarray] = {}
        counts: dict[Camera, int] = {}
        for e in dataset.entries:
            sums[e.pose] = sums.get(e.pose, 0.0) + e.image
            counts[e.pose] = counts.get(e.pose, 0) + 1
        self.targets = {pose: sums[pose] / counts[pose] for pose in sums}
        self.fitted_digest = digest
        self.prompt = subject_prompt

    def guide(self, query: GuidanceQuery) -> GuidanceResponse:
        x = recover_clean(query.noisy_image, query.noise, query.timestep)
        return GuidanceResponse(query.noise + self.gain * (x - self.targets[query.pose]))


class ZeroResidualBackend:
    def fit(self, dataset, subject_prompt) -> None:
        pass

    def guide(self, query: GuidanceQuery) -> GuidanceResponse:
        return GuidanceResponse(query.noise.copy())


# ------------------------------------------------------------------ reference


def appearance_ring(obj: GaussianScene, cfg: AppearanceConfig) -> list[Camera]:
    center = obj.weighted_centroid()
    radius = 2.2 * max(obj.diameter(), 1e-6)
    return orbit_cameras(
        center, radius, cfg.n_views, elevation_deg=cfg.ring_elevation_deg,
        width=cfg.image_size, height=cfg.image_size, fov_deg=40.0,
    )


def estimate_reference_pose(obj: GaussianScene, i_o: np.ndarray, views: list[Camera], backend) -> Camera:
    """View whose render embeds closest (cosine) to the reference image."""
    if len(views) < 2:
        raise ValueError("need at least two candidate views")
    ref = oracles.embed_image(backend, image_to_png(i_o))
    ref = ref / np.linalg.norm(ref)
    best, best_sim = 0, -np.inf
    for i, cam in enumerate(views):
        emb = oracles.embed_image(backend, image_to_png(render_preview(cam, obj)), dim=len(ref))
        sim = float(emb @ ref / np.linalg.norm(emb))
        # ties within 1e-12 keep the lower index
        if sim > best_sim + 1e-12:
            best, best_sim = i, sim
    return views[best]


def build_ref_dataset(obj: GaussianScene, i_o: np.ndarray, p_star: Camera, cfg: AppearanceConfig,
                      ring: list[Camera] | None = None) -> RefDataset:
    m, n = cfg.n_references, cfg.n_views
    if m <= n:
        raise RatioTooLow(f"M={m} must exceed N={n}")
    ring = ring if ring is not None else appearance_ring(obj, cfg)
    if i_o.shape[:2] != p_star.shape:
        i_o = resize_image(i_o, p_star.width)
    entries = [RefEntry(render_preview(cam, obj), cam, False) for cam in ring]
    entries += [RefEntry(i_o, p_star, True) for _ in range(m)]
    return RefDataset(entries, n, m)


_POSTMODIFIERS = {"with", "on", "in", "at", "from", "that", "which", "under", "over", "near", "for", "wearing", "holding"}


def format_subject_prompt(t_o: str, token: str) -> str:
    """Insert ``token`` before the head noun: ``"a dog" -> "a <token> dog"``."""
    if not t_o.strip():
        raise ValueError("object prompt must be non-empty")
    if not token:
        return t_o
    words = t_o.split()
    end = len(words)
    for i, w in enumerate(words[1:], start=1):
        if re.sub(r"\W", "", w.lower()) in _POSTMODIFIERS:
            end = i
            break
    head = end - 1
    return " ".join(words[:head] + [token] + words[head:])


# ----------------------------------------------------------------- distillation


def _appearance_grads(obj: GaussianScene, comp: Composite, residual: np.ndarray, background) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<residual, render>`` w.r.t. DC SH coefficients and opacity logits.

    ``residual`` covers the same pixels as ``comp``.
    """
    n = len(obj)
    g_dc = np.zeros((n, 3))
    g_logit = np.zeros(n)
    if not len(comp.index):
        return g_dc, g_logit
    r = residual.reshape(-1, 3)
    idx = comp.index
    weights = comp.alpha * comp.transmittance  # (K, P)
    rgb = sh_to_rgb(obj.sh[idx, 0, :])
    unclipped = ((rgb > 0.0) & (rgb < 1.0)).astype(np.float64)
    colors = np.clip(rgb, 0.0, 1.0)
    g_color = weights @ r  # (K, 3)
    np.add.at(g_dc, idx, g_color * unclipped * SH_C0)

    contrib = weights[:, :, None] * colors[:, None, :]  # (K, P, 3)
    after = contrib.sum(axis=0)[None] - np.cumsum(contrib, axis=0)
    bg = np.asarray(background, dtype=np.float64)
    behind = after + comp.final_transmittance[None, :, None] * bg[None, None, :]
    one_minus = np.maximum(1.0 - comp.alpha, 1e-6)[:, :, None]
    dx_da = colors[:, None, :] * comp.transmittance[:, :, None] - behind / one_minus
    active = (comp.alpha < 0.99).astype(np.float64)  # alpha clamp has zero slope
    g_alpha = np.einsum("kpc,pc->kp", dx_da, r) * active
    g_opac = (g_alpha * comp.footprint).sum(axis=1)
    o = obj.opacities[idx]
    np.add.at(g_logit, idx, g_opac * o * (1.0 - o))
    return g_dc, g_logit


def refine_appearance(
    obj: GaussianScene,
    dataset: RefDataset,
    backend: TrainableBackend,
    cfg: AppearanceConfig,
    subject_prompt: str = "a <token> object",
    background=(0.0, 0.0, 0.0),
) -> GaussianScene:
    """Fit the backend on ``dataset`` then distill it into colors/opacities."""
    backend.fit(dataset, subject_prompt)
    rng = np.random.default_rng(cfg.seed)
    sh = np.array(obj.sh)
    logits = logit(np.clip(np.array(obj.opacities), OPACITY_FLOOR, 1.0 - OPACITY_FLOOR))
    current = obj
    for step in range(cfg.steps):
        entry = dataset.entries[int(rng.integers(len(dataset)))]
        cam = entry.pose
        t = float(rng.uniform(cfg.t_range_end[0], cfg.upper_timestep(step)))
        noise = rng.standard_normal((cam.height, cam.width, 3))
        roi = footprint_roi(cam, current)
        if roi is None:
            continue
        comp = composite(cam, current, roi=roi, background=background)
        x = np.empty((cam.height, cam.width, 3))
        x[...] = background
        x[roi[0] : roi[1], roi[2] : roi[3]] = comp.image
        resp = backend.guide(GuidanceQuery(add_noise(x, noise, t), subject_prompt, [], t, noise, cam))
        residual = resp.predicted_noise - noise
        if not np.all(np.isfinite(residual)):
            raise NonFinite(f"non-finite appearance residual at step {step}")
        if not np.any(residual):
            continue
        # pixels outside the footprint do not depend on the object
        g_dc, g_logit = _appearance_grads(current, comp, residual[roi[0] : roi[1], roi[2] : roi[3]], background)
        sh[:, 0, :] -= cfg.lr * g_dc
        logits -= cfg.lr * g_logit
        if not (np.all(np.isfinite(sh)) and np.all(np.isfinite(logits))):
            raise NonFinite(f"non-finite appearance parameters at step {step}")
        current = obj.replace(sh=sh.copy(), opacities=expit(logits))
    return current
