"""Synthetic insertion cases with known placements, a perfect oracle, and metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import AppearanceConfig, appearance_ring
from .gaussians import GaussianScene, load_ply, merge, normalize_object, rgb_to_sh, save_ply, synth_primitive, transform_scene
from .geometry import Box3, DoF, quat_angle_deg, quat_from_azimuth_elevation
from .oracles import OracleRequest, ParsedInsertion, RecordingBackend, Transcript, canonical_json
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .render import (
    Camera,
    NothingVisible,
    image_to_png,
    mask_iou,
    orbit_cameras,
    png_to_array,
    project_points,
    projected_centroid,
    render_preview,
    resize_image,
    splat_silhouette,
)

OBJECT_NAMES = {"sphere": "ball", "box": "crate", "two-lobe": "gourd"}
TABLE_TOP = 0.75
EMBED_SIZE = 8
# Iteration budgets for benchmark runs. Refinement keeps its full 400 steps;
# the box fit and appearance stage are capped to bound wall time, since
# neither changes where the object ends up by much.
BENCHMARK_BUDGET = {"region": 200, "refine": 400, "appearance": 100}


@dataclass
class BenchmarkCase:
    index: int
    seed: int
    scene: GaussianScene
    obj: GaussianScene  # unit diameter, centered; colors deliberately washed out
    views: list[Camera]
    gt_dof: DoF
    gt_ar: DoF
    n_ar: int
    parsed: ParsedInsertion
    instruction: str
    reference_image: np.ndarray  # true-colored object at ``reference_view`` of the appearance ring
    reference_view: int

    @property
    def name(self) -> str:
        return f"case_{self.index:03d}"

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.scene.means, self.scene.sh, self.obj.means, self.obj.sh, self.reference_image):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(canonical_json({"gt": self.gt_dof.to_dict(), "ar": self.gt_ar.to_dict()}).encode())
        h.update(canonical_json([c.to_dict() for c in self.views]).encode())
        return h.hexdigest()

    def placed(self, dof: DoF | None = None) -> GaussianScene:
        return transform_scene(self.obj, dof or self.gt_dof)

    def oracle(self, point_noise_px: float = 0.0, box_noise_px: float = 0.0, seed: int = 0) -> "GroundTruthOracle":
        return GroundTruthOracle(self, point_noise_px, box_noise_px, seed)

    def pipeline_dict(self, steps: dict | None = None) -> dict:
        """Pipeline config (relative paths) for this case once written to disk.

        ``steps`` overrides the iteration budgets in :data:`BENCHMARK_BUDGET`.
        """
        steps = {**BENCHMARK_BUDGET, **(steps or {})}
        return {
            "scene": "scene.ply",
            "object": "object.ply",
            "views": "views.json",
            "reference_image": "reference.png",
            "instruction": self.instruction,
            "backend": "fixture:fixture.json",
            "mode": "insert",
            "seed": self.seed,
            "out": "run",
            "region": {"max_iters": steps["region"]},
            "refine": {
                "steps": steps["refine"],
                "guidance": {"kind": "quadratic", "target_dof": self.gt_dof.to_dict(), "gain": 3.0},
            },
            "appearance": {"steps": steps["appearance"]},
        }

    def write(self, directory, steps: dict | None = None) -> Path:
        """Write scene, object, views, reference image and config; return the config path."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_ply(self.scene, d / "scene.ply")
        save_ply(self.obj, d / "object.ply")
        (d / "views.json").write_text(json.dumps([c.to_dict() for c in self.views], indent=1))
        (d / "reference.png").write_bytes(image_to_png(self.reference_image))
        truth = {"gt_dof": self.gt_dof.to_dict(), "gt_ar": self.gt_ar.to_dict(), "n_ar": self.n_ar,
                 "reference_view": self.reference_view, "parsed": self.parsed.to_dict()}
        (d / "ground_truth.json").write_text(json.dumps(truth, indent=2))
        path = d / "config.json"
        path.write_text(json.dumps(self.pipeline_dict(steps), indent=2))
        return path


# ------------------------------------------------------------------ generation


def _roundtrip(scene: GaussianScene) -> GaussianScene:
    """Quantize exactly as a PLY save/load would, so memory matches disk."""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.ply"
        save_ply(scene, path)
        return load_ply(path)


def _slab(rng, lo, hi, n: int, color) -> GaussianScene:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    sigma = 0.5 * math.sqrt(float(np.prod(np.sort(ext)[1:])) / n)
    means = rng.uniform(lo, hi, size=(n, 3))
    rgb = np.clip(np.asarray(color) + rng.normal(scale=0.03, size=(n, 3)), 0.02, 0.98)
    return GaussianScene(
        means=means,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), math.log(sigma)),
        opacities=np.full(n, 0.9),
        sh=rgb_to_sh(rgb)[:, None, :],
    )


def _table(rng) -> tuple[GaussianScene, GaussianScene, np.ndarray, np.ndarray]:
    half = np.array([rng.uniform(0.6, 0.8), rng.uniform(0.45, 0.6)])
    thick = 0.06
    color = np.array([0.55, 0.35, 0.2]) + rng.uniform(-0.05, 0.05, 3)
    lo = np.array([-half[0], -half[1], TABLE_TOP - thick])
    hi = np.array([half[0], half[1], TABLE_TOP])
    top = _slab(rng, lo, hi, 160, color)
    legs = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = np.array([sx * (half[0] - 0.08), sy * (half[1] - 0.08)])
            legs.append(_slab(rng, [c[0] - 0.03, c[1] - 0.03, 0.0], [c[0] + 0.03, c[1] + 0.03, TABLE_TOP - thick - 0.03], 14, color * 0.8))
    leg_scene = legs[0]
    for leg in legs[1:]:
        leg_scene = merge(leg_scene, leg)
    return top, leg_scene, lo, hi


def _clutter(rng, count: int) -> GaussianScene:
    out = GaussianScene.empty()
    for k in range(count):
        kind = ("sphere", "box")[k % 2]
        item = synth_primitive(kind, 30, seed=int(rng.integers(1 << 31)), color=rng.uniform(0.2, 0.9, 3))
        size = rng.uniform(0.2, 0.35)
        ang = rng.uniform(0, 2 * math.pi)
        r = rng.uniform(1.1, 1.5)
        placed = transform_scene(
            normalize_object(item),
            DoF(scale=size, rotation=quat_from_azimuth_elevation(rng.uniform(0, 360), 0.0),
                translation=[r * math.cos(ang), r * math.sin(ang), 0.5 * size]),
        )
        out = merge(out, placed)
    return out


def make_case(index: int, seed: int = 0, n_views: int = 8, image_size: int = 64) -> BenchmarkCase:
    rng = np.random.default_rng([seed, index])
    top, legs, lo, hi = _table(rng)
    clutter = _clutter(rng, int(rng.integers(3, 6)))
    scene = _roundtrip(merge(merge(top, legs), clutter))
    pad = 0.02
    gt_ar = Box3.from_bounds(lo - pad, hi + pad).dof

    kind = ("sphere", "box", "two-lobe")[index % 3]
    true_color = rng.uniform(0.25, 0.95, 3)
    washed = 0.5 * true_color + 0.25
    obj = _roundtrip(normalize_object(synth_primitive(kind, 80, seed=int(rng.integers(1 << 31)), color=washed, opacity=0.85)))

    s = float(rng.uniform(0.3, 0.45))
    rot = quat_from_azimuth_elevation(float(rng.uniform(0.0, 360.0)), 0.0)
    lifted = transform_scene(obj, DoF(scale=s, rotation=rot))
    xy = rng.uniform(-0.35, 0.35, 2) * (hi[:2] - lo[:2]) / 2
    z = TABLE_TOP - float(lifted.means[:, 2].min()) + 0.01
    gt = DoF(scale=s, rotation=rot, translation=[xy[0], xy[1], z])

    views = orbit_cameras([0.0, 0.0, 0.6], 3.4, n_views, elevation_deg=35.0, width=image_size, height=image_size,
                          fov_deg=50.0, azimuth_offset_deg=float(rng.uniform(0, 45)))
    name = OBJECT_NAMES[kind]
    parsed = ParsedInsertion(
        object_prompt=f"a {name}",
        attachment_region_prompt="the table",
        global_target=f"a {name} on the table",
        interaction_word="on",
        local_target="the top of the table",
        spatial_word="top",
    )
    ring = appearance_ring(obj, AppearanceConfig())
    ref_view = int(rng.integers(len(ring)))
    true_obj = obj.replace(sh=np.broadcast_to(rgb_to_sh(true_color), obj.sh.shape).copy())
    reference = png_to_array(image_to_png(render_preview(ring[ref_view], true_obj)))
    return BenchmarkCase(
        index=index, seed=seed, scene=scene, obj=obj, views=views, gt_dof=gt, gt_ar=gt_ar,
        n_ar=len(top), parsed=parsed, instruction=f"Put {name_article(name)} on the table",
        reference_image=reference, reference_view=ref_view,
    )


def name_article(name: str) -> str:
    return ("an " if name[0] in "aeiou" else "a ") + name


def synth_benchmark(n_cases: int, seed: int = 0, **kwargs) -> list[BenchmarkCase]:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    return [make_case(i, seed, **kwargs) for i in range(n_cases)]


# ---------------------------------------------------------------------- oracle


class GroundTruthOracle:
    """Answers every oracle kind from a case's ground truth.

    Pixel noise (points, boxes) is drawn from a generator seeded by the
    request digest, so answers do not depend on query order.
    """

    def __init__(self, case: BenchmarkCase, point_noise_px: float = 0.0, box_noise_px: float = 0.0, seed: int = 0):
        self.case = case
        self.point_noise = point_noise_px
        self.box_noise = box_noise_px
        self.seed = seed
        self.calls = 0
        self._placed = case.placed()

    def _rng(self, request: OracleRequest) -> np.random.Generator:
        return np.random.default_rng([self.seed, int(request.digest()[:12], 16)])

    def query(self, request: OracleRequest) -> dict:
        self.calls += 1
        handler = getattr(self, "_" + request.kind)
        return handler(request)

    def _parse(self, request):
        return self.case.parsed.to_dict()

    def _detect_region(self, request):
        p = request.payload
        cam = self.case.views[p["view"]]
        w, h = p["width"], p["height"]
        corners = Box3(self.case.gt_ar).corners
        if np.any(cam.world_to_camera(corners)[:, 2] <= 1e-6):
            return {"box": None}
        uv, _ = project_points(cam, corners)
        if self.box_noise:
            uv = uv + self._rng(request).normal(scale=self.box_noise, size=uv.shape)
        u0, v0 = np.floor(uv.min(axis=0)).astype(int)
        u1, v1 = np.ceil(uv.max(axis=0)).astype(int)
        u0, u1 = max(int(u0), 0), min(int(u1), w - 1)
        v0, v1 = max(int(v0), 0), min(int(v1), h - 1)
        if u0 > u1 or v0 > v1:
            return {"box": None}
        return {"box": [u0, v0, u1, v1]}

    def _point_target(self, request):
        p = request.payload
        cam = self.case.views[p["view"]]
        try:
            u, v = projected_centroid(cam, self._placed)
        except NothingVisible:
            return {"points": []}
        if self.point_noise:
            u, v = np.array([u, v]) + self._rng(request).normal(scale=self.point_noise, size=2)
        if not (0 <= u <= p["width"] - 1 and 0 <= v <= p["height"] - 1):
            return {"points": []}
        return {"points": [[float(u), float(v)]]}

    def _score_rotation(self, request):
        cands = request.payload["candidates"]
        errs = [quat_angle_deg(quat_from_azimuth_elevation(az, el), self.case.gt_dof.rotation) for az, el in cands]
        return {"index": int(np.argmin(errs))}

    def _relative_scale(self, request):
        return {"lambda_rel": float(self.case.gt_dof.scale[0] / np.max(self.case.gt_ar.scale))}

    def _scale_feedback(self, request):
        ratio = float(self.case.gt_dof.scale[0]) / float(request.payload["scale"])
        if abs(math.log(ratio)) <= math.log(1.05):
            return {"verdict": "accept", "factor": 1.0}
        return {"verdict": "increase" if ratio > 1 else "decrease", "factor": ratio}

    def _embed_image(self, request):
        return {"embedding": embed_png(request.images[0], request.payload.get("dim"))}


def embed_png(png: bytes, dim: int | None = None) -> list[float]:
    """Content embedding: a downsampled image as a unit vector."""
    vec = resize_image(png_to_array(png), EMBED_SIZE).ravel()
    if dim is not None and dim != vec.size:
        raise ValueError(f"embedding dimension is fixed at {vec.size}")
    norm = float(np.linalg.norm(vec))
    if norm == 0:
        vec = np.zeros_like(vec)
        vec[0] = 1.0
        return vec.tolist()
    return (vec / norm).tolist()


# ---------------------------------------------------------------------- metrics


@dataclass
class EvalReport:
    per_view_iou: list[float]
    miou: float
    centroid_error_px: float
    rotation_error_deg: float
    translation_error: float
    runtimes: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_view_iou": self.per_view_iou,
            "miou": self.miou,
            "centroid_error_px": self.centroid_error_px,
            "rotation_error_deg": self.rotation_error_deg,
            "translation_error": self.translation_error,
            "runtimes": self.runtimes,
        }


def silhouette_iou(views: list[Camera], a: GaussianScene, b: GaussianScene) -> list[float]:
    return [mask_iou(splat_silhouette(cam, a), splat_silhouette(cam, b)) for cam in views]


def evaluate(case: BenchmarkCase, result_dof: DoF, runtimes: dict | None = None) -> EvalReport:
    placed = case.placed(result_dof)
    truth = case.placed()
    ious = silhouette_iou(case.views, placed, truth)
    errs = []
    for cam in case.views:
        try:
            a = projected_centroid(cam, placed)
            b = projected_centroid(cam, truth)
        except NothingVisible:
            continue
        errs.append(math.hypot(a[0] - b[0], a[1] - b[1]))
    return EvalReport(
        per_view_iou=[float(x) for x in ious],
        miou=float(np.mean(ious)),
        centroid_error_px=float(np.mean(errs)) if errs else float("nan"),
        rotation_error_deg=quat_angle_deg(result_dof.rotation, case.gt_dof.rotation),
        translation_error=float(np.linalg.norm(result_dof.translation - case.gt_dof.translation)),
        runtimes=dict(runtimes or {}),
    )


def write_report(rows: list[dict], directory) -> dict:
    """Write ``report.json`` and ``report.csv``; return the summary."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    summary = {
        "n_cases": len(rows),
        "mean_miou": float(np.mean([r["miou"] for r in rows])) if rows else float("nan"),
        "mean_centroid_error_px": float(np.nanmean([r["centroid_error_px"] for r in rows])) if rows else float("nan"),
        "mean_rotation_error_deg": float(np.mean([r["rotation_error_deg"] for r in rows])) if rows else float("nan"),
        "mean_translation_error": float(np.mean([r["translation_error"] for r in rows])) if rows else float("nan"),
    }
    (d / "report.json").write_text(json.dumps({"summary": summary, "cases": rows}, indent=2))
    fields = ["case", "miou", "centroid_error_px", "rotation_error_deg", "translation_error", "runtime_s"]
    with open(d / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "runtime_s": sum(r.get("runtimes", {}).values())})
    return summary


# ---------------------------------------------------------------------- running


def run_case(
    case: BenchmarkCase,
    directory,
    steps: dict | None = None,
    point_noise_px: float = 0.0,
    box_noise_px: float = 0.0,
    fresh: bool = False,
) -> tuple[EvalReport, PipelineResult]:
    """Write ``case``, run the pipeline against its perfect oracle and score it.

    Every oracle exchange is recorded to ``fixture.json`` next to the config,
    so the case can be replayed later with the fixture backend alone.
    """
    d = Path(directory)
    cfg = PipelineConfig.load(case.write(d, steps))
    oracle = RecordingBackend(case.oracle(point_noise_px, box_noise_px), Transcript(d / "fixture.json"))
    result = run_pipeline(cfg, oracle=oracle, fresh=fresh)
    return evaluate(case, result.dof, result.timings), result


def run_benchmark(n_cases: int, seed: int, directory, steps: dict | None = None, **kwargs) -> tuple[dict, list[dict]]:
    d = Path(directory)
    rows = []
    for case in synth_benchmark(n_cases, seed):
        report, _ = run_case(case, d / case.name, steps, **kwargs)
        rows.append({"case": case.name, **report.to_dict()})
    return write_report(rows, d), rows
