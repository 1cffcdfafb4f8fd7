"""End-to-end insertion driver with resumable, content-keyed stage artifacts.

Stage order: parse, region, dof_init, refine, appearance, merge. Each stage
writes one JSON artifact carrying a cache key derived from its inputs, its
config subsection and the package version. A rerun reuses any artifact whose
key still matches. Every stage continues from what it wrote to disk, so cold
and warm runs take the same path through the data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, oracles
from .appearance import (
    AppearanceConfig,
    ToyAppearanceBackend,
    appearance_ring,
    build_ref_dataset,
    estimate_reference_pose,
    format_subject_prompt,
    refine_appearance,
)
from .dof_init import (
    RotationGrid,
    TranslationFitConfig,
    collect_targets,
    init_rotation,
    init_scale,
    init_translation,
    iterative_scale_adjust,
    rotation_candidates,
)
from .gaussians import GaussianScene, load_ply, merge, normalize_object, save_ply, synth_primitive, transform_scene
from .geometry import DoF
from .oracles import ParsedInsertion, canonical_json
from .refine import FixedGuidance, SsdsConfig, placement_guidance, refine_dof
from .region import RegionFitConfig, detect_attachment_masks, extract_attachment, fit_region_dof
from .render import Camera, image_to_png, orbit_cameras, png_to_array, render_preview

log = logging.getLogger(__name__)

STAGES = ("parse", "region", "dof_init", "refine", "appearance", "merge")
ARTIFACTS = {
    "parse": "parse.json",
    "region": "region.json",
    "dof_init": "dof_init.json",
    "refine": "dof_refined.json",
    "appearance": "appearance.json",
    "merge": "scene.json",
}
MODES = ("insert", "replace")


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------- config


_TOP_KEYS = {
    "scene", "object", "instruction", "out", "views", "reference_image", "backend", "mode", "seed",
    "region", "dof_init", "refine", "appearance",
}


@dataclass
class PipelineConfig:
    scene: str
    object: str | dict
    instruction: str
    out: str = "out"
    views: str | dict | None = None
    reference_image: str | None = None
    backend: str | None = None
    mode: str = "insert"
    seed: int = 0
    region: dict = field(default_factory=dict)
    dof_init: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    appearance: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = {"scene", "object", "instruction"} - set(d)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        return cls(**d, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not isinstance(self.instruction, str) or not self.instruction.strip():
            raise ConfigError("instruction must be a non-empty string")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        paths = [self.scene]
        if isinstance(self.object, str):
            paths.append(self.object)
        elif not (isinstance(self.object, dict) and set(self.object) == {"synth"}):
            raise ConfigError("object must be a path or {'synth': {...}}")
        if isinstance(self.views, str):
            paths.append(self.views)
        elif self.views is not None and not (isinstance(self.views, dict) and set(self.views) == {"orbit"}):
            raise ConfigError("views must be a path, {'orbit': {...}} or null")
        if self.reference_image:
            paths.append(self.reference_image)
        for p in paths:
            if not self.path(p).exists():
                raise ConfigError(f"path does not exist: {self.path(p)}")
        # building the stage configs surfaces bad keys before any work starts
        self.region_config()
        self.dof_init_config()
        self.refine_config()
        self.appearance_config()

    # stage configs

    def region_config(self) -> RegionFitConfig:
        return _build(RegionFitConfig, self.region, "region", exclude={"init"})

    def dof_init_config(self) -> dict:
        d = dict(self.dof_init)
        allowed = {"azimuth_step", "elevation_step", "extent_mode", "feedback_rounds", "primary_view", "translation"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown dof_init keys: {sorted(unknown)}")
        try:
            grid = RotationGrid(d.get("azimuth_step", 10.0), d.get("elevation_step", 10.0))
        except ValueError as exc:
            raise ConfigError(f"dof_init: {exc}") from exc
        mode = d.get("extent_mode", "max")
        if mode not in ("max", "mean", "geomean"):
            raise ConfigError("dof_init.extent_mode must be max, mean or geomean")
        return {
            "grid": grid,
            "extent_mode": mode,
            "feedback_rounds": int(d.get("feedback_rounds", 3)),
            "primary_view": int(d.get("primary_view", 0)),
            "translation": _build(TranslationFitConfig, d.get("translation", {}), "dof_init.translation"),
        }

    def refine_config(self) -> tuple[SsdsConfig, dict]:
        d = dict(self.refine)
        guidance = d.pop("guidance", {"kind": "none"})
        if not isinstance(guidance, dict) or guidance.get("kind") not in ("none", "quadratic"):
            raise ConfigError("refine.guidance.kind must be 'none' or 'quadratic'")
        if guidance["kind"] == "quadratic" and "target_dof" not in guidance:
            raise ConfigError("quadratic guidance needs target_dof")
        d.setdefault("seed", self.seed)
        if "t_range" in d:
            d["t_range"] = tuple(d["t_range"])
        return _build(SsdsConfig, d, "refine", exclude={"weighting"}), guidance

    def appearance_config(self) -> AppearanceConfig:
        d = dict(self.appearance)
        d.setdefault("seed", self.seed)
        for key in ("t_range_start", "t_range_end"):
            if key in d:
                d[key] = tuple(d[key])
        return _build(AppearanceConfig, d, "appearance")


def _build(cls, d: dict, name: str, exclude=frozenset()):
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


# ----------------------------------------------------------------------- inputs


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_object(cfg: PipelineConfig) -> GaussianScene:
    if isinstance(cfg.object, dict):
        spec = dict(cfg.object["synth"])
        obj = synth_primitive(spec.pop("kind", "sphere"), spec.pop("n", 80), **spec)
    else:
        obj = load_ply(cfg.path(cfg.object))
    return normalize_object(obj)


def load_views(cfg: PipelineConfig, scene: GaussianScene) -> list[Camera]:
    if isinstance(cfg.views, str):
        return [Camera.from_dict(d) for d in json.loads(cfg.path(cfg.views).read_text())]
    spec = dict((cfg.views or {"orbit": {}})["orbit"])
    center = spec.pop("center", None)
    center = scene.weighted_centroid() if center is None else np.asarray(center, dtype=np.float64)
    radius = spec.pop("radius", None) or 1.2 * max(scene.diameter(), 1e-6)
    size = spec.pop("size", 64)
    return orbit_cameras(
        center, radius, spec.pop("n", 8), elevation_deg=spec.pop("elevation", 30.0), width=size, height=size,
        fov_deg=spec.pop("fov", 50.0), azimuth_offset_deg=spec.pop("azimuth_offset", 0.0),
    )


def resolve_backend(spec: str | None, out_dir: Path | None = None, base_dir=".") -> oracles.OracleBackend:
    """``fixture:<path>`` or ``http:<url>`` (HTTP runs record ``transcript.json``)."""
    if not spec:
        raise ConfigError("no oracle backend configured (use fixture:<path> or http:<url>)")
    kind, _, target = spec.partition(":")
    if kind == "fixture":
        path = Path(target)
        path = path if path.is_absolute() else Path(base_dir) / path
        if not path.exists():
            raise ConfigError(f"fixture not found: {path}")
        return oracles.fixture_backend(path)
    if kind == "http":
        transcript = oracles.Transcript(out_dir / "transcript.json" if out_dir else None)
        return oracles.http_backend(endpoint=target or None, transcript=transcript)
    raise ConfigError(f"unknown backend {spec!r}")


# --------------------------------------------------------------------- running


def _key(stage: str, inputs: dict, config: dict) -> str:
    doc = {"stage": stage, "version": __version__, "inputs": inputs, "config": config}
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    tmp.replace(path)


@dataclass
class PipelineResult:
    scene: GaussianScene | None
    dof: DoF | None
    artifacts: dict[str, Path]
    cached: dict[str, bool]
    timings: dict[str, float]
    out_dir: Path


class _Run:
    def __init__(self, cfg: PipelineConfig, oracle, guidance, appearance_backend, fresh: bool):
        self.cfg = cfg
        self.out = cfg.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self._oracle = oracle
        self.guidance = guidance
        self.appearance_backend = appearance_backend
        self.fresh = fresh
        self.artifacts: dict[str, Path] = {}
        self.cached: dict[str, bool] = {}
        self.timings: dict[str, float] = {}
        self.keys: dict[str, str] = {}

        self.scene = load_ply(cfg.path(cfg.scene))
        self.obj = load_object(cfg)
        self.views = load_views(cfg, self.scene)
        obj_id = file_digest(cfg.path(cfg.object)) if isinstance(cfg.object, str) else cfg.object
        views_id = file_digest(cfg.path(cfg.views)) if isinstance(cfg.views, str) else cfg.views
        self.inputs = {
            "scene": file_digest(cfg.path(cfg.scene)),
            "object": obj_id,
            "views": views_id,
            "reference_image": file_digest(cfg.path(cfg.reference_image)) if cfg.reference_image else None,
            "instruction": cfg.instruction,
            "mode": cfg.mode,
            "seed": cfg.seed,
        }

    @property
    def oracle(self):
        if self._oracle is None:
            self._oracle = resolve_backend(self.cfg.backend, self.out, self.cfg.base_dir)
        return self._oracle

    def cached_artifact(self, stage: str, key: str, extra_files=()) -> dict | None:
        path = self.out / ARTIFACTS[stage]
        if self.fresh or not path.exists() or not all((self.out / f).exists() for f in extra_files):
            return None
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
        return doc if doc.get("cache_key") == key else None

    def stage(self, name: str, key: str, compute, extra_files=()) -> dict:
        self.keys[name] = key
        start = time.perf_counter()
        doc = self.cached_artifact(name, key, extra_files)
        self.cached[name] = doc is not None
        if doc is None:
            log.info("stage %s: computing", name)
            try:
                body = compute()
            except (ConfigError, StageFailure):
                raise
            except Exception as exc:
                raise StageFailure(name, exc) from exc
            doc = {"cache_key": key, **body}
            _write_json(self.out / ARTIFACTS[name], doc)
            doc = json.loads((self.out / ARTIFACTS[name]).read_text())
        else:
            log.info("stage %s: cache hit", name)
        self.artifacts[name] = self.out / ARTIFACTS[name]
        self.timings[name] = time.perf_counter() - start
        return doc

    # stages

    def run_parse(self) -> ParsedInsertion:
        def compute():
            png = image_to_png(render_preview(self.views[0], self.scene))
            return {"parsed": oracles.parse_instruction(self.oracle, self.cfg.instruction, png).to_dict()}

        key = _key("parse", {k: self.inputs[k] for k in ("scene", "views", "instruction")}, {})
        return ParsedInsertion.from_dict(self.stage("parse", key, compute)["parsed"])

    def run_region(self, parsed: ParsedInsertion):
        rcfg = self.cfg.region_config()

        def compute():
            masks = detect_attachment_masks(self.views, self.scene, parsed.attachment_region_prompt, self.oracle)
            fit = fit_region_dof(masks, self.views, rcfg)
            region, _ = extract_attachment(self.scene, fit.dof)
            return {
                **fit.to_dict(),
                "per_view_iou": [None if np.isnan(x) else x for x in fit.per_view_iou],
                "views_detected": [m is not None for m in masks],
                "n_region_splats": len(region),
                "mode": self.cfg.mode,
            }

        key = _key("region", {"parse": self.keys["parse"], "mode": self.cfg.mode}, dataclasses.asdict(rcfg))
        doc = self.stage("region", key, compute)
        dof_ar = DoF.from_dict(doc["dof_ar"])
        region, rest = extract_attachment(self.scene, dof_ar)
        if self.cfg.mode == "replace":
            # the detected region is the thing being replaced: remove it, keep its box
            return dof_ar, GaussianScene.empty(self.scene.sh_degree), rest, len(region)
        return dof_ar, region, self.scene, 0

    def run_dof_init(self, parsed, dof_ar, g_ar, base_scene) -> DoF:
        c = self.cfg.dof_init_config()
        config = {
            "azimuth_step": c["grid"].azimuth_step, "elevation_step": c["grid"].elevation_step,
            "extent_mode": c["extent_mode"], "feedback_rounds": c["feedback_rounds"],
            "primary_view": c["primary_view"], "translation": dataclasses.asdict(c["translation"]),
        }

        def compute():
            view = self.views[c["primary_view"]]
            scene_img = render_preview(view, base_scene)
            lam = oracles.relative_scale(
                self.oracle, parsed.object_prompt, parsed.attachment_region_prompt, image_to_png(scene_img)
            )
            s0 = init_scale(dof_ar, lam, c["extent_mode"])
            renders = rotation_candidates(self.obj, c["grid"])
            r_o, r_index = init_rotation(scene_img, self.obj, c["grid"], parsed.global_target, self.oracle, renders)
            targets = collect_targets(self.oracle, base_scene, self.views, parsed.local_target)
            fit = init_translation(self.obj, s0, r_o, targets, self.views, g_ar, c["translation"])
            dof = DoF(scale=s0, rotation=r_o, translation=fit.translation)
            dof, rounds = iterative_scale_adjust(
                base_scene, self.obj, dof, self.views, self.oracle, parsed.object_prompt, parsed.global_target,
                c["feedback_rounds"], c["primary_view"],
            )
            if dof.scale[0] != s0:
                # re-center after a rescale, starting from the previous solution
                fit = init_translation(
                    self.obj, float(dof.scale[0]), r_o, targets, self.views, g_ar, c["translation"],
                    t0=fit.translation, ref_len=s0,
                )
                dof = dof.replace(translation=fit.translation)
            return {
                "dof": dof.to_dict(),
                "lambda_rel": lam,
                "scale_initial": s0,
                "scale_rounds": rounds,
                "rotation_index": r_index,
                "rotation_angles": list(c["grid"].angles()[r_index]),
                "targets": {str(k): list(v) for k, v in targets.items()},
                "translation_fit": {
                    "per_view_residuals": {str(k): v for k, v in fit.per_view_residuals.items()},
                    "collision": fit.collision_final,
                    "loss": fit.loss,
                    "iters": fit.iters,
                    "converged": fit.converged,
                },
            }

        key = _key("dof_init", {"region": self.keys["region"], "object": self.inputs["object"]}, config)
        return DoF.from_dict(self.stage("dof_init", key, compute)["dof"])

    def run_refine(self, parsed, dof_init, base_scene) -> DoF:
        scfg, guidance = self.cfg.refine_config()
        csv_name = "refine_diagnostics.csv"

        def compute():
            backend = self.guidance
            if backend is None and guidance["kind"] == "none":
                # nothing to distill from: the placement stays where init put it
                (self.out / csv_name).write_text("")
                return {"dof": dof_init.to_dict(), "steps": 0, "guidance": "none"}
            if backend is None:
                backend = placement_guidance(
                    base_scene, self.obj, DoF.from_dict(guidance["target_dof"]), self.views,
                    gain=guidance.get("gain", 3.0), amplification=guidance.get("amplification", 2.0),
                )
            result = refine_dof(base_scene, self.obj, dof_init, parsed, self.views, backend, scfg)
            result.write_csv(self.out / csv_name)
            return {"dof": result.dof.to_dict(), "steps": scfg.steps, "guidance": guidance["kind"]}

        config = {**scfg.to_dict(), "guidance": guidance}
        key = _key("refine", {"dof_init": self.keys["dof_init"]}, config)
        return DoF.from_dict(self.stage("refine", key, compute, (csv_name,))["dof"])

    def run_appearance(self, parsed) -> GaussianScene:
        acfg = self.cfg.appearance_config()
        ply_name = "object_refined.ply"

        def compute():
            ring = appearance_ring(self.obj, acfg)
            if self.cfg.reference_image:
                i_o = png_to_array(self.cfg.path(self.cfg.reference_image).read_bytes())
            else:
                # without a reference the object's own look is the target
                i_o = render_preview(ring[0], self.obj)
            p_star = estimate_reference_pose(self.obj, i_o, ring, self.oracle)
            dataset = build_ref_dataset(self.obj, i_o, p_star, acfg, ring)
            self._write_dataset(dataset)
            target = dataset.entries[-1].image
            prompt = format_subject_prompt(parsed.object_prompt, acfg.subject_token)
            backend = self.appearance_backend or ToyAppearanceBackend()
            refined = refine_appearance(self.obj, dataset, backend, acfg, prompt)
            save_ply(refined, self.out / ply_name)
            before = float(np.mean(np.abs(render_preview(p_star, self.obj) - target)))
            after = float(np.mean(np.abs(render_preview(p_star, load_ply(self.out / ply_name)) - target)))
            return {
                "steps": acfg.steps,
                "final_l1_at_pstar": after,
                "initial_l1_at_pstar": before,
                "reference_view": ring.index(p_star),
                "subject_prompt": prompt,
                "n_rendered": dataset.n_rendered,
                "n_references": dataset.n_references,
            }

        inputs = {k: self.inputs[k] for k in ("object", "reference_image")}
        inputs["object_prompt"] = parsed.object_prompt
        key = _key("appearance", inputs, acfg.to_dict())
        self.stage("appearance", key, compute, (ply_name,))
        return load_ply(self.out / ply_name)

    def _write_dataset(self, dataset) -> None:
        d = self.out / "appearance_dataset"
        d.mkdir(exist_ok=True)
        entries = []
        for i, e in enumerate(dataset.entries):
            name = "reference.png" if e.is_reference else f"view_{i:03d}.png"
            if not e.is_reference or not (d / name).exists():
                (d / name).write_bytes(image_to_png(e.image))
            entries.append({"image_path": name, "pose": e.pose.to_dict(), "is_reference": e.is_reference})
        _write_json(d / "dataset.json", {"n_rendered": dataset.n_rendered, "n_references": dataset.n_references,
                                         "entries": entries})

    def run_merge(self, obj_refined, dof, base_scene, n_removed) -> GaussianScene:
        ply_name = "final.ply"

        def compute():
            final = merge(base_scene, transform_scene(obj_refined, dof))
            save_ply(final, self.out / ply_name)
            return {
                "path": ply_name,
                "sh_degree": final.sh_degree,
                "splat_count": len(final),
                "scene_splats": len(self.scene),
                "removed_splats": n_removed,
                "object_splats": len(obj_refined),
                "mode": self.cfg.mode,
                "dof": dof.to_dict(),
            }

        key = _key("merge", {"refine": self.keys["refine"], "appearance": self.keys["appearance"]}, {})
        self.stage("merge", key, compute, (ply_name,))
        return load_ply(self.out / ply_name)


def run_pipeline(
    cfg: PipelineConfig,
    oracle: oracles.OracleBackend | None = None,
    guidance=None,
    appearance_backend=None,
    until: str = "merge",
    fresh: bool = False,
) -> PipelineResult:
    """Run stages in order up to and including ``until``.

    ``oracle``, ``guidance`` and ``appearance_backend`` override what the
    config would construct. ``fresh`` ignores existing artifacts.
    """
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}")
    cfg.validate()
    run = _Run(cfg, oracle, guidance, appearance_backend, fresh)
    stop = STAGES.index(until)

    def result(scene=None, dof=None):
        return PipelineResult(scene, dof, run.artifacts, run.cached, run.timings, run.out)

    parsed = run.run_parse()
    if stop == 0:
        return result()
    dof_ar, g_ar, base_scene, n_removed = run.run_region(parsed)
    if stop == 1:
        return result()
    dof0 = run.run_dof_init(parsed, dof_ar, g_ar, base_scene)
    if stop == 2:
        return result(dof=dof0)
    dof = run.run_refine(parsed, dof0, base_scene)
    if stop == 3:
        return result(dof=dof)
    obj_refined = run.run_appearance(parsed)
    if stop == 4:
        return result(dof=dof)
    final = run.run_merge(obj_refined, dof, base_scene, n_removed)
    _write_json(run.out / "timings.json", run.timings)
    return result(final, dof)
