import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit, logit

from splatplace.appearance import (
    AppearanceConfig,
    RatioTooLow,
    ToyAppearanceBackend,
    ZeroResidualBackend,
    _appearance_grads,
    appearance_ring,
    build_ref_dataset,
    estimate_reference_pose,
    format_subject_prompt,
    refine_appearance,
)
from splatplace.gaussians import normalize_object, synth_primitive
from splatplace.refine import GuidanceResponse, NonFinite
from splatplace.render import composite, image_to_png, orbit_cameras, png_to_array, render_preview


def _object(seed=1, n=60):
    rng = np.random.default_rng(seed)
    obj = normalize_object(synth_primitive("two-lobe", n, seed=seed, color=(0.3, 0.5, 0.6), opacity=0.6))
    return obj.replace(opacities=rng.uniform(0.2, 0.8, len(obj)))


def _small_cfg(**kw):
    base = dict(n_views=4, image_size=32, steps=20)
    base.update(kw)
    return AppearanceConfig(**base)


# ---------------------------------------------------------------- dataset


def test_default_dataset_counts():
    obj = _object()
    cfg = AppearanceConfig(n_views=12, image_size=16)
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)
    assert len(ds) == 48
    assert sum(e.is_reference for e in ds.entries) == 36
    assert ds.reference_fraction == 0.75


def test_smallest_dataset():
    obj = _object()
    cfg = AppearanceConfig(n_views=1, image_size=16)
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)
    assert len(ds) == 4 and ds.n_references == 3


def test_ratio_one_rejected():
    with pytest.raises(RatioTooLow):
        AppearanceConfig(ratio=1.0)


@given(st.integers(1, 40), st.floats(2.0, 6.0))
def test_reference_fraction_exact(n, ratio):
    cfg = AppearanceConfig(n_views=n, ratio=ratio)
    m = cfg.n_references
    assert m > n
    assert m == round(ratio * n)


def test_dataset_layout():
    obj = _object()
    cfg = _small_cfg(n_views=5)
    ring = appearance_ring(obj, cfg)
    i_o = np.full((32, 32, 3), 0.5)
    ds = build_ref_dataset(obj, i_o, ring[2], cfg, ring)
    flags = [e.is_reference for e in ds.entries]
    assert flags == [False] * 5 + [True] * 15
    refs = ds.entries[5:]
    assert all(e.pose == ring[2] and e.image is i_o for e in refs)
    for e, cam in zip(ds.entries[:5], ring):
        np.testing.assert_array_equal(e.image, render_preview(cam, obj))


def test_reference_resized_to_pose():
    obj = _object()
    cfg = _small_cfg()
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, np.zeros((64, 64, 3)), ring[0], cfg, ring)
    assert ds.entries[-1].image.shape == (32, 32, 3)


def test_ring_is_even_azimuth():
    obj = _object()
    cfg = _small_cfg(n_views=6)
    ring = appearance_ring(obj, cfg)
    c = obj.weighted_centroid()
    centers = np.array([cam.center for cam in ring]) - c
    az = np.degrees(np.arctan2(centers[:, 1], centers[:, 0]))
    gaps = np.mod(np.diff(az), 360)
    np.testing.assert_allclose(gaps, 60.0, atol=1e-9)
    np.testing.assert_allclose(centers[:, 2], 0.0, atol=1e-9)


# ----------------------------------------------------------- subject prompt


def test_subject_prompt_examples():
    assert format_subject_prompt("a dog", "<token>") == "a <token> dog"
    assert format_subject_prompt("a red hat", "<token>") == "a red <token> hat"
    assert format_subject_prompt("a red hat", "") == "a red hat"


def test_subject_prompt_postmodifier():
    assert format_subject_prompt("a cat with a hat", "<t>") == "a <t> cat with a hat"
    assert format_subject_prompt("dog", "<t>") == "<t> dog"


def test_subject_prompt_rejects_empty():
    with pytest.raises(ValueError):
        format_subject_prompt("  ", "<t>")


# ---------------------------------------------------------- reference pose


def _unit(v):
    return v / np.linalg.norm(v)


class ContentEmbedder:
    """embed_image oracle: the decoded pixels themselves."""

    def query(self, request):
        assert request.kind == "embed_image"
        return {"embedding": _unit(png_to_array(request.images[0]).ravel()).tolist()}


class HashEmbedder:
    """Reproducible random embedding per image content."""

    def __init__(self, dim=16):
        self.dim = dim

    def vector(self, png):
        seed = int.from_bytes(hashlib.sha256(png).digest()[:8], "little")
        return _unit(np.random.default_rng(seed).normal(size=self.dim))

    def query(self, request):
        return {"embedding": self.vector(request.images[0]).tolist()}


class ConstantEmbedder:
    def query(self, request):
        return {"embedding": _unit(np.array([1.0, 2.0, 3.0])).tolist()}


def test_reference_pose_self_match():
    obj = _object()
    views = orbit_cameras(obj.weighted_centroid(), 2.5, 6, elevation_deg=20, width=24, height=24)
    for k in (0, 3, 5):
        assert estimate_reference_pose(obj, render_preview(views[k], obj), views, ContentEmbedder()) == views[k]


def test_reference_pose_tie_prefers_lower_index():
    obj = _object()
    views = orbit_cameras(obj.weighted_centroid(), 2.5, 4, width=16, height=16)
    assert estimate_reference_pose(obj, np.zeros((16, 16, 3)), views, ConstantEmbedder()) == views[0]


def test_reference_pose_matches_brute_force():
    obj = _object()
    views = orbit_cameras(obj.weighted_centroid(), 2.5, 8, elevation_deg=10, width=16, height=16)
    for seed in range(5):
        emb = HashEmbedder()
        i_o = np.random.default_rng(seed).random((16, 16, 3))
        ref = emb.vector(image_to_png(i_o))
        sims = []
        for cam in views:
            v = emb.vector(image_to_png(render_preview(cam, obj)))
            sims.append(v @ ref / (np.linalg.norm(v) * np.linalg.norm(ref)))
        assert estimate_reference_pose(obj, i_o, views, emb) == views[int(np.argmax(sims))]


def test_reference_pose_needs_two_views():
    obj = _object()
    views = orbit_cameras(obj.weighted_centroid(), 2.5, 1, width=16, height=16)
    with pytest.raises(ValueError):
        estimate_reference_pose(obj, np.zeros((16, 16, 3)), views, ConstantEmbedder())


# ---------------------------------------------------------------- updates


def _fd_check(obj, cam, background):
    rng = np.random.default_rng(0)
    r = rng.standard_normal((cam.height, cam.width, 3))
    g_dc, g_logit = _appearance_grads(obj, composite(cam, obj, background=background), r, background)

    def f(o):
        return float(np.sum(render_preview(cam, o, None, background) * r))

    h = 1e-6
    for i in (0, 7, 23):
        for c in range(3):
            sh = np.array(obj.sh)
            sh[i, 0, c] += h
            up = f(obj.replace(sh=sh))
            sh[i, 0, c] -= 2 * h
            down = f(obj.replace(sh=sh))
            assert g_dc[i, c] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)
        lg = logit(np.array(obj.opacities))
        lg[i] += h
        up = f(obj.replace(opacities=expit(lg)))
        lg[i] -= 2 * h
        down = f(obj.replace(opacities=expit(lg)))
        assert g_logit[i] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-7)


def test_appearance_gradient_matches_finite_differences():
    obj = _object()
    cam = orbit_cameras(obj.weighted_centroid(), 2.2, 4, width=32, height=32)[1]
    _fd_check(obj, cam, (0.1, 0.2, 0.3))
    _fd_check(obj, cam, (0.0, 0.0, 0.0))


def test_zero_residual_leaves_object_unchanged():
    obj = _object()
    cfg = _small_cfg()
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)
    out = refine_appearance(obj, ds, ZeroResidualBackend(), cfg)
    np.testing.assert_allclose(out.sh, obj.sh, atol=1e-9)
    np.testing.assert_allclose(out.opacities, obj.opacities, atol=1e-9)


def test_toy_backend_halves_l1_at_reference_pose():
    obj = _object()
    cfg = AppearanceConfig(steps=300)
    ring = appearance_ring(obj, cfg)
    target = obj.replace(sh=obj.sh * 0 + np.array([0.9, -0.6, 0.2]))
    p_star = ring[3]
    i_o = render_preview(p_star, target)
    ds = build_ref_dataset(obj, i_o, p_star, cfg, ring)
    out = refine_appearance(obj, ds, ToyAppearanceBackend(), cfg)
    before = np.abs(render_preview(p_star, obj) - i_o).mean()
    after = np.abs(render_preview(p_star, out) - i_o).mean()
    assert after <= 0.5 * before


def test_geometry_frozen():
    obj = _object()
    cfg = _small_cfg()
    ring = appearance_ring(obj, cfg)
    i_o = np.random.default_rng(2).random((32, 32, 3))
    ds = build_ref_dataset(obj, i_o, ring[1], cfg, ring)
    out = refine_appearance(obj, ds, ToyAppearanceBackend(), cfg)
    assert len(out) == len(obj)
    for name in ("means", "log_scales", "rotations"):
        assert getattr(out, name).tobytes() == getattr(obj, name).tobytes()
    assert not np.array_equal(out.sh, obj.sh)


def test_refine_appearance_deterministic():
    obj = _object()
    cfg = _small_cfg(seed=4)
    ring = appearance_ring(obj, cfg)
    i_o = np.random.default_rng(2).random((32, 32, 3))
    ds = build_ref_dataset(obj, i_o, ring[1], cfg, ring)
    a = refine_appearance(obj, ds, ToyAppearanceBackend(), cfg)
    b = refine_appearance(obj, ds, ToyAppearanceBackend(), cfg)
    assert a.sh.tobytes() == b.sh.tobytes() and a.opacities.tobytes() == b.opacities.tobytes()


def test_fit_idempotent_per_digest():
    obj = _object()
    cfg = _small_cfg()
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)
    backend = ToyAppearanceBackend()
    backend.fit(ds, "a <token> ball")
    targets = dict(backend.targets)
    backend.fit(ds, "a <token> ball")
    assert backend.fit_calls == 1
    assert all(targets[k] is backend.targets[k] for k in targets)
    ds2 = build_ref_dataset(obj, np.zeros((32, 32, 3)), ring[0], cfg, ring)
    backend.fit(ds2, "a <token> ball")
    assert backend.fit_calls == 2


def test_toy_fit_is_frequency_weighted_mean():
    obj = _object()
    cfg = _small_cfg()
    ring = appearance_ring(obj, cfg)
    i_o = np.full((32, 32, 3), 0.8)
    ds = build_ref_dataset(obj, i_o, ring[2], cfg, ring)
    backend = ToyAppearanceBackend()
    backend.fit(ds, "y")
    m = cfg.n_references
    expected = (render_preview(ring[2], obj) + m * i_o) / (m + 1)
    np.testing.assert_allclose(backend.targets[ring[2]], expected, atol=1e-12)


@given(st.integers(1, 500), st.integers(0, 10_000))
def test_upper_timestep_anneals(steps, step):
    cfg = AppearanceConfig(steps=steps)
    step = step % steps
    hi = cfg.upper_timestep(step)
    assert 0.25 - 1e-12 <= hi <= 0.5 + 1e-12
    if steps > 1:
        assert cfg.upper_timestep(0) == 0.5
        assert cfg.upper_timestep(steps - 1) == pytest.approx(0.25, abs=1e-15)


def test_sampled_timesteps_within_annealed_range():
    obj = _object()
    cfg = _small_cfg(steps=40)
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)
    seen = []

    class Recorder(ZeroResidualBackend):
        def guide(self, query):
            seen.append(query.timestep)
            return super().guide(query)

    refine_appearance(obj, ds, Recorder(), cfg)
    assert len(seen) == 40
    for step, t in enumerate(seen):
        assert 0.02 <= t <= cfg.upper_timestep(step)


def test_non_finite_aborts():
    obj = _object()
    cfg = _small_cfg(steps=3)
    ring = appearance_ring(obj, cfg)
    ds = build_ref_dataset(obj, render_preview(ring[0], obj), ring[0], cfg, ring)

    class Broken(ZeroResidualBackend):
        def guide(self, query):
            return GuidanceResponse(np.full_like(query.noise, np.inf))

    with pytest.raises(NonFinite):
        refine_appearance(obj, ds, Broken(), cfg)
