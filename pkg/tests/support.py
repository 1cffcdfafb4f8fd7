"""Independent oracles and scenario builders shared by unit and acceptance tests."""

import hashlib
import json
from pathlib import Path

import numpy as np

from splatplace.gaussians import normalize_object, random_scene, synth_primitive
from splatplace.geometry import DoF, quat_from_axis_angle, quat_multiply, random_quat
from splatplace.oracles import HttpBackend, Transcript, canonical_json
from splatplace.render import orbit_cameras


def dlt_point(cams, uvs):
    """Homogeneous DLT written directly from P = K [R | t]."""
    a = []
    for cam, (u, v) in zip(cams, uvs):
        k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
        p = k @ np.column_stack([cam.R, cam.translation])
        a.append(u * p[2] - p[0])
        a.append(v * p[2] - p[1])
    x = np.linalg.svd(np.array(a))[2][-1]
    return x[:3] / x[3]


def project(cam, p):
    pc = cam.R @ p + cam.translation
    return cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy


def translation_trial(seed, n_views=4):
    """Known 3D point projected into ``n_views`` views; object sized to a scene."""
    rng = np.random.default_rng(seed)
    scene = random_scene(400, seed=seed, spread=1.5)
    obj = normalize_object(synth_primitive(["sphere", "box", "two-lobe"][seed % 3], 120, seed=seed))
    s_o = float(rng.uniform(0.2, 0.5))
    r_o = random_quat(rng)
    point = rng.uniform(-0.8, 0.8, 3)
    views = orbit_cameras([0, 0, 0], 5.0, n_views, elevation_deg=rng.uniform(15, 45),
                          azimuth_offset_deg=rng.uniform(0, 90), width=64, height=64)
    targets = {i: project(cam, point) for i, cam in enumerate(views)}
    return scene, obj, s_o, r_o, point, views, targets


class DeltaScorer:
    """score_rotation oracle that scores 1 for one designated render and 0 elsewhere."""

    def __init__(self, designated_png: bytes):
        self.key = hashlib.sha256(designated_png).digest()
        self.calls = 0

    def query(self, request):
        assert request.kind == "score_rotation"
        self.calls += 1
        scores = [1 if hashlib.sha256(b).digest() == self.key else 0 for b in request.images[1:]]
        assert sum(scores) == 1, "designated render must be unique"
        return {"index": int(np.argmax(scores))}


def perturbed_dof(gt: DoF, rng, scale=0.2, degrees=15.0, shift=0.1, diameter=1.0) -> DoF:
    axis = rng.normal(size=3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    s = float(gt.scale[0]) * (1 + scale * rng.uniform(-1, 1))

    rot = quat_multiply(quat_from_axis_angle(axis, np.radians(degrees) * rng.uniform(0.5, 1.0)), gt.rotation)
    t = gt.translation + shift * diameter * rng.uniform(0.5, 1.0) * direction
    return DoF(scale=s, rotation=rot, translation=t)


class AnsweringServer:
    """httpx mock transport handler that replies with pre-registered answers.

    ``Spy`` registers the answer for each request body just before the HTTP
    backend sends it, so the full template/transport/extraction path runs.
    """

    def __init__(self):
        self.answers = {}
        self.requests = 0

    def handler(self, request):
        import httpx

        self.requests += 1
        key = canonical_json(json.loads(request.content))
        content = "Sure.\n```json\n" + json.dumps(self.answers[key]) + "\n```"
        return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


class Spy:
    def __init__(self, http, oracle, server: AnsweringServer):
        self.http = http
        self.oracle = oracle
        self.server = server

    def query(self, request):
        self.server.answers[canonical_json(self.http.build_body(request))] = self.oracle.query(request)
        return self.http.query(request)


def http_oracle(oracle, transcript_path):
    """Route ``oracle`` answers through an HttpBackend on a mock transport."""
    import httpx

    server = AnsweringServer()
    http = HttpBackend(endpoint="http://oracle.test/v1/chat", token="t", backoff=0,
                       client=httpx.Client(transport=httpx.MockTransport(server.handler)),
                       transcript=Transcript(transcript_path))
    return Spy(http, oracle, server)


def tree_bytes(root, skip=("timings.json",)):
    """Relative path -> bytes for every file under ``root`` (wall-clock timings skipped)."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def extreme_dof(gt: DoF, rng, scale=0.2, degrees=15.0, shift=0.1, diameter=1.0) -> DoF:
    """Perturbation at the full stated magnitude along random directions."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    s = float(gt.scale[0]) * (1 + scale * rng.choice([-1.0, 1.0]))
    rot = quat_multiply(quat_from_axis_angle(rng.normal(size=3), np.radians(degrees)), gt.rotation)
    return DoF(scale=s, rotation=rot, translation=gt.translation + shift * diameter * direction)


ACCEPTANCE: list[str] = []


def report(number: int, title: str, passed: bool, detail: str, capsys=None) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {title} | {detail}"
    ACCEPTANCE.append(line)
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
