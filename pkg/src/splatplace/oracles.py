"""Request/response protocol for every large-model interaction.

All oracle kinds travel in one envelope (:class:`OracleRequest`) so that a
single transport can be recorded and replayed. Backends expose
``query(request) -> dict``; the typed helpers below build requests and
validate responses before anything downstream sees them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol

import numpy as np

log = logging.getLogger(__name__)

KINDS = (
    "parse",
    "detect_region",
    "point_target",
    "score_rotation",
    "relative_scale",
    "scale_feedback",
    "embed_image",
)
PARSE_FIELDS = (
    "object_prompt",
    "attachment_region_prompt",
    "global_target",
    "interaction_word",
    "local_target",
    "spatial_word",
)
VERDICTS = ("accept", "increase", "decrease")


class OracleError(RuntimeError):
    pass


class SchemaViolation(OracleError):
    pass


class BackendUnavailable(OracleError):
    pass


class FixtureMiss(OracleError):
    pass


class MalformedFixture(OracleError):
    pass


@dataclass(frozen=True)
class ParsedInsertion:
    object_prompt: str
    attachment_region_prompt: str
    global_target: str
    interaction_word: str
    local_target: str
    spatial_word: str

    def __post_init__(self):
        for name in PARSE_FIELDS:
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise SchemaViolation(f"parsed field {name!r} must be non-empty text")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARSE_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedInsertion":
        if not isinstance(d, dict):
            raise SchemaViolation("parse response must be an object")
        missing = [name for name in PARSE_FIELDS if name not in d]
        if missing:
            raise SchemaViolation(f"parse response is missing {missing}")
        return cls(**{name: d[name] for name in PARSE_FIELDS})


@dataclass(frozen=True)
class OracleRequest:
    kind: str
    payload: dict = field(default_factory=dict)
    images: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}")
        object.__setattr__(self, "images", tuple(self.images))

    def digest(self) -> str:
        """SHA-256 over canonical JSON of kind+payload and each image's hash."""
        h = hashlib.sha256()
        h.update(canonical_json({"kind": self.kind, "payload": self.payload}).encode("utf-8"))
        for blob in self.images:
            h.update(b"\x00img\x00")
            h.update(hashlib.sha256(blob).digest())
        return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


class OracleBackend(Protocol):
    def query(self, request: OracleRequest) -> dict: ...


# ----------------------------------------------------------------- validation


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate_response(request: OracleRequest, response) -> dict:
    """Check ``response`` against the schema for ``request.kind``; return it."""
    kind = request.kind
    payload = request.payload
    if not isinstance(response, dict):
        raise SchemaViolation(f"{kind}: response must be a JSON object")
    if kind == "parse":
        ParsedInsertion.from_dict(response)
    elif kind == "detect_region":
        box = response.get("box", "missing")
        if box is None:
            return response
        w, h = payload["width"], payload["height"]
        if not (isinstance(box, list) and len(box) == 4 and all(_is_int(v) for v in box)):
            raise SchemaViolation(f"{kind}: box must be null or four integers")
        u0, v0, u1, v1 = box
        if not (0 <= u0 <= u1 < w and 0 <= v0 <= v1 < h):
            raise SchemaViolation(f"{kind}: box {box} outside {w}x{h} image")
    elif kind == "point_target":
        points = response.get("points")
        w, h = payload["width"], payload["height"]
        if not isinstance(points, list):
            raise SchemaViolation(f"{kind}: points must be a list")
        for p in points:
            if not (isinstance(p, list) and len(p) == 2 and all(_is_number(v) for v in p)):
                raise SchemaViolation(f"{kind}: each point must be [u, v]")
            if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
                raise SchemaViolation(f"{kind}: point {p} outside {w}x{h} image")
    elif kind == "score_rotation":
        index = response.get("index")
        n = payload["n_candidates"]
        if not _is_int(index) or not 0 <= index < n:
            raise SchemaViolation(f"{kind}: index must be an integer in [0, {n})")
    elif kind == "relative_scale":
        lam = response.get("lambda_rel")
        if not _is_number(lam) or lam <= 0:
            raise SchemaViolation(f"{kind}: lambda_rel must be a positive number")
    elif kind == "scale_feedback":
        verdict = response.get("verdict")
        factor = response.get("factor", 1.0)
        if verdict not in VERDICTS:
            raise SchemaViolation(f"{kind}: verdict must be one of {VERDICTS}")
        if not _is_number(factor) or factor <= 0:
            raise SchemaViolation(f"{kind}: factor must be a positive number")
    elif kind == "embed_image":
        vec = response.get("embedding")
        if not (isinstance(vec, list) and vec and all(_is_number(v) for v in vec)):
            raise SchemaViolation(f"{kind}: embedding must be a non-empty list of numbers")
        dim = payload.get("dim")
        if dim is not None and len(vec) != dim:
            raise SchemaViolation(f"{kind}: embedding has length {len(vec)}, expected {dim}")
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
            raise SchemaViolation(f"{kind}: embedding must be unit norm")
    return response


def ask(backend: OracleBackend, request: OracleRequest) -> dict:
    return validate_response(request, backend.query(request))


# ------------------------------------------------------------------- fixtures


def read_entries(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedFixture(f"cannot read fixture {path}: {exc}") from exc
    entries = doc.get("entries") if isinstance(doc, dict) else None
    if not isinstance(entries, dict):
        raise MalformedFixture(f"{path}: top level must be {{'entries': {{...}}}}")
    for key, entry in entries.items():
        if not (isinstance(entry, dict) and entry.get("kind") in KINDS and "response" in entry):
            raise MalformedFixture(f"{path}: entry {key} needs 'kind' and 'response'")
    return entries


class FixtureBackend:
    """Read-only lookup of responses by request digest."""

    def __init__(self, entries: dict):
        self._entries = dict(entries)
        self.calls = 0

    @classmethod
    def from_path(cls, path) -> "FixtureBackend":
        return cls(read_entries(path))

    def query(self, request: OracleRequest) -> dict:
        self.calls += 1
        key = request.digest()
        entry = self._entries.get(key)
        if entry is None:
            raise FixtureMiss(f"no fixture entry for {request.kind} request {key[:12]}")
        if entry["kind"] != request.kind:
            raise MalformedFixture(f"entry {key[:12]} is {entry['kind']}, request is {request.kind}")
        return json.loads(json.dumps(entry["response"]))


def fixture_backend(path) -> FixtureBackend:
    return FixtureBackend.from_path(path)


class Transcript:
    """Append-ordered record of exchanges in fixture format."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.entries: dict = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            self.entries = read_entries(self.path)

    def record(self, request: OracleRequest, response: dict) -> None:
        with self._lock:
            self.entries[request.digest()] = {"kind": request.kind, "payload": request.payload, "response": response}
            if self.path:
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps({"entries": self.entries}, indent=1))
                os.replace(tmp, self.path)


class RecordingBackend:
    """Wraps another backend and records every validated exchange."""

    def __init__(self, inner: OracleBackend, transcript: Transcript):
        self.inner = inner
        self.transcript = transcript

    def query(self, request: OracleRequest) -> dict:
        response = validate_response(request, self.inner.query(request))
        self.transcript.record(request, response)
        return response


# ----------------------------------------------------------------------- HTTP


def default_templates() -> dict[str, str]:
    root = resources.files("splatplace") / "templates"
    return {kind: (root / f"{kind}.txt").read_text() for kind in KINDS}


def load_templates(directory=None) -> dict[str, str]:
    templates = default_templates()
    if directory:
        for path in Path(directory).glob("*.txt"):
            if path.stem in KINDS:
                templates[path.stem] = path.read_text()
    return templates


def render_template(template: str, payload: dict) -> str:
    values = {k: (v if isinstance(v, str) else json.dumps(v)) for k, v in payload.items()}
    try:
        return template.format_map(values)
    except KeyError as exc:
        raise SchemaViolation(f"template placeholder {exc} has no payload value") from exc


_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def extract_json(text: str):
    """Pull the first JSON object or array out of free-form model output."""
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    decoder = json.JSONDecoder()
    for chunk in candidates:
        for i, ch in enumerate(chunk):
            if ch not in "{[":
                continue
            try:
                value, _ = decoder.raw_decode(chunk[i:])
                return value
            except json.JSONDecodeError:
                continue
    raise SchemaViolation("no JSON value found in model reply")


def _coerce(kind: str, value):
    # models often answer with a bare list/number; wrap into the response schema
    if isinstance(value, dict):
        return value
    if kind == "point_target" and isinstance(value, list):
        if value and all(_is_number(v) for v in value):
            value = [value]
        return {"points": value}
    if kind == "detect_region" and isinstance(value, list):
        return {"box": value or None}
    if kind == "embed_image" and isinstance(value, list):
        return {"embedding": value}
    return value


class HttpBackend:
    """Chat-completion style HTTP oracle with retries and a transcript.

    Each request kind is rendered through its prompt template; PNG images
    are attached as base64 data URLs.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        token: str | None = None,
        templates: dict[str, str] | None = None,
        model: str = "default",
        transcript: Transcript | None = None,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        client=None,
    ):
        import httpx

        self.endpoint = endpoint or os.environ.get("ORACLE_ENDPOINT")
        if not self.endpoint:
            raise BackendUnavailable("no endpoint given and ORACLE_ENDPOINT is unset")
        self.token = token if token is not None else os.environ.get("ORACLE_TOKEN")
        self.templates = templates or default_templates()
        self.model = model
        self.transcript = transcript or Transcript()
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = client or httpx.Client(timeout=timeout)
        self._httpx = httpx

    def build_body(self, request: OracleRequest) -> dict:
        import base64

        text = render_template(self.templates[request.kind], request.payload)
        content = [{"type": "text", "text": text}]
        for blob in request.images:
            url = "data:image/png;base64," + base64.b64encode(blob).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {"model": self.model, "messages": [{"role": "user", "content": content}], "temperature": 0}

    def _post(self, body: dict) -> str:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last = None
        for attempt in range(self.max_attempts):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise self._httpx.HTTPStatusError("retryable status", request=resp.request, response=resp)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (self._httpx.TransportError, self._httpx.HTTPStatusError) as exc:
                last = exc
                log.warning("oracle attempt %d/%d failed: %s", attempt + 1, self.max_attempts, exc)
                if attempt + 1 < self.max_attempts and self.backoff:
                    time.sleep(self.backoff * 2**attempt)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise SchemaViolation(f"unexpected completion envelope: {exc}") from exc
        raise BackendUnavailable(f"{self.endpoint} failed after {self.max_attempts} attempts: {last}")

    def query(self, request: OracleRequest) -> dict:
        reply = self._post(self.build_body(request))
        response = validate_response(request, _coerce(request.kind, extract_json(reply)))
        self.transcript.record(request, response)
        return response


def http_backend(endpoint=None, auth=None, prompt_templates=None, **kwargs) -> HttpBackend:
    templates = load_templates(prompt_templates) if not isinstance(prompt_templates, dict) else prompt_templates
    return HttpBackend(endpoint=endpoint, token=auth, templates=templates, **kwargs)


# ------------------------------------------------------------ typed requests


def parse_instruction(backend: OracleBackend, instruction: str, scene_png: bytes) -> ParsedInsertion:
    if not instruction or not instruction.strip():
        raise ValueError("instruction must be non-empty")
    req = OracleRequest("parse", {"instruction": instruction}, (scene_png,))
    return ParsedInsertion.from_dict(ask(backend, req))


def detect_region(backend, prompt: str, image_png: bytes, width: int, height: int, view: int):
    req = OracleRequest(
        "detect_region", {"prompt": prompt, "width": width, "height": height, "view": view}, (image_png,)
    )
    box = ask(backend, req).get("box")
    return None if box is None else tuple(box)


def point_target(backend, local_target: str, image_png: bytes, width: int, height: int, view: int):
    req = OracleRequest(
        "point_target", {"local_target": local_target, "width": width, "height": height, "view": view}, (image_png,)
    )
    return [tuple(p) for p in ask(backend, req)["points"]]


def score_rotation(backend, global_target: str, scene_png: bytes, renders: list[bytes], candidates: list) -> int:
    req = OracleRequest(
        "score_rotation",
        {"global_target": global_target, "n_candidates": len(renders), "candidates": candidates},
        (scene_png, *renders),
    )
    return ask(backend, req)["index"]


def relative_scale(backend, object_prompt: str, region_prompt: str, scene_png: bytes) -> float:
    req = OracleRequest(
        "relative_scale", {"object_prompt": object_prompt, "attachment_region_prompt": region_prompt}, (scene_png,)
    )
    return float(ask(backend, req)["lambda_rel"])


def scale_feedback(backend, object_prompt: str, global_target: str, image_png: bytes, scale: float, round_: int):
    req = OracleRequest(
        "scale_feedback",
        {"object_prompt": object_prompt, "global_target": global_target, "scale": scale, "round": round_},
        (image_png,),
    )
    resp = ask(backend, req)
    return resp["verdict"], float(resp.get("factor", 1.0))


def embed_image(backend, image_png: bytes, dim: int | None = None) -> np.ndarray:
    payload = {} if dim is None else {"dim": dim}
    return np.asarray(ask(backend, OracleRequest("embed_image", payload, (image_png,)))["embedding"], dtype=np.float64)
